"""Command-line entry point: ``normtr {generate,train,eval,robustness,analyze,gradcheck}``.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import copy
import json
import logging
import os
import sys

from . import metrics as mt
from . import svg
from . import tensor as tc
from .data import ConfigError, FormatError, save_dataset
from .experiments import ExperimentConfig, build_dataset, run
from .gradcheck import gradcheck, tiny_config
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import NonFiniteLoss

log = logging.getLogger("normtr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


def say(args, text):
    """Progress/summary output, silenced by --quiet (errors always go to stderr)."""
    if not args.quiet:
        print(text)


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _threads():
    try:
        return max(1, int(os.environ.get("NORMTR_THREADS", "1")))
    except ValueError:
        raise UsageError("NORMTR_THREADS must be an integer") from None


def _experiment(args):
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "data", None):
        exp.data, exp.generator = args.data, None
    if args.seed is not None:
        exp.seed = args.seed
    if args.out:
        exp.out = args.out
    abl = exp.ablations
    for name in getattr(args, "ablate", None) or []:
        setattr(abl, f"no_{name}", True)
    if getattr(args, "swap_qkv", False):
        abl.swap_qkv = True
    for m in getattr(args, "drop_modality", None) or []:
        if m not in abl.drop_modality:
            abl.drop_modality.append(m)
    for key in ("epochs", "lr"):
        val = getattr(args, key, None)
        if val is not None:
            exp.train[key] = val
    try:
        exp.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    return exp


# --- commands ----------------------------------------------------------


def cmd_generate(args):
    exp = _experiment(args)
    if exp.generator is None:
        raise UsageError("generate needs an inline generator config, not a dataset path")
    if args.seed is not None:
        exp.manifest["seed"] = args.seed
    try:
        ds = build_dataset(exp)
    except (ConfigError, TypeError) as e:
        raise UsageError(str(e)) from None
    save_dataset(ds, exp.out)
    man = ds.manifest
    counts = ", ".join(f"{k}={v}" for k, v in man.sample_counts.items())
    say(args, f"wrote {exp.out}: {counts}; T={man.T} N_a={man.N_a} N_v={man.N_v} N_t={man.N_t} "
          f"{man.label_kind}" + (f" C={man.num_classes}" if man.label_kind == "classification" else ""))
    return EXIT_OK


def _train_one(exp):
    os.makedirs(exp.out, exist_ok=True)
    dataset = build_dataset(exp)
    with open(os.path.join(exp.out, "steps.jsonl"), "w") as steps, \
            open(os.path.join(exp.out, "epochs.csv"), "w") as epochs:
        model, result = run(exp, dataset, step_log=steps, epoch_log=epochs)
    save_checkpoint(os.path.join(exp.out, "checkpoint.nrm"), model,
                    extra={"best_epoch": result.best_epoch, "experiment": exp.to_dict()})
    _write(os.path.join(exp.out, "config.json"), _json(exp.to_dict()))
    summary = {"best_epoch": result.best_epoch, "best_val": result.best_val, "seed": exp.seed}
    _write(os.path.join(exp.out, "summary.json"), _json(summary))
    return summary


def cmd_train(args):
    exp = _experiment(args)
    if args.seeds <= 1:
        s = _train_one(exp)
        say(args, f"trained {exp.out}: best epoch {s['best_epoch']}, val {s['best_val']:.4f}")
        return EXIT_OK
    runs = []
    for k in range(args.seeds):
        e = copy.deepcopy(exp)
        e.seed = exp.seed + k
        e.out = os.path.join(exp.out, f"seed_{e.seed}")
        runs.append(e)
    workers = min(_threads(), len(runs))
    if workers == 1:
        summaries = [_train_one(e) for e in runs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_train_one, runs))
    for e, s in zip(runs, summaries):
        say(args, f"trained {e.out}: best epoch {s['best_epoch']}, val {s['best_val']:.4f}")
    return EXIT_OK


def _load(args):
    model, extra = load_checkpoint(args.checkpoint)
    exp = _experiment(args)
    if not args.data and not args.config and "experiment" in extra:
        exp = ExperimentConfig.from_dict(extra["experiment"])
    dataset = build_dataset(exp)
    if dataset.manifest.label_kind != model.cfg.task:
        raise UsageError(f"checkpoint head is {model.cfg.task} but dataset labels are {dataset.manifest.label_kind}")
    split = dataset[args.split].select_modalities(model.cfg.modalities)
    return model, split, exp


def cmd_eval(args):
    model, split, exp = _load(args)
    report = mt.evaluate(model, split)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "eval")
    _write(os.path.join(out, "metrics.csv"), report.values_csv())
    _write(os.path.join(out, "metrics.json"), report.to_json())
    for k, v in sorted(report.values.items()):
        say(args, f"{k:<12} {v:.4f}")
    for k, v in report.display.items():
        say(args, f"{k:<12} {v}")
    return EXIT_OK


def _ratios(text):
    try:
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --ratios {text!r}") from None


def cmd_robustness(args):
    model, split, exp = _load(args)
    ratios = _ratios(args.ratios) if args.ratios else list(mt.DEFAULT_RATIOS)
    seeds = [exp.seed + k for k in range(max(1, args.seeds))]
    workers = min(_threads(), len(seeds))

    def one(s):
        return mt.robustness_sweep(model, split, ratios, seed=s, shared_positions=args.shared_positions)

    if workers == 1:
        reports = [one(s) for s in seeds]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(one, seeds))
    pooled = mt.pooled_report(reports) if len(reports) > 1 else reports[0]
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "robustness")
    _write(os.path.join(out, "curves.csv"), pooled.curves_csv())
    auilc = {"pooled": pooled.auilc, "per_seed": {str(s): r.auilc for s, r in zip(seeds, reports)}}
    _write(os.path.join(out, "auilc.json"), _json(auilc))
    for s, r in zip(seeds, reports):
        _write(os.path.join(out, f"curves_seed{s}.csv"), r.curves_csv())
    for metric, pts in pooled.curves.items():
        chart = svg.line_chart({"NORM-TR": pts}, title=f"{metric} vs mask ratio",
                               xlabel="mask ratio r", ylabel=metric, timestamp=not args.no_timestamp)
        _write(os.path.join(out, f"robustness_{metric}.svg"), chart)
    for metric, a in sorted(pooled.auilc.items()):
        say(args, f"AUILC {metric:<12} {a:.4f}")
    return EXIT_OK


def cmd_analyze(args):
    model, split, exp = _load(args)
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "analysis")
    runs = [("main", model)]
    if args.compare:
        other, _ = load_checkpoint(args.compare)
        runs.append(("compare", other))
    series, summary = {}, {}
    for tag, m in runs:
        if not (m.cfg.use_nrgf and m.cfg.use_mf):
            raise UsageError(f"{tag}: similarity export needs both NRGF and MF extractors")
        dists = mt.similarity_export(m, split, args.max_samples)
        _write(os.path.join(out, f"similarity_{tag}.csv"), mt.similarity_csv(dists))
        for d in dists:
            series[f"{tag} {d.kind}"] = list(zip(d.grid.tolist(), d.density.tolist()))
            summary[f"{tag}.{d.kind}.median"] = d.median
            summary[f"{tag}.{d.kind}.skipped"] = d.skipped
    _write(os.path.join(out, "similarity.svg"),
           svg.line_chart(series, "cosine similarity density", "cosine similarity", "density",
                          timestamp=not args.no_timestamp))
    # attention for one eval-masked sample of the main model
    cfg = model.cfg
    if cfg.use_transformer:
        keep = mt.sweep_keep(split.subset([args.sample]), cfg.T, args.mask_ratio, exp.seed, cfg.M)
        with tc.no_grad():
            trace = model.forward({k: v[[args.sample]] for k, v in split.features.items()}, keep, with_aux=False)
        A, cols = mt.attention_export(trace, keep[0])
        _write(os.path.join(out, "attention.csv"), mt.attention_csv(A, cols))
        _write(os.path.join(out, "attention.svg"),
               svg.heatmap(A, cols, "final-block attention (masked keys outlined)", timestamp=not args.no_timestamp))
        on, off = mt.masked_attention_contrast(model, split, args.mask_ratio, exp.seed)
        summary["attention.masked_mean"] = on
        summary["attention.unmasked_mean"] = off
    _write(os.path.join(out, "analysis.json"), _json(summary))
    for k, v in sorted(summary.items()):
        say(args, f"{k:<32} {v}")
    return EXIT_OK


def cmd_gradcheck(args):
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh).get("model", {})
    cfg = tiny_config(**overrides)
    report = gradcheck(cfg, seed=args.seed or 0, tol=args.tolerance, h=args.step)
    for line in report.lines():
        if line.startswith("FAIL"):
            print(line)  # failures are reported even with --quiet
        else:
            say(args, line)
    print(f"{'PASS' if report.passed else 'FAIL'}: {report.checked} entries in {report.seconds:.1f}s")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# --- parser ------------------------------------------------------------


def build_parser():
    p = _Parser(prog="normtr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment JSON; flags override its values")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--quiet", action="store_true")

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--seeds", type=int, default=1, help="train this many consecutive seeds")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--ablate", action="append", choices=["scheme", "nrgf", "mf", "transformer"])
    sp.add_argument("--swap-qkv", action="store_true", help="MFs as query, NRGFs as key/value")
    sp.add_argument("--drop-modality", action="append", choices=["audio", "video", "text"])
    sp.set_defaults(fn=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "metrics on a split"),
                               ("robustness", cmd_robustness, "mask-ratio sweep and AUILC"),
                               ("analyze", cmd_analyze, "similarity and attention exports")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--data", help="dataset directory (default: the checkpoint's experiment)")
        sp.add_argument("--split", default="test", choices=["train", "val", "test"])
        sp.set_defaults(fn=fn)
        if name == "robustness":
            sp.add_argument("--ratios", help="comma-separated mask ratios (default 0,0.1,...,1)")
            sp.add_argument("--seeds", type=int, default=1, help="eval-mask seeds; curves are pooled")
            sp.add_argument("--shared-positions", action="store_true",
                            help="erase the same steps in every modality")
        if name in ("robustness", "analyze"):
            sp.add_argument("--no-timestamp", action="store_true", help="omit SVG generation metadata")
        if name == "analyze":
            sp.add_argument("--compare", help="second checkpoint exported alongside (e.g. scheme off)")
            sp.add_argument("--sample", type=int, default=0)
            sp.add_argument("--mask-ratio", type=float, default=0.5)
            sp.add_argument("--max-samples", type=int)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    sp.add_argument("--config", help="JSON whose 'model' entry overrides the tiny config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tolerance", type=float, default=1e-3)
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.fn(args)
    except (FormatError, CheckpointError, OSError) as e:
        print(f"normtr {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteLoss as e:
        print(f"normtr {args.command}: numeric failure at step {e.step}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"normtr {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError, KeyError, TypeError) as e:
        print(f"normtr {args.command}: error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
