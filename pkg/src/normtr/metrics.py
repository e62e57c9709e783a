"""Evaluation metrics, robustness sweeps, AUILC, and analysis exports."""
from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gaussian_kde

from . import tensor as tc
from .noise import eval_keep, eval_mask_rng

DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # metric -> [(r, x), ...]
    auilc: dict = field(default_factory=dict)
    display: dict = field(default_factory=dict)  # preformatted cells, e.g. paired Acc-2

    def add_curve(self, metric, points):
        rs = [r for r, _ in points]
        if any(b <= a for a, b in zip(rs, rs[1:])) or rs[0] < 0 or rs[-1] > 1:
            raise ValueError("curve ratios must be strictly increasing within [0, 1]")
        self.curves[metric] = list(points)
        self.auilc[metric] = auilc(points)

    def to_json(self):
        doc = {
            "values": self.values,
            "auilc": self.auilc,
            "curves": {k: [[r, x] for r, x in v] for k, v in self.curves.items()},
            "display": self.display,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def values_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(self.values):
            w.writerow([k, repr(float(self.values[k]))])
        return buf.getvalue()

    def curves_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "r", "value"])
        for k in sorted(self.curves):
            for r, x in self.curves[k]:
                w.writerow([k, repr(float(r)), repr(float(x))])
        return buf.getvalue()


# --- classification ----------------------------------------------------

def confusion_matrix(preds, labels, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, int), np.asarray(preds, int)), 1)
    return cm


def weighted_f1(preds, labels, num_classes=None):
    """Per-class F1 averaged with class-support weights (classes absent from the labels weigh 0)."""
    preds, labels = np.asarray(preds, int), np.asarray(labels, int)
    if num_classes is None:
        num_classes = int(max(preds.max(), labels.max())) + 1
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(np.sum(f1 * support) / support.sum())


def classify_metrics(preds, labels, num_classes):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("empty input")
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    acc = float(np.mean(preds == labels))
    return MetricsReport({"acc": acc, "f1": weighted_f1(preds, labels, num_classes)})


# --- regression --------------------------------------------------------

def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    sx, sy = np.sqrt(np.sum(x * x)), np.sqrt(np.sum(y * y))
    tiny = 1e-9 * np.sqrt(len(x))
    if sx <= tiny * max(1.0, np.abs(x).max()) or sy <= tiny * max(1.0, np.abs(y).max()):
        raise ValueError("correlation undefined for zero-variance input")
    return float(np.clip(np.sum(x * y) / (sx * sy), -1.0, 1.0))


def three_class(x, band=0.5):
    return np.where(x < -band, 0, np.where(x > band, 2, 1))


def regress_metrics(preds, labels, acc3_band=0.5, undefined_corr=None):
    """MOSI-style regression metrics.

    Zero-variance input makes Corr undefined: raises ValueError unless
    ``undefined_corr`` supplies a stand-in value.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(preds) == 0:
        raise ValueError("empty input")
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    v = {}
    v["mae"] = float(np.mean(np.abs(preds - labels)))
    try:
        v["corr"] = _pearson(preds, labels)
    except ValueError:
        if undefined_corr is None:
            raise
        v["corr"] = float(undefined_corr)
    p7 = np.round(np.clip(preds, -3, 3))
    l7 = np.round(np.clip(labels, -3, 3))
    v["acc7"] = float(np.mean(p7 == l7))
    v["acc3"] = float(np.mean(three_class(preds, acc3_band) == three_class(labels, acc3_band)))
    # negative / non-negative
    pb, lb = preds >= 0, labels >= 0
    v["acc2_nonneg"] = float(np.mean(pb == lb))
    v["f1_nonneg"] = weighted_f1(pb, lb, 2)
    # negative / positive, zero labels excluded
    nz = labels != 0
    if nz.any():
        pb, lb = preds[nz] > 0, labels[nz] > 0
        v["acc2_pos"] = float(np.mean(pb == lb))
        v["f1_pos"] = weighted_f1(pb, lb, 2)
    report = MetricsReport(v)
    if nz.any():
        report.display["Acc-2"] = dual(v["acc2_nonneg"], v["acc2_pos"])
        report.display["F1"] = dual(v["f1_nonneg"], v["f1_pos"])
    return report


def dual(a, b, scale=100.0, digits=1):
    """Paired-cell format used for the two Acc-2/F1 conventions, e.g. '81.2 / 83.0'."""
    return f"{a * scale:.{digits}f} / {b * scale:.{digits}f}"


# --- AUILC -------------------------------------------------------------

def auilc(curve):
    """Trapezoidal area under a metric-vs-mask-ratio line chart."""
    pts = list(curve)
    if len(pts) < 2:
        raise ValueError("AUILC needs at least two points")
    total = 0.0
    for (r0, x0), (r1, x1) in zip(pts, pts[1:]):
        if r1 <= r0:
            raise ValueError("mask ratios must be strictly increasing")
        total += (x0 + x1) / 2 * (r1 - r0)
    return total


# --- robustness sweep --------------------------------------------------

def evaluate(model, split, keep=None, undefined_corr=None):
    preds = model.infer(split.features, keep)
    if model.cfg.task == "classification":
        return classify_metrics(preds, split.labels, model.cfg.num_classes)
    return regress_metrics(preds, split.labels, undefined_corr=undefined_corr)


def sweep_keep(split, T, ratio, seed, num_modalities, shared_positions=False):
    return np.stack([eval_keep(T, ratio, eval_mask_rng(seed, i, ratio), num_modalities, shared_positions)
                     for i in split.indices])


def robustness_sweep(model, split, ratios=DEFAULT_RATIOS, seed=0, shared_positions=False):
    """Evaluate on eval-masked copies of ``split`` for every ratio; one curve per metric."""
    ratios = [float(r) for r in ratios]
    cfg = model.cfg
    # fully erased inputs give constant predictions; Corr then counts as 0
    per_ratio = [evaluate(model, split, sweep_keep(split, cfg.T, r, seed, cfg.M, shared_positions),
                          undefined_corr=0.0).values
                 for r in ratios]
    report = MetricsReport(dict(per_ratio[0]))
    for metric in per_ratio[0]:
        if all(metric in v for v in per_ratio):
            report.add_curve(metric, [(r, v[metric]) for r, v in zip(ratios, per_ratio)])
    return report


def pooled_report(reports):
    """Average several sweeps pointwise, then recompute AUILC."""
    out = MetricsReport()
    for metric in reports[0].curves:
        rs = [r for r, _ in reports[0].curves[metric]]
        xs = np.mean([[x for _, x in rep.curves[metric]] for rep in reports], axis=0)
        out.add_curve(metric, list(zip(rs, xs.tolist())))
    out.values = {k: float(np.mean([rep.values[k] for rep in reports])) for k in reports[0].values}
    return out


# --- feature similarity ------------------------------------------------

KDE_GRID = np.linspace(-1.0, 1.0, 201)


@dataclass
class SimilarityDistribution:
    kind: str  # "nrgf-nrgf" or "nrgf-mf"
    similarities: np.ndarray
    grid: np.ndarray
    density: np.ndarray
    skipped: int = 0

    @property
    def median(self):
        return float(np.median(self.similarities)) if len(self.similarities) else float("nan")


def cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroDivisionError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def kde_on_grid(values, grid=KDE_GRID):
    """Gaussian KDE (Silverman bandwidth), renormalized to unit trapezoid mass on ``grid``."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return np.zeros_like(grid)
    if len(values) > 1 and np.std(values) > 1e-9:
        dens = gaussian_kde(values, bw_method="silverman")(grid)
    else:
        h = 0.02
        dens = np.exp(-0.5 * ((grid[:, None] - values[None, :]) / h) ** 2).sum(axis=1)
    mass = np.trapezoid(dens, grid)
    return dens / mass if mass > 0 else dens


def similarity_export(model, split, max_samples=None):
    """Cosine similarities of mean-pooled per-modality NRGF blocks: NRGF-NRGF pairs and same-modality NRGF-MF."""
    cfg = model.cfg
    n = len(split) if max_samples is None else min(max_samples, len(split))
    feats = {m: x[:n] for m, x in split.features.items()}
    with tc.no_grad():
        trace = model.forward(feats, with_aux=False)
    T = cfg.T
    nr = trace.f_nr.data.reshape(n, cfg.M, T, cfg.d).mean(axis=2)
    mf = trace.f_m.data.reshape(n, cfg.M, T, cfg.d).mean(axis=2)
    within, across = [], []
    skipped = 0
    for i in range(n):
        for a, b in itertools.combinations(range(cfg.M), 2):
            try:
                within.append(cosine(nr[i, a], nr[i, b]))
            except ZeroDivisionError:
                skipped += 1
        for a in range(cfg.M):
            try:
                across.append(cosine(nr[i, a], mf[i, a]))
            except ZeroDivisionError:
                skipped += 1
    within, across = np.array(within), np.array(across)
    return (
        SimilarityDistribution("nrgf-nrgf", within, KDE_GRID, kde_on_grid(within), skipped),
        SimilarityDistribution("nrgf-mf", across, KDE_GRID, kde_on_grid(across), skipped),
    )


def similarity_csv(dists):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "grid", "density"])
    for d in dists:
        for g, p in zip(d.grid, d.density):
            w.writerow([d.kind, repr(float(g)), repr(float(p))])
    return buf.getvalue()


# --- attention ---------------------------------------------------------

def masked_columns(keep):
    """Key-row indices (in the stacked M*T layout) of erased frames; ``keep`` is [M, T]."""
    keep = np.asarray(keep)
    T = keep.shape[1]
    return [m * T + t for m in range(keep.shape[0]) for t in range(T) if keep[m, t] == 0]


def attention_export(trace, keep=None, sample=0):
    """Head-averaged final-block attention of one batch row, plus the masked key columns."""
    if not trace.attention:
        raise ValueError("trace has no attention weights (transformer disabled?)")
    A = trace.attention[-1][sample].mean(axis=0)
    cols = [] if keep is None else masked_columns(keep)
    return A, cols


def attention_csv(matrix, cols):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "weight", "masked_col"])
    masked = set(cols)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            w.writerow([i, j, repr(float(matrix[i, j])), int(j in masked)])
    return buf.getvalue()


def masked_attention_contrast(model, split, ratio=0.5, seed=0):
    """Mean final-block attention onto erased vs kept key frames over an eval-masked split.

    Returns (mean onto masked keys, mean onto unmasked keys), both per key column.
    """
    cfg = model.cfg
    keep = sweep_keep(split, cfg.T, ratio, seed, cfg.M)
    with tc.no_grad():
        trace = model.forward(split.features, keep, with_aux=False)
    A = trace.attention[-1].mean(axis=1)  # [B, L, L]
    col_mass = A.mean(axis=1)  # average attention each key column receives
    masked = keep.reshape(len(keep), -1) == 0
    return float(col_mass[masked].mean()), float(col_mass[~masked].mean())
