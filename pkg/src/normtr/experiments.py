"""Experiment configuration and the ablation switches."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from .data import DatasetManifest, GeneratorConfig, generate_dataset, load_dataset
from .model import ModelConfig, NormTR
from .training import TrainConfig, fit, scheme_off

ABLATIONS = ("scheme", "nrgf", "mf", "transformer")

# Toy-scale training preset.  TrainConfig keeps the published recipe (lr 1e-4);
# at this data scale 1e-3 is needed to converge within 30 epochs.
TOY_TRAIN = {"lr": 1e-3, "epochs": 30, "batch_size": 16}


@dataclass
class Ablations:
    drop_modality: list = field(default_factory=list)
    swap_qkv: bool = False
    no_nrgf: bool = False
    no_mf: bool = False
    no_transformer: bool = False
    no_scheme: bool = False


@dataclass
class ExperimentConfig:
    data: str | None = None
    generator: dict | None = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=lambda: dict(TOY_TRAIN))
    out: str = "runs/default"
    seed: int = 0
    ablations: Ablations = field(default_factory=Ablations)

    def validate(self):
        if (self.data is None) == (self.generator is None):
            raise ValueError("specify exactly one data source: 'data' (a dataset directory) or 'generator'")
        unknown = set(self.ablations.drop_modality) - {"audio", "video", "text"}
        if unknown:
            raise ValueError(f"drop_modality: unknown modalities {sorted(unknown)}")
        if len(self.ablations.drop_modality) >= 3:
            raise ValueError("drop_modality would remove every modality")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        abl = Ablations(**d.pop("ablations", {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d, ablations=abl)
        if "train" in d:
            cfg.train = {**TOY_TRAIN, **d["train"]}
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_dataset(exp):
    """Load the dataset directory or generate the inline synthetic set."""
    exp.validate()
    if exp.data is not None:
        return load_dataset(exp.data)
    gen = GeneratorConfig(**{k: tuple(v) if k == "modality_weights" else v for k, v in exp.generator.items()})
    manifest = DatasetManifest(**exp.manifest)
    return generate_dataset(gen, manifest, manifest.seed)


def model_config(dataset, exp):
    """ModelConfig for ``dataset`` with the experiment's overrides and ablations applied."""
    man = dataset.manifest
    abl = exp.ablations
    mods = [m for m in dataset.modalities if m not in abl.drop_modality]
    cfg = dict(
        T=man.T,
        input_dims=tuple(man.dims[m] for m in mods),
        modalities=tuple(mods),
        task=man.label_kind,
        num_classes=man.num_classes if man.label_kind == "classification" else 1,
    )
    cfg.update(exp.model)
    if abl.swap_qkv:
        cfg["query_source"] = "mf"
    if abl.no_nrgf:
        cfg["use_nrgf"] = False
    if abl.no_mf:
        cfg["use_mf"] = False
    if abl.no_transformer:
        cfg["use_transformer"] = False
    return ModelConfig(**cfg)


def train_config(exp):
    tcfg = TrainConfig(**{**exp.train, "seed": exp.seed})
    if exp.ablations.no_scheme:
        tcfg = scheme_off(tcfg)
    if exp.ablations.no_mf:
        tcfg.adv1_on = False  # no MF blocks to anchor the modality discriminator
    return tcfg


def run(exp, dataset=None, step_log=None, epoch_log=None, quiet=True):
    """Train one model for ``exp``; returns (model, FitResult)."""
    dataset = dataset if dataset is not None else build_dataset(exp)
    mcfg = model_config(dataset, exp)
    model = NormTR(mcfg, seed=exp.seed)
    ds = dataset
    if exp.ablations.drop_modality:
        ds = copy.copy(dataset)
        ds.splits = {k: v.select_modalities(mcfg.modalities) for k, v in dataset.splits.items()}
    result = fit(model, ds, train_config(exp), step_log=step_log, epoch_log=epoch_log, quiet=quiet)
    return model, result
