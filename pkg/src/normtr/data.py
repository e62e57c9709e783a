"""Synthetic pre-computed multimodal features, persistence, and the input projection ``g``.

Each sample draws a latent emotion vector ``z`` (from its class, or from a
1-D score for regression).  Modality ``m`` at time ``t`` observes

    U_m[t] = s_e * w_m * (A_m + sin(2*pi*t/T + phi_m) * B_m) @ z
             + s_n * C_m @ nu_m[t] + noise_std * eps

where ``nu_m`` is a per-sample AR(1) nuisance process private to the
modality.  The text modality gets the largest weight ``w_m``.

On-disk layout (``save_dataset``)::

    manifest.json                 DatasetManifest fields + generator config
    {split}_{modality}.f32        little-endian float32, [count, T, N_m], row-major
    {split}_labels.u32 | .f32     uint32 class ids or float32 scores, [count]
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tc

MODALITIES = ("audio", "video", "text")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid generator or manifest configuration."""


class FormatError(ValueError):
    """Dataset directory contents disagree with the manifest."""


@dataclass
class GeneratorConfig:
    latent_dim: int = 8
    nuisance_dim: int = 4
    signal_strength: float = 1.0
    nuisance_strength: float = 1.0
    label_noise: float = 0.0
    noise_std: float = 0.5
    within_class_std: float = 0.5
    modality_weights: tuple = (0.6, 0.8, 1.2)
    mixing_seed: int = 0

    def validate(self):
        if self.signal_strength <= 0:
            raise ConfigError("signal_strength must be > 0")
        if self.nuisance_strength < 0:
            raise ConfigError("nuisance_strength must be >= 0")
        if not 0 <= self.label_noise <= 1:
            raise ConfigError("label_noise must be in [0, 1]")
        if self.latent_dim < 1 or self.nuisance_dim < 1:
            raise ConfigError("latent_dim and nuisance_dim must be positive")
        if len(self.modality_weights) != len(MODALITIES):
            raise ConfigError("modality_weights needs one entry per modality")


@dataclass
class DatasetManifest:
    sample_counts: dict = field(default_factory=lambda: {"train": 600, "val": 200, "test": 200})
    T: int = 8
    N_a: int = 12
    N_v: int = 12
    N_t: int = 12
    label_kind: str = "classification"
    num_classes: int = 4
    seed: int = 0
    signal_strength: float = 1.0
    nuisance_strength: float = 1.0
    label_noise: float = 0.0

    @property
    def dims(self):
        return {"audio": self.N_a, "video": self.N_v, "text": self.N_t}

    def validate(self):
        for name in ("T", "N_a", "N_v", "N_t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.T < 2:
            raise ConfigError(f"T must be >= 2, got {self.T}")
        if self.label_kind not in ("classification", "regression"):
            raise ConfigError(f"label_kind must be classification or regression, got {self.label_kind!r}")
        if self.label_kind == "classification" and self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        for split, n in self.sample_counts.items():
            if split not in SPLITS or n < 0:
                raise ConfigError(f"bad sample_counts entry {split}={n}")


@dataclass
class MultimodalSample:
    features: dict
    label: float | int

    @property
    def T(self):
        return next(iter(self.features.values())).shape[0]

    @property
    def U_a(self):
        return self.features["audio"]

    @property
    def U_v(self):
        return self.features["video"]

    @property
    def U_t(self):
        return self.features["text"]


@dataclass
class Split:
    """Stacked samples of one split: ``features[m]`` is [count, T, N_m]."""

    features: dict
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        label = self.labels[i]
        label = int(label) if self.labels.dtype.kind == "u" else float(label)
        return MultimodalSample({m: x[i] for m, x in self.features.items()}, label)

    def subset(self, idx):
        idx = np.asarray(idx)
        return Split({m: x[idx] for m, x in self.features.items()}, self.labels[idx], self.indices[idx])

    def select_modalities(self, names):
        return Split({m: self.features[m] for m in names}, self.labels, self.indices)


@dataclass
class Dataset:
    manifest: DatasetManifest
    splits: dict
    generator: GeneratorConfig | None = None

    def __getitem__(self, name):
        return self.splits[name]

    @property
    def modalities(self):
        return tuple(next(iter(self.splits.values())).features)


def _mixing(cfg, manifest, seed):
    rng = np.random.default_rng([seed, cfg.mixing_seed, 7919])
    L, Ln = cfg.latent_dim, cfg.nuisance_dim
    if manifest.label_kind == "classification":
        centers = rng.standard_normal((manifest.num_classes, L))
    else:
        d = rng.standard_normal(L)
        centers = d / np.linalg.norm(d) * np.sqrt(L)
    mix = {}
    for m, n_m in manifest.dims.items():
        mix[m] = (
            rng.standard_normal((n_m, L)) / np.sqrt(L),
            rng.standard_normal((n_m, L)) / np.sqrt(L),
            rng.standard_normal((n_m, Ln)) / np.sqrt(Ln),
            rng.uniform(0, 2 * np.pi),
        )
    return centers, mix


def _draw_sample(cfg, manifest, centers, mix, seed, index):
    rng = np.random.default_rng([seed, index])
    T, L = manifest.T, cfg.latent_dim
    if manifest.label_kind == "classification":
        c = int(rng.integers(manifest.num_classes))
        z = centers[c] + cfg.within_class_std * rng.standard_normal(L)
        label = c
        if rng.random() < cfg.label_noise:
            label = int(rng.integers(manifest.num_classes))
    else:
        score = rng.uniform(-3.0, 3.0)
        z = (score / 3.0) * centers + cfg.within_class_std * rng.standard_normal(L)
        label = float(np.clip(score + cfg.label_noise * rng.standard_normal(), -3.0, 3.0))
    t = np.arange(T)
    feats = {}
    for w, (m, (A, B, Cn, phi)) in zip(cfg.modality_weights, mix.items()):
        mod = np.sin(2 * np.pi * t / T + phi)[:, None]
        signal = (A @ z)[None, :] + mod * (B @ z)[None, :]
        nu = np.empty((T, cfg.nuisance_dim))
        nu[0] = rng.standard_normal(cfg.nuisance_dim)
        for k in range(1, T):
            nu[k] = 0.8 * nu[k - 1] + 0.6 * rng.standard_normal(cfg.nuisance_dim)
        x = (cfg.signal_strength * w * signal
             + cfg.nuisance_strength * nu @ Cn.T
             + cfg.noise_std * rng.standard_normal((T, len(A))))
        feats[m] = x.astype(np.float32)
    return feats, label


def generate_dataset(cfg, manifest, seed=None):
    """Build all splits; sample ``i`` (numbered across splits) depends only on (seed, i)."""
    cfg.validate()
    manifest.validate()
    seed = manifest.seed if seed is None else seed
    manifest.seed = seed
    manifest.signal_strength = cfg.signal_strength
    manifest.nuisance_strength = cfg.nuisance_strength
    manifest.label_noise = cfg.label_noise
    centers, mix = _mixing(cfg, manifest, seed)
    label_dtype = np.uint32 if manifest.label_kind == "classification" else np.float32
    splits, offset = {}, 0
    for name in SPLITS:
        n = manifest.sample_counts.get(name, 0)
        feats = {m: np.empty((n, manifest.T, d), np.float32) for m, d in manifest.dims.items()}
        labels = np.empty(n, label_dtype)
        for i in range(n):
            f, y = _draw_sample(cfg, manifest, centers, mix, seed, offset + i)
            for m in feats:
                feats[m][i] = f[m]
            labels[i] = y
        splits[name] = Split(feats, labels, np.arange(offset, offset + n))
        offset += n
    return Dataset(manifest, splits, cfg)


# --- persistence -------------------------------------------------------

def _label_suffix(kind):
    return "u32" if kind == "classification" else "f32"


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    doc = asdict(dataset.manifest)
    if dataset.generator is not None:
        gen = asdict(dataset.generator)
        gen["modality_weights"] = list(gen["modality_weights"])
        doc["generator"] = gen
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    suffix = _label_suffix(dataset.manifest.label_kind)
    for name, split in dataset.splits.items():
        for m, x in split.features.items():
            with open(os.path.join(directory, f"{name}_{m}.f32"), "wb") as fh:
                fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
        ldt = "<u4" if suffix == "u32" else "<f4"
        with open(os.path.join(directory, f"{name}_labels.{suffix}"), "wb") as fh:
            fh.write(np.ascontiguousarray(split.labels, dtype=ldt).tobytes())


def _read_blob(path, split, dtype, shape):
    expected = int(np.prod(shape)) * 4
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise FormatError(f"split {split!r}: missing blob {os.path.basename(path)}") from None
    if len(raw) != expected:
        raise FormatError(
            f"split {split!r}: blob {os.path.basename(path)} has {len(raw)} bytes, "
            f"expected {expected}; data ends at byte offset {min(len(raw), expected)}"
        )
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def load_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        doc = json.load(fh)
    gen = doc.pop("generator", None)
    known = {f.name for f in fields(DatasetManifest)}
    unknown = set(doc) - known
    if unknown:
        raise FormatError(f"unknown manifest keys: {sorted(unknown)}")
    manifest = DatasetManifest(**doc)
    manifest.validate()
    generator = None
    if gen is not None:
        gen["modality_weights"] = tuple(gen["modality_weights"])
        generator = GeneratorConfig(**gen)
    suffix = _label_suffix(manifest.label_kind)
    ldt = "<u4" if suffix == "u32" else "<f4"
    splits, offset = {}, 0
    for name in SPLITS:
        n = manifest.sample_counts.get(name, 0)
        feats = {
            m: _read_blob(os.path.join(directory, f"{name}_{m}.f32"), name, "<f4", (n, manifest.T, d)).astype(np.float32)
            for m, d in manifest.dims.items()
        }
        labels = _read_blob(os.path.join(directory, f"{name}_labels.{suffix}"), name, ldt, (n,))
        labels = labels.astype(np.uint32 if suffix == "u32" else np.float32)
        splits[name] = Split(feats, labels, np.arange(offset, offset + n))
        offset += n
    return Dataset(manifest, splits, generator)


# --- projection g ------------------------------------------------------

def unify_lengths(features, weights, biases=None):
    """Apply the per-modality fully-connected map ``g`` at every time step.

    ``features`` maps modality -> array or Tensor [..., T, N_m]; ``weights``
    maps modality -> Tensor [N_m, N].  Returns the list of projected blocks
    [..., T, N] in the order of ``weights``.
    """
    out = []
    for m, w in weights.items():
        x = features[m]
        x = x if isinstance(x, tc.Tensor) else tc.Tensor(np.asarray(x, dtype=w.dtype))
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"{m}: feature width {x.shape[-1]} does not match projection {w.shape}")
        y = tc.matmul(x, w)
        if biases is not None:
            y = y + biases[m]
        out.append(y)
    return out

