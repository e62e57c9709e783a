"""Mask noise: Type-1/Type-2 training corruption and evaluation-time masking.

A mask row holds 1 for kept time steps and 0 for erased ones.  Erased rows
of the pre-computed features are set to exactly 0.0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import MultimodalSample

NONE, TYPE1, TYPE2 = "none", "type1", "type2"
EVAL = "eval"  # robustness-sweep masking, not a training noise type
NOISE_TYPES = (NONE, TYPE1, TYPE2)


@dataclass
class MaskSpec:
    keep: np.ndarray  # [M, T] uint8
    noise_type: str = NONE
    corrupted_modality: int | None = None
    windows: tuple = ()  # (start, length) per modality

    @property
    def T(self):
        return self.keep.shape[1]

    @property
    def noise_label(self):
        """Target class for the noise discriminator: 0 = no noise, 1 + m = modality m corrupted."""
        if self.noise_type not in (NONE, TYPE2):
            raise ValueError(f"{self.noise_type} masks carry no noise-location label")
        return 0 if self.noise_type == NONE else 1 + self.corrupted_modality

    def masked_steps(self, m):
        return np.flatnonzero(self.keep[m] == 0)

    def to_json(self):
        return json.dumps({
            "keep": self.keep.tolist(),
            "noise_type": self.noise_type,
            "corrupted_modality": self.corrupted_modality,
            "windows": [list(w) for w in self.windows],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(np.asarray(d["keep"], dtype=np.uint8), d["noise_type"],
                   d["corrupted_modality"], tuple(tuple(w) for w in d["windows"]))


def clean_mask(T, num_modalities=3):
    return MaskSpec(np.ones((num_modalities, T), np.uint8), NONE, None, ((0, 0),) * num_modalities)


def _window(T, rng, min_len=0):
    length = int(rng.integers(min_len, T // 2 + 1))
    start = int(rng.integers(0, T - length + 1))
    return start, length


def sample_type1(T, rng, num_modalities=3):
    """Independent window per modality, length uniform on {0..T//2}, start uniform over valid positions."""
    if T < 2:
        raise ValueError("T must be >= 2")
    keep = np.ones((num_modalities, T), np.uint8)
    windows = []
    for m in range(num_modalities):
        s, n = _window(T, rng)
        keep[m, s:s + n] = 0
        windows.append((s, n))
    return MaskSpec(keep, TYPE1, None, tuple(windows))


def sample_type2(T, rng, num_modalities=3):
    """One uniformly chosen modality gets a single window of length in {1..T//2}."""
    if T < 2:
        raise ValueError("T must be >= 2")
    m = int(rng.integers(num_modalities))
    s, n = _window(T, rng, min_len=1)
    keep = np.ones((num_modalities, T), np.uint8)
    keep[m, s:s + n] = 0
    windows = [(0, 0)] * num_modalities
    windows[m] = (s, n)
    return MaskSpec(keep, TYPE2, m, tuple(windows))


def sample_training_mask(T, rng, mix=(1 / 3, 1 / 3, 1 / 3), num_modalities=3):
    """Draw clean / Type-1 / Type-2 with probabilities ``mix``."""
    kind = rng.choice(3, p=np.asarray(mix, dtype=float))
    if kind == 0:
        return clean_mask(T, num_modalities)
    if kind == 1:
        return sample_type1(T, rng, num_modalities)
    return sample_type2(T, rng, num_modalities)


def _zero_rows(x, keep_row):
    return np.where(keep_row[:, None].astype(bool), x, np.zeros((), x.dtype))


def apply_mask(sample, mask):
    """Zero the erased rows of every modality; everything else is returned unchanged."""
    feats = {}
    for m, (name, x) in enumerate(sample.features.items()):
        if x.shape[0] != mask.T:
            raise ValueError(f"mask length {mask.T} does not match {name} length {x.shape[0]}")
        feats[name] = _zero_rows(x, mask.keep[m])
    return MultimodalSample(feats, sample.label)


def apply_masks(features, keep):
    """Batched form: ``features[m]`` is [B, T, N_m], ``keep`` is [B, M, T]."""
    out = {}
    for m, (name, x) in enumerate(features.items()):
        out[name] = np.where(keep[:, m, :, None].astype(bool), x, np.zeros((), x.dtype))
    return out


def eval_mask_rng(seed, sample_index, ratio):
    return np.random.default_rng([int(seed), int(sample_index), int(round(ratio * 1000))])


def eval_keep(T, ratio, rng, num_modalities=3, shared_positions=False):
    """Keep matrix with floor(ratio*T) distinct steps erased per modality."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    k = int(np.floor(ratio * T + 1e-9))
    keep = np.ones((num_modalities, T), np.uint8)
    if shared_positions:
        keep[:, rng.choice(T, size=k, replace=False)] = 0
    else:
        for m in range(num_modalities):
            keep[m, rng.choice(T, size=k, replace=False)] = 0
    return keep


def eval_mask(sample, ratio, rng, shared_positions=False):
    """Robustness-sweep corruption of one sample."""
    keep = eval_keep(sample.T, ratio, rng, len(sample.features), shared_positions)
    return apply_mask(sample, MaskSpec(keep, EVAL))
