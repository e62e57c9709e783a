"""Finite-difference check of every parameter gradient of the full training loss.

Gradient reversal makes the analytic "gradient" differ from the derivative
of the loss value.  The oracle therefore evaluates a surrogate whose
derivative is exactly the reversed field: each reversed input ``x`` is
replaced by ``(1 + lam) * x0 - lam * x``, where ``x0`` is the value ``x`` had
at the unperturbed parameters.  The forward value is unchanged at the base
point and d/dx is ``-lam``.  Only forward evaluations enter the oracle.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .model import ModelConfig, NormTR
from .noise import sample_type1, sample_type2
from .training import TrainConfig, compute_losses


def tiny_config(**overrides):
    base = dict(T=2, N=4, input_dims=(3, 3, 3), heads=2, depth=1, num_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


class _ReplayReversal(NormTR):
    """Model whose reversal hook is replaced by the frozen-value surrogate."""

    def __init__(self, cfg, params):
        super().__init__(cfg, params=params)
        self.frozen = None
        self.calls = 0

    def reverse(self, x):
        lam = self.cfg.grl_lambda
        if self.frozen is None:
            raise RuntimeError("record the base pass first")
        x0 = self.frozen[self.calls]
        self.calls += 1
        return tc.scale(x0, 1.0 + lam) - tc.scale(x, lam)


class _Recorder(NormTR):
    def __init__(self, cfg, params):
        super().__init__(cfg, params=params)
        self.seen = []

    def reverse(self, x):
        self.seen.append(x.data.copy())
        return x


@dataclass
class GradcheckReport:
    max_rel_err: dict = field(default_factory=dict)  # group -> worst elementwise relative error
    tol: float = 1e-3
    seconds: float = 0.0
    checked: int = 0

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_err.values())

    def lines(self):
        out = []
        for g, e in self.max_rel_err.items():
            out.append(f"{'PASS' if e < self.tol else 'FAIL'} {g:<24} max_rel_err={e:.3e}")
        return out


def group_of(name):
    parts = name.split(".")
    if parts[-1] in ("weight", "bias", "gamma", "beta"):
        parts = parts[:-1]
    return ".".join(parts)


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _batch(cfg, rng):
    feats = {m: rng.standard_normal((2, cfg.T, n)) for m, n in zip(cfg.modalities, cfg.input_dims)}
    if cfg.task == "classification":
        labels = rng.integers(cfg.out_dim, size=2)
    else:
        labels = rng.uniform(-3, 3, size=2)
    masks = [sample_type1(cfg.T, rng, cfg.M), sample_type2(cfg.T, rng, cfg.M)]
    return feats, labels, masks


def gradcheck(cfg=None, seed=0, h=1e-5, tol=1e-3, tcfg=None):
    """Compare analytic gradients of the total loss with 64-bit central differences."""
    cfg = cfg or tiny_config()
    tcfg = tcfg or TrainConfig()
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    with tc.default_dtype(np.float64):
        model = NormTR(cfg, seed=seed).astype(np.float64)
        # perturb LN affine params and biases off their init so every path is exercised
        for name, p in model.named_parameters():
            if not name.endswith("weight"):
                p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        feats, labels, masks = _batch(cfg, rng)

        model.zero_grad()
        total, _, _ = compute_losses(model, feats, labels, masks, tcfg)
        total.backward()
        analytic = {k: p.grad.copy() for k, p in model.named_parameters()}

        recorder = _Recorder(cfg, model.params)
        with tc.no_grad():
            compute_losses(recorder, feats, labels, masks, tcfg)
        oracle = _ReplayReversal(cfg, model.params)
        oracle.frozen = recorder.seen

        def f():
            oracle.calls = 0
            with tc.no_grad():
                return compute_losses(oracle, feats, labels, masks, tcfg)[0].item()

        report = GradcheckReport(tol=tol)
        for name, p in model.named_parameters():
            num = np.zeros_like(p.data)
            flat, nflat = p.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + h
                fp = f()
                flat[i] = old - h
                fm = f()
                flat[i] = old
                nflat[i] = (fp - fm) / (2 * h)
            err = float(relative_error(analytic[name], num).max())
            g = group_of(name)
            report.max_rel_err[g] = max(report.max_rel_err.get(g, 0.0), err)
            report.checked += flat.size
    report.seconds = time.perf_counter() - start
    return report
