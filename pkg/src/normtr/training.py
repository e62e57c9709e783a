"""Losses, optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from .noise import NONE, TYPE1, TYPE2, sample_training_mask

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    warmup_steps: int | None = None  # None -> 5% of all steps
    horizon: int | None = None  # None -> all steps
    seed: int = 0
    noise_mix: tuple = (1 / 3, 1 / 3, 1 / 3)  # clean, Type-1, Type-2
    adv1_on: bool = True
    adv2_on: bool = True
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    max_grad_norm: float | None = None

    def __post_init__(self):
        self.noise_mix = tuple(float(p) for p in self.noise_mix)
        self.betas = tuple(self.betas)
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if len(self.noise_mix) != 3 or min(self.noise_mix) < 0 or abs(sum(self.noise_mix) - 1.0) > 1e-9:
            raise ValueError(f"noise_mix must be 3 probabilities summing to 1, got {self.noise_mix}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def to_dict(self):
        d = asdict(self)
        d["noise_mix"] = list(self.noise_mix)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LossBreakdown:
    l_adv1: float
    l_adv2: float
    l_er: float
    total: float

    def as_dict(self):
        return asdict(self)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, breakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step


# --- losses ------------------------------------------------------------

def loss_adv1(trace, model):
    """Modality discrimination on the MF blocks (plain) and the explained NRGF blocks (reversed)."""
    if not trace.d1_nr_logits:
        raise ValueError("trace carries no discriminator outputs")
    M = model.cfg.M
    logits = list(trace.d1_mf_logits) + list(trace.d1_nr_logits)
    B = logits[0].shape[0]
    labels = np.concatenate([np.full(B, i % M) for i in range(len(logits))])
    return tc.cross_entropy(tc.concat(logits, axis=0), labels)


def noise_targets(masks, cfg):
    labels = np.array([m.noise_label for m in masks], dtype=np.intp)
    if cfg.d2_mode == "binary":
        labels = (labels > 0).astype(np.intp)
    return labels


def loss_adv2(trace, masks, model, rows=None):
    """Noise-location discrimination on pooled F_NR (reversed path into the extractor).

    ``masks`` holds one MaskSpec per row in ``rows`` (default: all rows);
    Type-1 masks are rejected.
    """
    if trace.d2_logits is None:
        raise ValueError("trace carries no discriminator outputs")
    if any(m.noise_type not in (NONE, TYPE2) for m in masks):
        raise ValueError("loss_adv2 accepts only clean or Type-2 masks")
    logits = trace.d2_logits if rows is None else tc.take(trace.d2_logits, rows, axis=0)
    return tc.cross_entropy(logits, noise_targets(masks, model.cfg))


def loss_er(trace, labels, task):
    logits = trace.logits
    labels = np.asarray(labels)
    if task == "classification":
        if labels.dtype.kind == "f":
            raise TypeError("classification head needs integer class labels")
        return tc.cross_entropy(logits, labels)
    if task == "regression":
        if logits.shape[-1] != 1:
            raise TypeError("regression needs a single-output head")
        return tc.mse(logits, labels.astype(np.float64))
    raise ValueError(f"unknown task {task!r}")


# --- optimizers --------------------------------------------------------

class SGD:
    def __init__(self, params, momentum=0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= p.data.dtype.type(lr) * v

    def state(self):
        return {"velocity": [v.copy() for v in self.velocity]}


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)


def make_optimizer(params, cfg):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.momentum)
    return Adam(params, cfg.betas)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))
    if total > max_norm:
        f = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= p.grad.dtype.type(f)
    return total


def lr_schedule(step, cfg, total_steps=None):
    """Linear warmup from 0 to ``cfg.lr``, then cosine annealing to 0 at the horizon."""
    if step < 0:
        raise ValueError("step must be >= 0")
    horizon = cfg.horizon if cfg.horizon is not None else total_steps
    if horizon is None:
        raise ValueError("lr_schedule needs a horizon")
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(0.05 * horizon))
    if warmup > 0 and step < warmup:
        return cfg.lr * step / warmup
    if step >= horizon:
        return 0.0
    progress = (step - warmup) / max(horizon - warmup, 1)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- steps and loops ---------------------------------------------------

def draw_masks(n, T, rng, mix, num_modalities):
    return [sample_training_mask(T, rng, mix, num_modalities) for _ in range(n)]


def compute_losses(model, features, labels, masks, tcfg):
    """Forward pass on the corrupted batch; returns (total tensor, LossBreakdown, trace)."""
    keep = np.stack([m.keep for m in masks])
    adv = model.cfg.adversarial and (tcfg.adv1_on or tcfg.adv2_on)
    trace = model.forward(features, keep, with_aux=adv)
    l_er = loss_er(trace, labels, model.cfg.task)
    total = l_er
    l1 = l2 = 0.0
    if adv and tcfg.adv1_on and trace.d1_mf_logits:
        a1 = loss_adv1(trace, model)
        total = total + a1
        l1 = a1.item()
    if adv and tcfg.adv2_on:
        rows = [i for i, m in enumerate(masks) if m.noise_type != TYPE1]
        if rows:
            a2 = loss_adv2(trace, [masks[i] for i in rows], model, rows)
            total = total + a2
            l2 = a2.item()
    parts = LossBreakdown(l1, l2, l_er.item(), total.item())
    return total, parts, trace


def train_step(model, optimizer, features, labels, masks, tcfg, lr, step=0):
    model.zero_grad()
    try:
        total, parts, _ = compute_losses(model, features, labels, masks, tcfg)
        if not np.isfinite(parts.total):
            raise NonFiniteLoss(step, parts)
        total.backward()
    except tc.NonFiniteError as e:
        raise NonFiniteLoss(step, str(e)) from e
    if tcfg.max_grad_norm is not None:
        clip_grad_norm(model.parameters(), tcfg.max_grad_norm)
    optimizer.step(lr)
    return parts


def evaluate_split(model, split, keep=None):
    """Headline metric on a split: accuracy (classification) or negative MAE (regression)."""
    preds = model.infer(split.features, keep)
    if model.cfg.task == "classification":
        return float(np.mean(preds == split.labels))
    return -float(np.mean(np.abs(preds - split.labels)))


@dataclass
class FitResult:
    model: object
    history: list = field(default_factory=list)  # per-epoch dicts
    best_epoch: int = -1
    best_val: float = -np.inf


def fit(model, dataset, tcfg, step_log=None, epoch_log=None, quiet=True):
    """Train ``model`` in place on ``dataset["train"]``; keeps the best-validation weights.

    ``step_log``/``epoch_log`` are optional open text files receiving the
    JSON-lines step records and the per-epoch CSV.
    """
    train, val = dataset["train"], dataset["val"]
    cfg = model.cfg
    n = len(train)
    steps_per_epoch = math.ceil(n / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.epochs
    opt = make_optimizer(model.parameters(), tcfg)
    rng = np.random.default_rng([tcfg.seed, 1])
    noise_mix = tcfg.noise_mix
    result = FitResult(model)
    best_state = model.state_dict()
    writer = None
    if epoch_log is not None:
        writer = csv.writer(epoch_log, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "train_metric", "val_metric"])
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            feats = {m: train.features[m][idx] for m in cfg.modalities}
            masks = draw_masks(len(idx), cfg.T, rng, noise_mix, cfg.M)
            lr = lr_schedule(step, tcfg, total_steps)
            parts = train_step(model, opt, feats, train.labels[idx], masks, tcfg, lr, step)
            losses.append(parts.total)
            if step_log is not None:
                rec = {"step": step, "lr": lr, **parts.as_dict()}
                step_log.write(json.dumps(rec) + "\n")
            step += 1
        train_metric = evaluate_split(model, train)
        val_metric = evaluate_split(model, val) if len(val) else train_metric
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "train_metric": train_metric, "val_metric": val_metric}
        result.history.append(row)
        if writer is not None:
            writer.writerow([epoch, repr(row["train_loss"]), repr(train_metric), repr(val_metric)])
        if not quiet:
            log.info("epoch %d loss %.4f train %.4f val %.4f", epoch, row["train_loss"], train_metric, val_metric)
        if val_metric > result.best_val:
            result.best_val, result.best_epoch = val_metric, epoch
            best_state = model.state_dict()
    model.load_state_dict(best_state)
    return result


def scheme_off(tcfg):
    """Training config without the noise-aware scheme: no injected noise, no adversarial losses."""
    out = copy.deepcopy(tcfg)
    out.noise_mix = (1.0, 0.0, 0.0)
    out.adv1_on = out.adv2_on = False
    return out
