"""The noise-resistant multimodal transformer.

Shapes below are per sample; every tensor additionally carries a leading
batch axis ``B``.  With ``M`` modalities, width ``N`` and ``d = N // 2``::

    U'    [M*T, N]    g applied per modality, blocks stacked
    F_NR  [M*T, d]    one shared 2-layer MLP on every row
    F_M   [M*T, d]    a private 2-layer MLP per modality block
    fused [M*T, d]    cross-attention blocks, query F_NR, key/value F_M
    y_E   [C] or [1]  mean over rows, then a linear head
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as tc
from .data import MODALITIES, unify_lengths
from .noise import apply_masks


@dataclass
class ModelConfig:
    T: int = 8
    N: int = 16
    input_dims: tuple = (12, 12, 12)
    modalities: tuple = MODALITIES
    heads: int = 8
    depth: int = 2
    num_classes: int = 4
    task: str = "classification"
    leaky_slope: float = 0.01
    grl_lambda: float = 1.0
    ffn_mult: int = 2
    d2_mode: str = "multiclass"  # or "binary": noisy vs clean only
    query_source: str = "nrgf"  # "mf" swaps query and key/value
    use_nrgf: bool = True
    use_mf: bool = True
    use_transformer: bool = True

    def __post_init__(self):
        self.input_dims = tuple(int(n) for n in self.input_dims)
        self.modalities = tuple(self.modalities)
        self.validate()

    @property
    def M(self):
        return len(self.modalities)

    @property
    def d(self):
        return self.N // 2

    @property
    def out_dim(self):
        return self.num_classes if self.task == "classification" else 1

    @property
    def noise_classes(self):
        return self.M + 1 if self.d2_mode == "multiclass" else 2

    def validate(self):
        if self.N % 2:
            raise ValueError(f"N must be even, got {self.N}")
        if self.d % self.heads:
            raise ValueError(f"N/2={self.d} is not divisible by heads={self.heads}")
        if len(self.input_dims) != len(self.modalities):
            raise ValueError("input_dims needs one entry per modality")
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.query_source not in ("nrgf", "mf"):
            raise ValueError(f"query_source must be 'nrgf' or 'mf', got {self.query_source!r}")
        if self.d2_mode not in ("multiclass", "binary"):
            raise ValueError(f"d2_mode must be 'multiclass' or 'binary', got {self.d2_mode!r}")
        if not (self.use_nrgf or self.use_mf):
            raise ValueError("at least one of the NRGF and MF extractors is required")
        if self.depth < 1 or self.T < 1:
            raise ValueError("depth and T must be positive")

    @property
    def adversarial(self):
        """Whether the NRGF stream exists to be trained adversarially."""
        return self.use_nrgf

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ForwardTrace:
    u_prime: tc.Tensor
    f_nr: tc.Tensor | None
    f_m: tc.Tensor | None
    attention: list = field(default_factory=list)  # per block, [B, heads, L, L] arrays
    fused: tc.Tensor | None = None
    pooled: tc.Tensor | None = None
    logits: tc.Tensor | None = None
    explained: tc.Tensor | None = None  # [B, M, T*d]
    d1_mf_logits: list = field(default_factory=list)  # per modality, [B, M]
    d1_nr_logits: list = field(default_factory=list)
    d2_logits: tc.Tensor | None = None


def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def param_shapes(cfg):
    """Ordered (name, shape, init) triples; init is 'xavier', 'zeros', 'ones' or 'pos'."""
    N, d, T, M = cfg.N, cfg.d, cfg.T, cfg.M
    specs = []

    def linear(prefix, n_in, n_out):
        specs.append((f"{prefix}.weight", (n_in, n_out), "xavier"))
        specs.append((f"{prefix}.bias", (n_out,), "zeros"))

    def mlp(prefix):
        linear(f"{prefix}.0", N, N)
        linear(f"{prefix}.1", N, d)

    def norm(prefix):
        specs.append((f"{prefix}.gamma", (d,), "ones"))
        specs.append((f"{prefix}.beta", (d,), "zeros"))

    for m, n_m in zip(cfg.modalities, cfg.input_dims):
        linear(f"g.{m}", n_m, N)
    if cfg.use_nrgf:
        mlp("nrgf")
    if cfg.use_mf:
        for m in cfg.modalities:
            mlp(f"mf.{m}")
    if cfg.use_transformer:
        specs.append(("pos", (M * T, d), "pos"))
        for i in range(cfg.depth):
            b = f"block{i}"
            norm(f"{b}.ln_q")
            norm(f"{b}.ln_kv")
            for proj in ("q", "k", "v", "o"):
                linear(f"{b}.attn.{proj}", d, d)
            norm(f"{b}.ln_ff")
            linear(f"{b}.ff.0", d, cfg.ffn_mult * d)
            linear(f"{b}.ff.1", cfg.ffn_mult * d, d)
    linear("head", d, cfg.out_dim)
    if cfg.use_nrgf:
        for m in cfg.modalities:
            linear(f"explain.{m}.0", T * d, T * d)
            linear(f"explain.{m}.1", T * d, T * d)
        linear("d1", T * d, M)
        linear("d2", d, cfg.noise_classes)
    return specs


def parameter_count(cfg):
    return int(sum(np.prod(shape) for _, shape, _ in param_shapes(cfg)))


def init_params(cfg, seed=0):
    rng = np.random.default_rng(seed)
    dtype = tc.get_default_dtype()
    params = {}
    for name, shape, kind in param_shapes(cfg):
        if kind == "xavier":
            arr = _xavier(rng, *shape)
        elif kind == "pos":
            arr = rng.uniform(-0.02, 0.02, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = tc.parameter(arr.astype(dtype), name=name)
    return params


class NormTR:
    """Parameters plus the forward computation."""

    def __init__(self, cfg, seed=0, params=None):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params

    # --- parameter plumbing ----------------------------------------
    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        tc.zero_grads(self.parameters())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(self.params))}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype):
        params = {k: tc.Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return type(self)(self.cfg, params=params)

    def __getitem__(self, name):
        return self.params[name]

    # --- building blocks -------------------------------------------
    def _linear(self, x, prefix):
        w, b = self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"]
        if x.ndim == 1:  # unbatched vector
            return tc.reshape(tc.matmul(tc.reshape(x, (1, -1)), w), (w.shape[1],)) + b
        return tc.matmul(x, w) + b

    def _mlp(self, x, prefix):
        s = self.cfg.leaky_slope
        h = tc.leaky_relu(self._linear(x, f"{prefix}.0"), s)
        return tc.leaky_relu(self._linear(h, f"{prefix}.1"), s)

    def reverse(self, x):
        """Gradient reversal hook in front of every discriminator fed by the NRGF stream."""
        return tc.grad_reverse(x, self.cfg.grl_lambda)

    def project(self, features):
        """Apply ``g`` to each modality; returns the stacked U' [B, M*T, N] and its blocks."""
        weights = {m: self.params[f"g.{m}.weight"] for m in self.cfg.modalities}
        biases = {m: self.params[f"g.{m}.bias"] for m in self.cfg.modalities}
        blocks = unify_lengths(features, weights, biases)
        return tc.concat(blocks, axis=-2), blocks

    def extract_nrgf(self, u_prime):
        self._check_rows(u_prime, self.cfg.N)
        return self._mlp(u_prime, "nrgf")

    def extract_mf(self, u_prime):
        self._check_rows(u_prime, self.cfg.N)
        T = self.cfg.T
        blocks = [self._mlp(u_prime[..., i * T:(i + 1) * T, :], f"mf.{m}")
                  for i, m in enumerate(self.cfg.modalities)]
        return tc.concat(blocks, axis=-2)

    def _check_rows(self, x, width):
        rows = self.cfg.M * self.cfg.T
        if x.shape[-2:] != (rows, width):
            raise ValueError(f"expected [..., {rows}, {width}], got {x.shape}")

    def _attention(self, q, kv, prefix):
        h = self.cfg.heads
        d = self.cfg.d
        dh = d // h
        Q = self._linear(q, f"{prefix}.q")
        K = self._linear(kv, f"{prefix}.k")
        V = self._linear(kv, f"{prefix}.v")
        lead = Q.shape[:-2]
        L = Q.shape[-2]

        def split(x):
            return tc.swapaxes(tc.reshape(x, lead + (L, h, dh)), -2, -3)

        Q, K, V = split(Q), split(K), split(V)
        scores = tc.scale(tc.matmul(Q, tc.swapaxes(K, -1, -2)), 1.0 / np.sqrt(dh))
        A = tc.softmax_rows(scores)
        ctx = tc.reshape(tc.swapaxes(tc.matmul(A, V), -2, -3), lead + (L, d))
        return self._linear(ctx, f"{prefix}.o"), A.data

    def fuse(self, f_nr, f_m):
        """Cross-attention stack.  Returns (fused, per-block attention weights)."""
        cfg = self.cfg
        query, kv = (f_nr, f_m) if cfg.query_source == "nrgf" else (f_m, f_nr)
        if query is None:
            query = kv
        if kv is None:
            kv = query
        self._check_rows(query, cfg.d)
        self._check_rows(kv, cfg.d)
        if not cfg.use_transformer:
            fused = query if query is kv else query + kv
            return fused, []
        pos = self.params["pos"]
        x = query + pos
        kv = kv + pos
        attn = []
        for i in range(cfg.depth):
            b = f"block{i}"
            qn = tc.layer_norm(x, self.params[f"{b}.ln_q.gamma"], self.params[f"{b}.ln_q.beta"])
            kvn = tc.layer_norm(kv, self.params[f"{b}.ln_kv.gamma"], self.params[f"{b}.ln_kv.beta"])
            out, A = self._attention(qn, kvn, f"{b}.attn")
            attn.append(A)
            x = x + out
            hn = tc.layer_norm(x, self.params[f"{b}.ln_ff.gamma"], self.params[f"{b}.ln_ff.beta"])
            hidden = tc.leaky_relu(self._linear(hn, f"{b}.ff.0"), cfg.leaky_slope)
            x = x + self._linear(hidden, f"{b}.ff.1")
        return x, attn

    def predict(self, fused):
        pooled = tc.mean(fused, axis=-2)
        return self._linear(pooled, "head"), pooled

    def explain_nrgf(self, f_nr, reverse=False):
        """Map each modality block of F_NR (flattened to T*d) through its explainer MLP.

        The explainers belong to the discriminator side; with ``reverse`` the
        gradient reaching F_NR through them is reversed.
        """
        cfg = self.cfg
        if reverse:
            f_nr = self.reverse(f_nr)
        T, d = cfg.T, cfg.d
        self._check_rows(f_nr, d)
        lead = f_nr.shape[:-2]
        outs = []
        for i, m in enumerate(cfg.modalities):
            block = tc.reshape(f_nr[..., i * T:(i + 1) * T, :], lead + (T * d,))
            h = tc.leaky_relu(self._linear(block, f"explain.{m}.0"), cfg.leaky_slope)
            outs.append(tc.reshape(self._linear(h, f"explain.{m}.1"), lead + (1, T * d)))
        return tc.concat(outs, axis=-2)

    def discriminate_modality(self, feature, reverse=False):
        """D1: which modality a flattened [T*d] feature came from."""
        if feature.shape[-1] != self.cfg.T * self.cfg.d:
            raise ValueError(f"D1 expects features of length {self.cfg.T * self.cfg.d}, got {feature.shape}")
        if reverse:
            feature = self.reverse(feature)
        return self._linear(feature, "d1")

    def discriminate_noise(self, pooled_nr, reverse=True):
        """D2: which modality (if any) is corrupted, from mean-pooled F_NR."""
        if pooled_nr.shape[-1] != self.cfg.d:
            raise ValueError(f"D2 expects pooled features of length {self.cfg.d}, got {pooled_nr.shape}")
        if reverse:
            pooled_nr = self.reverse(pooled_nr)
        return self._linear(pooled_nr, "d2")

    # --- full pass -------------------------------------------------
    def forward(self, features, keep=None, with_aux=True):
        """Run the pipeline on a batch.

        ``features`` maps modality -> [B, T, N_m] arrays; ``keep`` is an
        optional [B, M, T] mask applied before the projection.
        """
        cfg = self.cfg
        feats = {m: features[m] for m in cfg.modalities}
        if keep is not None:
            feats = apply_masks(feats, keep)
        for m, n_m in zip(cfg.modalities, cfg.input_dims):
            if feats[m].shape[-2:] != (cfg.T, n_m):
                raise ValueError(f"{m}: expected [..., {cfg.T}, {n_m}], got {feats[m].shape}")
        u_prime, _ = self.project(feats)
        f_nr = self.extract_nrgf(u_prime) if cfg.use_nrgf else None
        f_m = self.extract_mf(u_prime) if cfg.use_mf else None
        fused, attn = self.fuse(f_nr, f_m)
        logits, pooled = self.predict(fused)
        trace = ForwardTrace(u_prime, f_nr, f_m, attn, fused, pooled, logits)
        if with_aux and cfg.use_nrgf:
            T, d = cfg.T, cfg.d
            lead = f_nr.shape[:-2]
            trace.explained = self.explain_nrgf(f_nr, reverse=True)
            trace.d1_nr_logits = [self.discriminate_modality(trace.explained[..., i, :])
                                  for i in range(cfg.M)]
            if cfg.use_mf:
                trace.d1_mf_logits = [
                    self.discriminate_modality(tc.reshape(f_m[..., i * T:(i + 1) * T, :], lead + (T * d,)))
                    for i in range(cfg.M)]
            trace.d2_logits = self.discriminate_noise(tc.mean(f_nr, axis=-2))
        return trace

    def forward_sample(self, sample, mask=None, with_aux=True):
        """Single-sample convenience wrapper (batch of one)."""
        feats = {m: np.asarray(sample.features[m])[None] for m in self.cfg.modalities}
        keep = None if mask is None else mask.keep[None]
        return self.forward(feats, keep, with_aux)

    def infer(self, features, keep=None, batch_size=256):
        """Predictions without recording a tape: class ids or scores."""
        n = len(next(iter(features.values())))
        outs = []
        with tc.no_grad():
            for lo in range(0, n, batch_size):
                sl = slice(lo, lo + batch_size)
                trace = self.forward({m: x[sl] for m, x in features.items()},
                                     None if keep is None else keep[sl], with_aux=False)
                outs.append(trace.logits.data)
        logits = np.concatenate(outs) if outs else np.zeros((0, self.cfg.out_dim), np.float32)
        if self.cfg.task == "classification":
            return logits.argmax(axis=-1)
        return logits[:, 0]


# --- checkpoints -------------------------------------------------------
# Layout: b"NORMTR\x00\x01" | uint32 LE header length | JSON header | blobs.
# The header holds {"config": ModelConfig, "params": [{name, shape, offset, nbytes}], "extra": {...}};
# offsets are relative to the first byte after the header; blobs are little-endian float32.

MAGIC = b"NORMTR\x00\x01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model, extra=None):
    entries, blobs, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.cfg.to_dict(), "params": entries, "extra": extra or {}},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path, expected_config=None):
    """Returns (model, extra).  Raises CheckpointError on malformed files or config mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    cfg = ModelConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
        diff = {k for k, v in expected_config.to_dict().items() if cfg.to_dict().get(k) != v}
        raise CheckpointError(f"{path}: config mismatch in {sorted(diff)}")
    body = raw[12 + hlen:]
    state = {}
    for e in header["params"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob for {e['name']}")
        state[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    model = NormTR(cfg, params={k: tc.parameter(v, name=k) for k, v in state.items()})
    expected_names = [n for n, _, _ in param_shapes(cfg)]
    if list(state) != expected_names:
        raise CheckpointError(f"{path}: parameter set does not match its config")
    return model, header.get("extra", {})
