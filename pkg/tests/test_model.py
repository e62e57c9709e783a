import math

import numpy as np
import pytest

from normtr import tensor as tc
from normtr.data import DatasetManifest, GeneratorConfig, generate_dataset
from normtr.model import (
    CheckpointError,
    ModelConfig,
    NormTR,
    load_checkpoint,
    param_shapes,
    parameter_count,
    save_checkpoint,
)
from normtr.noise import clean_mask, sample_type2

CFG = ModelConfig(T=8, N=16, input_dims=(12, 12, 12), heads=8, depth=2, num_classes=4)


def batch(cfg=CFG, B=2, seed=0):
    rng = np.random.default_rng(seed)
    return {m: rng.standard_normal((B, cfg.T, n)).astype(np.float32) for m, n in zip(cfg.modalities, cfg.input_dims)}


def zero_params(model, prefix):
    for name, p in model.named_parameters():
        if name.startswith(prefix):
            p.data = np.zeros_like(p.data)


# --- config ------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"N": 15}, {"N": 20, "heads": 3}, {"task": "ordinal"}, {"query_source": "x"},
                                {"use_nrgf": False, "use_mf": False}, {"input_dims": (12, 12)}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_round_trip():
    cfg = ModelConfig(T=4, N=8, heads=2, task="regression")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_parameter_count_is_pure_function_of_config():
    assert parameter_count(CFG) == sum(p.data.size for p in NormTR(CFG, seed=1).parameters())
    assert parameter_count(CFG) == sum(p.data.size for p in NormTR(CFG, seed=2).parameters())
    # closed form: g + nrgf + 3 mf + pos + blocks + head + explainers + d1 + d2
    N, d, T, M, C = 16, 8, 8, 3, 4
    mlp = N * N + N + N * d + d
    block = 3 * 2 * d + 4 * (d * d + d) + (d * 2 * d + 2 * d) + (2 * d * d + d)
    expl = 2 * (T * d * T * d + T * d)
    expected = 3 * (12 * N + N) + 4 * mlp + M * T * d + 2 * block + (d * C + C) + 3 * expl \
        + (T * d * M + M) + (d * (M + 1) + M + 1)
    assert parameter_count(CFG) == expected


def test_init_scheme():
    model = NormTR(CFG, seed=0)
    for name, shape, kind in param_shapes(CFG):
        x = model[name].data
        assert x.shape == shape and x.dtype == np.float32 and model[name].requires_grad
        if kind == "xavier":
            assert np.abs(x).max() <= math.sqrt(6 / sum(shape))
        elif kind == "zeros":
            assert not x.any()
        elif kind == "ones":
            assert (x == 1).all()
        else:
            assert np.abs(x).max() <= 0.02


# --- shapes ------------------------------------------------------------

def test_shape_lattice_t8_n16():
    model = NormTR(CFG)
    t = model.forward_sample(
        generate_dataset(GeneratorConfig(), DatasetManifest(sample_counts={"train": 1, "val": 0, "test": 0}), 0)["train"][0],
        clean_mask(8))
    assert t.u_prime.shape == (1, 24, 16)
    assert t.f_nr.shape == (1, 24, 8)
    assert t.f_m.shape == (1, 24, 8)
    assert t.explained.shape == (1, 3, 64)
    assert t.fused.shape == (1, 24, 8)
    assert t.logits.shape == (1, 4)
    assert t.pooled.shape == (1, 8)
    assert [a.shape for a in t.attention] == [(1, 8, 24, 24)] * 2
    assert [x.shape for x in t.d1_mf_logits + t.d1_nr_logits] == [(1, 3)] * 6
    assert t.d2_logits.shape == (1, 4)


@pytest.mark.parametrize("T,N,heads,M", [(2, 4, 2, 3), (6, 12, 3, 3), (8, 16, 4, 2), (5, 32, 8, 3)])
def test_shape_lattice_general(T, N, heads, M):
    cfg = ModelConfig(T=T, N=N, heads=heads, input_dims=(5,) * M, modalities=("audio", "video", "text")[:M],
                      num_classes=3, depth=1)
    t = NormTR(cfg).forward(batch(cfg, B=3))
    d = N // 2
    assert t.f_nr.shape == t.f_m.shape == t.fused.shape == (3, M * T, d)
    assert t.explained.shape == (3, M, T * d)
    assert t.d2_logits.shape == (3, M + 1)
    np.testing.assert_allclose(t.attention[0].sum(-1), 1.0, atol=1e-6)


def test_regression_head_shape():
    cfg = ModelConfig(task="regression", num_classes=1)
    assert NormTR(cfg).forward(batch(cfg)).logits.shape == (2, 1)


# --- component examples ------------------------------------------------

def test_nrgf_zero_weights_give_zero():
    model = NormTR(CFG)
    zero_params(model, "nrgf")
    out = model.extract_nrgf(tc.tensor(np.random.default_rng(0).standard_normal((24, 16))))
    assert not out.data.any()


def test_nrgf_row_permutation_equivariance():
    model = NormTR(CFG, seed=3)
    u = np.random.default_rng(0).standard_normal((24, 16)).astype(np.float32)
    perm = u.copy()
    perm[[3, 17]] = perm[[17, 3]]
    a = model.extract_nrgf(tc.tensor(u)).data
    b = model.extract_nrgf(tc.tensor(perm)).data
    np.testing.assert_array_equal(a[[17, 3]], b[[3, 17]])
    np.testing.assert_array_equal(np.delete(a, [3, 17], 0), np.delete(b, [3, 17], 0))


def test_mf_modality_locality():
    model = NormTR(CFG, seed=3)
    u = np.random.default_rng(0).standard_normal((24, 16)).astype(np.float32)
    v = u.copy()
    v[:8] += 1.0
    a, b = model.extract_mf(tc.tensor(u)).data, model.extract_mf(tc.tensor(v)).data
    np.testing.assert_array_equal(a[8:], b[8:])
    assert not np.array_equal(a[:8], b[:8])


def test_mf_equals_nrgf_with_shared_weights():
    model = NormTR(CFG, seed=3)
    for m in CFG.modalities:
        for suffix in ("0.weight", "0.bias", "1.weight", "1.bias"):
            model[f"mf.{m}.{suffix}"].data = model[f"nrgf.{suffix}"].data.copy()
    u = tc.tensor(np.random.default_rng(0).standard_normal((2, 24, 16)))
    np.testing.assert_array_equal(model.extract_mf(u).data, model.extract_nrgf(u).data)


def test_extractor_shape_errors():
    model = NormTR(CFG)
    with pytest.raises(ValueError):
        model.extract_nrgf(tc.tensor(np.zeros((23, 16))))
    with pytest.raises(ValueError):
        model.extract_mf(tc.tensor(np.zeros((24, 15))))
    with pytest.raises(ValueError):
        model.forward({m: np.zeros((1, 7, 12)) for m in CFG.modalities})


def test_attention_concentrates_on_matching_key():
    """Single-block, single-head oracle: scores computed directly with numpy softmax."""
    cfg = ModelConfig(T=2, N=8, heads=1, depth=1, input_dims=(3, 3, 3))
    model = NormTR(cfg)
    d = cfg.d
    eye = np.eye(d, dtype=np.float32)
    for p in ("q", "k", "v", "o"):
        model[f"block0.attn.{p}.weight"].data = eye.copy()
    q = np.zeros((6, d), np.float32)
    q[:, 0] = 1.0
    kv = np.zeros((6, d), np.float32)
    kv[:, 1:] = np.random.default_rng(0).standard_normal((6, d - 1)) * 4.0
    kv[4] = 0.0
    kv[4, 0] = 20.0
    out, A = model._attention(tc.tensor(q), tc.tensor(kv), "block0.attn")
    scores = q @ kv.T / math.sqrt(d)
    ref = np.exp(scores - scores.max(1, keepdims=True))
    ref /= ref.sum(1, keepdims=True)
    np.testing.assert_allclose(A[0], ref, rtol=1e-5)
    assert (A[0][:, 4] > 0.9).all()


def test_attention_rows_sum_to_one():
    for seed in range(5):
        t = NormTR(CFG, seed=seed).forward(batch(seed=seed), with_aux=False)
        for A in t.attention:
            np.testing.assert_allclose(A.sum(-1), 1.0, atol=1e-6)


def test_predict_pooling_and_zero_head():
    model = NormTR(CFG)
    v = np.arange(8, dtype=np.float32)
    fused = tc.tensor(np.tile(v, (24, 1)))
    logits, pooled = model.predict(fused)
    np.testing.assert_allclose(pooled.data, v)
    model["head.weight"].data[:] = 0
    model["head.bias"].data[:] = [1, -2, 3, 0.5]
    logits, _ = model.predict(fused)
    np.testing.assert_array_equal(logits.data, [1, -2, 3, 0.5])


def test_zero_explainers_give_zero():
    model = NormTR(CFG)
    zero_params(model, "explain")
    out = model.explain_nrgf(tc.tensor(np.ones((24, 8))))
    assert out.shape == (3, 64) and not out.data.any()


def test_discriminators_uniform_with_zero_weights():
    model = NormTR(CFG)
    zero_params(model, "d1")
    zero_params(model, "d2")
    x = tc.tensor(np.random.default_rng(0).standard_normal((5, 64)))
    ce = tc.cross_entropy(model.discriminate_modality(x), [0, 1, 2, 1, 0]).item()
    assert ce == pytest.approx(math.log(3), abs=1e-6)
    pooled = tc.tensor(np.random.default_rng(1).standard_normal((5, 8)))
    ce = tc.cross_entropy(model.discriminate_noise(pooled), [0, 1, 2, 3, 0]).item()
    assert ce == pytest.approx(math.log(4), abs=1e-6)
    with pytest.raises(ValueError):
        model.discriminate_modality(tc.tensor(np.zeros((1, 63))))
    with pytest.raises(ValueError):
        model.discriminate_noise(tc.tensor(np.zeros((1, 7))))


def test_binary_d2_mode():
    cfg = ModelConfig(d2_mode="binary")
    assert NormTR(cfg).forward(batch(cfg)).d2_logits.shape == (2, 2)


def _nr_grads(model, f_nr_data, which):
    """Gradient w.r.t. an NRGF-side tensor of the D1 (explained) or D2 loss."""
    model.zero_grad()
    f_nr = tc.parameter(f_nr_data)
    if which == "d1":
        ex = model.explain_nrgf(f_nr, reverse=model.flag)
        loss = tc.cross_entropy(model.discriminate_modality(ex[:, 1, :]), [1, 1])
    else:
        loss = tc.cross_entropy(model.discriminate_noise(tc.mean(f_nr, axis=-2), reverse=model.flag), [0, 2])
    loss.backward()
    return f_nr.grad.copy(), {k: p.grad.copy() for k, p in model.named_parameters()}


@pytest.mark.parametrize("which", ["d1", "d2"])
def test_grl_path_negates_extractor_gradient(which, f64):
    model = NormTR(CFG, seed=4).astype(np.float64)
    x = np.random.default_rng(0).standard_normal((2, 24, 8))
    model.flag = True
    g_rev, p_rev = _nr_grads(model, x, which)
    model.flag = False
    g_plain, p_plain = _nr_grads(model, x, which)
    np.testing.assert_array_equal(g_rev, -g_plain)
    # discriminator-side parameters still descend their own loss
    for k in p_rev:
        np.testing.assert_array_equal(p_rev[k], p_plain[k])


def test_forward_is_pure():
    model = NormTR(CFG, seed=1)
    x = batch()
    keep = np.stack([sample_type2(8, np.random.default_rng(i)).keep for i in range(2)])
    a, b = model.forward(x, keep), model.forward(x, keep)
    for f in ("u_prime", "f_nr", "f_m", "fused", "logits", "explained", "d2_logits"):
        assert getattr(a, f).data.tobytes() == getattr(b, f).data.tobytes()


def test_forward_applies_mask_before_projection():
    model = NormTR(CFG, seed=1)
    x = batch(B=1)
    keep = np.ones((1, 3, 8), np.uint8)
    keep[0, 2, 1:3] = 0
    t = model.forward(x, keep)
    bias = model["g.text.bias"].data
    np.testing.assert_array_equal(t.u_prime.data[0, 17:19], np.tile(bias, (2, 1)))


def test_ablation_variants_run():
    for kw in ({"use_nrgf": False}, {"use_mf": False}, {"use_transformer": False}, {"query_source": "mf"}):
        cfg = ModelConfig(**kw)
        t = NormTR(cfg).forward(batch(cfg))
        assert t.logits.shape == (2, 4)
        if not cfg.use_transformer:
            assert t.attention == [] and "pos" not in NormTR(cfg).params


def test_two_modality_config():
    cfg = ModelConfig(modalities=("audio", "video"), input_dims=(12, 12), num_classes=6)
    t = NormTR(cfg).forward(batch(cfg))
    assert t.f_nr.shape == (2, 16, 8) and t.attention[0].shape[-1] == 16 and t.d2_logits.shape == (2, 3)


def test_infer_batches_consistently():
    model = NormTR(CFG, seed=2)
    x = batch(B=7)
    np.testing.assert_array_equal(model.infer(x, batch_size=3), model.infer(x, batch_size=100))


# --- checkpoints -------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = NormTR(CFG, seed=5)
    path = tmp_path / "m.nrm"
    save_checkpoint(path, model, extra={"note": 1})
    back, extra = load_checkpoint(path, expected_config=CFG)
    assert extra == {"note": 1} and back.cfg == CFG
    for k, p in model.named_parameters():
        assert back[k].data.tobytes() == p.data.tobytes()


def test_checkpoint_rejects_mismatch_and_corruption(tmp_path):
    path = tmp_path / "m.nrm"
    save_checkpoint(path, NormTR(CFG))
    with pytest.raises(CheckpointError, match="depth"):
        load_checkpoint(path, expected_config=ModelConfig(depth=4))
    raw = path.read_bytes()
    (tmp_path / "t.nrm").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.nrm")
    (tmp_path / "b.nrm").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "b.nrm")


def test_load_state_dict_checks():
    model = NormTR(CFG)
    state = model.state_dict()
    state.pop("head.bias")
    with pytest.raises(KeyError):
        model.load_state_dict(state)
