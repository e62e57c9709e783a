import json
import os

import numpy as np
import pytest

from normtr import tensor as tc
from normtr.data import (
    ConfigError,
    DatasetManifest,
    FormatError,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    save_dataset,
    unify_lengths,
)

from oracles import logistic_probe

SMALL = {"train": 60, "val": 20, "test": 20}


def small(seed=0, **kw):
    return generate_dataset(GeneratorConfig(**kw.pop("gen", {})), DatasetManifest(sample_counts=dict(SMALL), **kw),
                            seed)


def assert_same(a, b):
    assert a.manifest == b.manifest
    for name in a.splits:
        sa, sb = a[name], b[name]
        assert sa.labels.dtype == sb.labels.dtype
        assert sa.labels.tobytes() == sb.labels.tobytes()
        for m in sa.features:
            assert sa.features[m].tobytes() == sb.features[m].tobytes()


def test_default_shapes_and_counts():
    ds = generate_dataset(GeneratorConfig(), DatasetManifest(), 0)
    assert {k: len(v) for k, v in ds.splits.items()} == {"train": 600, "val": 200, "test": 200}
    s = ds["train"][5]
    assert s.U_a.shape == (8, 12) and s.U_v.shape == (8, 12) and s.U_t.shape == (8, 12)
    assert s.T == 8
    assert isinstance(s.label, int) and 0 <= s.label < 4


def test_generation_is_deterministic():
    assert_same(small(3), small(3))
    a, b = small(3), small(4)
    assert a["train"].features["audio"].tobytes() != b["train"].features["audio"].tobytes()


def test_splits_use_distinct_sample_indices():
    ds = small()
    idx = np.concatenate([s.indices for s in ds.splits.values()])
    assert len(np.unique(idx)) == len(idx) == 100


def test_sample_depends_only_on_seed_and_index():
    # growing the train split must not change the samples numbered before it
    a = small(1)
    b = generate_dataset(GeneratorConfig(), DatasetManifest(sample_counts={"train": 80, "val": 0, "test": 0}), 1)
    np.testing.assert_array_equal(a["train"].features["text"], b["train"].features["text"][:60])


def test_regression_labels_in_range():
    ds = small(label_kind="regression")
    y = ds["train"].labels
    assert y.dtype == np.float32
    assert y.min() >= -3 and y.max() <= 3


@pytest.mark.parametrize("field,value", [("T", 1), ("N_a", 0), ("N_t", -2), ("label_kind", "ordinal"),
                                         ("num_classes", 1)])
def test_invalid_manifest_names_field(field, value):
    with pytest.raises(ConfigError, match=field):
        generate_dataset(GeneratorConfig(), DatasetManifest(**{field: value}), 0)


@pytest.mark.parametrize("kw", [{"signal_strength": 0}, {"nuisance_strength": -1}, {"label_noise": -0.1}])
def test_invalid_generator(kw):
    with pytest.raises(ConfigError):
        generate_dataset(GeneratorConfig(**kw), DatasetManifest(), 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clean_binary_set_is_linearly_separable(seed):
    ds = generate_dataset(GeneratorConfig(nuisance_strength=0.0, label_noise=0.0),
                          DatasetManifest(num_classes=2, seed=seed), seed)
    assert logistic_probe(ds["train"], 2) == 1.0


def test_probe_accuracy_non_increasing_in_nuisance():
    for seed in range(3):
        accs = [logistic_probe(generate_dataset(GeneratorConfig(nuisance_strength=sn, label_noise=0.0),
                                                DatasetManifest(seed=seed), seed)["train"], 4)
                for sn in (0.0, 8.0, 16.0)]
        assert accs[0] >= 0.99
        assert accs[0] >= accs[1] >= accs[2], (seed, accs)


def test_text_modality_carries_strongest_signal():
    w = GeneratorConfig().modality_weights
    assert w[2] == max(w)


@pytest.mark.parametrize("kind", ["classification", "regression"])
def test_round_trip_bitwise(tmp_path, kind):
    ds = small(2, label_kind=kind)
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert_same(ds, back)
    assert back.generator == ds.generator


def test_blob_layout_is_little_endian_sample_major(tmp_path):
    ds = small()
    save_dataset(ds, tmp_path)
    raw = np.fromfile(tmp_path / "val_video.f32", dtype="<f4").reshape(20, 8, 12)
    np.testing.assert_array_equal(raw, ds["val"].features["video"])
    labels = np.fromfile(tmp_path / "val_labels.u32", dtype="<u4")
    np.testing.assert_array_equal(labels, ds["val"].labels)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert {"sample_counts", "T", "N_a", "N_v", "N_t", "label_kind", "num_classes", "seed"} <= set(doc)


def test_truncated_blob_names_split_and_offset(tmp_path):
    save_dataset(small(), tmp_path)
    path = tmp_path / "test_audio.f32"
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match=r"'test'.*offset %d" % (len(raw) - 10)):
        load_dataset(tmp_path)


def test_manifest_dim_mismatch_is_format_error(tmp_path):
    save_dataset(small(), tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["N_v"] = 13
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="'train'"):
        load_dataset(tmp_path)


def test_missing_blob_is_format_error(tmp_path):
    save_dataset(small(), tmp_path)
    os.remove(tmp_path / "val_labels.u32")
    with pytest.raises(FormatError, match="'val'"):
        load_dataset(tmp_path)


def test_six_class_setup():
    ds = generate_dataset(GeneratorConfig(), DatasetManifest(num_classes=6, sample_counts=dict(SMALL)), 0)
    assert ds.manifest.num_classes == 6
    assert set(np.unique(ds["train"].labels)) <= set(range(6))


def test_unify_lengths_identity():
    ds = small()
    x = ds["train"].features
    W = {m: tc.tensor(np.eye(12, dtype=np.float32)) for m in ("audio", "video", "text")}
    blocks = unify_lengths(x, W)
    for blk, m in zip(blocks, W):
        np.testing.assert_array_equal(blk.data, x[m])


def test_unify_lengths_stacked_shape():
    rng = np.random.default_rng(0)
    x = {m: rng.standard_normal((8, 12)) for m in ("audio", "video", "text")}
    W = {m: tc.tensor(rng.standard_normal((12, 16))) for m in x}
    assert tc.concat(unify_lengths(x, W), axis=0).shape == (24, 16)
    with pytest.raises(ValueError):
        unify_lengths(x, {"audio": tc.tensor(np.ones((11, 16)))})
