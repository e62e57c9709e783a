"""
Synthetic features and mask noise
=================================

Generates the default toy dataset, draws the two training corruptions and
the evaluation-time masking, and saves the set to disk.
"""
import tempfile

import numpy as np

from normtr.data import DatasetManifest, GeneratorConfig, generate_dataset, load_dataset, save_dataset
from normtr.noise import apply_mask, eval_mask, eval_mask_rng, sample_type1, sample_type2

ds = generate_dataset(GeneratorConfig(), DatasetManifest(), seed=0)
print({name: len(split) for name, split in ds.splits.items()})

sample = ds["train"][0]
print("label", sample.label, "| audio", sample.U_a.shape, "video", sample.U_v.shape, "text", sample.U_t.shape)

rng = np.random.default_rng(0)
t1 = sample_type1(8, rng)
t2 = sample_type2(8, rng)
print("\nType-1: a window in every modality (rows = audio, video, text; 0 = erased)")
print(t1.keep)
print("Type-2: one window in one modality -> noise label", t2.noise_label)
print(t2.keep)

noisy = apply_mask(sample, t2)
m = ("audio", "video", "text")[t2.corrupted_modality]
print(f"erased {m} rows are zero:", np.all(noisy.features[m][t2.keep[t2.corrupted_modality] == 0] == 0))

# evaluation masking erases floor(r*T) random steps per modality
for r in (0.0, 0.3, 0.5, 1.0):
    out = eval_mask(sample, r, eval_mask_rng(0, 0, r))
    print(f"r={r:.1f}: zero rows per modality",
          [int(np.all(x == 0, axis=1).sum()) for x in out.features.values()])

with tempfile.TemporaryDirectory() as tmp:
    save_dataset(ds, tmp)
    back = load_dataset(tmp)
    print("\nround trip exact:", back["test"].features["text"].tobytes() == ds["test"].features["text"].tobytes())
