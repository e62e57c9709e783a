"""
What the adversarial losses do to the features
==============================================

After training, the noise-resistant features of the three modalities should
look alike, while the per-modality features stay distinct.  The final
attention block should also look away from erased frames.
"""
import numpy as np

from normtr import metrics as mt
from normtr import tensor as tc
from normtr.experiments import ExperimentConfig, build_dataset, run

exp = ExperimentConfig(seed=2)
ds = build_dataset(exp)
model, _ = run(exp, ds)
test = ds["test"]

nn, nm = mt.similarity_export(model, test)
for d in (nn, nm):
    q = np.percentile(d.similarities, [10, 50, 90])
    print(f"{d.kind:<10} cosine similarity  p10 {q[0]:+.3f}  median {q[1]:+.3f}  p90 {q[2]:+.3f}")

masked, unmasked = mt.masked_attention_contrast(model, test, ratio=0.5, seed=0)
print(f"\nmean attention onto erased keys {masked:.4f}, onto kept keys {unmasked:.4f}")

# one sample's head-averaged attention, erased key columns starred
keep = mt.sweep_keep(test.subset([0]), 8, 0.5, 0, 3)
with tc.no_grad():
    trace = model.forward({m: x[:1] for m, x in test.features.items()}, keep, with_aux=False)
A, cols = mt.attention_export(trace, keep[0])
print("column mass:", " ".join(f"{v:.2f}{'*' if j in cols else ' '}" for j, v in enumerate(A.mean(0))))
