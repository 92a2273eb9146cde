"""Look inside a trained model: slice weights and cross-attribute mixing.

Trains briefly, then prints how the slice attention treats the first and last
slices of each stack and which attributes share the most CAAM weight.

    python demos/attention_maps.py [--epochs 10]
"""

import argparse

import numpy as np

from anct.attributes import ATTRIBUTE_NAMES
from anct.data import synth_generate
from anct.evaluation import attention_report, collect_records
from anct.model import ModelConfig
from anct.train import TrainConfig, train_model

p = argparse.ArgumentParser()
p.add_argument("--epochs", type=int, default=10)
args = p.parse_args()

samples = synth_generate(40, seed=3, rater_count=3)
cfg = TrainConfig(epochs=args.epochs, lr=1e-3, model=ModelConfig(channel_preset="tiny"))
rep = train_model(samples, cfg)
records = collect_records(rep.model, samples, rep.stats)
attn = attention_report(records, samples)

sam = attn.sam
if sam.end_mean is not None:
    print(f"slice weights (1 = average slice): ends {sam.end_mean:.2f}, middle {sam.nonend_mean:.2f}, ratio {sam.ratio:.2f}")

short = [n[:5] for n in ATTRIBUTE_NAMES]
print("\nmean CAAM weights, row-normalised (row t = how attribute t mixes the others)")
print("       " + " ".join(f"{s:>6s}" for s in short))
for s, row in zip(short, attn.caam_mean_display):
    print(f"{s:>6s} " + " ".join(f"{v:6.2f}" for v in row))

corr = np.array(attn.caam_corr_raw, dtype=float)
pairs = sorted(((corr[i, j], i, j) for i in range(9) for j in range(i + 1, 9) if np.isfinite(corr[i, j])), reverse=True)
print("\nmost similar CAAM weight profiles:")
for c, i, j in pairs[:3]:
    print(f"  {ATTRIBUTE_NAMES[i]} / {ATTRIBUTE_NAMES[j]}: {c:.2f}")

gt = np.array(attn.gt_corr, dtype=float)
print("\nrating correlations with malignancy:")
for k, name in enumerate(ATTRIBUTE_NAMES[:-1]):
    print(f"  {name:20s} {gt[-1, k]:.2f}")
if attn.ib is not None:
    print("\nrater disagreement (mean pairwise |diff|):", np.round(attn.ib, 2).tolist())
