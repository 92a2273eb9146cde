"""Train a tiny model on a small synthetic corpus and score a held-out fold.

    python demos/quickstart.py [--count 60] [--epochs 15]
"""

import argparse

import numpy as np

from anct.attributes import ATTRIBUTE_NAMES
from anct.data import make_folds, synth_generate
from anct.evaluation import constant_predictor_report, evaluate
from anct.model import ModelConfig
from anct.train import TrainConfig, train_model

p = argparse.ArgumentParser()
p.add_argument("--count", type=int, default=60)
p.add_argument("--epochs", type=int, default=15)
args = p.parse_args()

samples = synth_generate(args.count, seed=7)
print(f"{len(samples)} nodules, {np.mean([s.volume.depth for s in samples]):.1f} slices on average")

split = make_folds([s.id for s in samples], seed=0)
held_out = set(split.test_ids(0))
train = [s for s in samples if s.id not in held_out]
test = [s for s in samples if s.id in held_out]

cfg = TrainConfig(epochs=args.epochs, lr=1e-3, seed=0, model=ModelConfig(channel_preset="tiny"))
report = train_model(train, cfg, on_epoch=lambda e, loss: print(f"  epoch {e + 1:3d}  loss {loss:.4f}"))

ev = evaluate(report.model, test, report.stats)
const = constant_predictor_report(train, test)
print(f"\n{'attribute':20s} {'model':>7s} {'constant':>9s}")
for name, m, c in zip(ATTRIBUTE_NAMES, ev.per_attribute_mae, const.per_attribute_mae):
    print(f"{name:20s} {m:7.3f} {c:9.3f}")
print(f"{'mean':20s} {ev.mean_mae:7.3f} {const.mean_mae:9.3f}")
