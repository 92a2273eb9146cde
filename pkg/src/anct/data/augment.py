"""Online augmentation and cross-validation splits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270", "zreverse")


def apply_augmentation(volume: np.ndarray, name: str) -> np.ndarray:
    """Apply one named transform to an ``(M, H, W)`` stack.

    Flips and rotations act on the lateral axes of every slice identically.
    """
    v = np.asarray(volume)
    if name == "identity":
        out = v
    elif name == "hflip":
        out = v[:, :, ::-1]
    elif name == "vflip":
        out = v[:, ::-1, :]
    elif name == "rot90":
        out = np.rot90(v, 1, axes=(1, 2))
    elif name == "rot180":
        out = np.rot90(v, 2, axes=(1, 2))
    elif name == "rot270":
        out = np.rot90(v, 3, axes=(1, 2))
    elif name == "zreverse":
        out = v[::-1]
    else:
        raise ValueError(f"unknown augmentation {name!r}")
    return np.ascontiguousarray(out)


def augment(volume: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Draw one of the seven transforms uniformly (identity included)."""
    name = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    return apply_augmentation(volume, name), name


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    fold_count: int = 5

    def test_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignments.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.test_ids(k)) for k in range(self.fold_count)]


def make_folds(ids: Sequence[str], seed: int, fold_count: int = 5) -> FoldSplit:
    """Seeded shuffle then round-robin assignment (sizes differ by at most 1)."""
    ids = list(ids)
    if len(ids) < fold_count:
        raise ValueError(f"need at least {fold_count} ids for {fold_count} folds, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.default_rng(seed).permutation(len(ids))
    assignments = {ids[j]: int(pos % fold_count) for pos, j in enumerate(order)}
    # Keep the caller's id order in the mapping.
    return FoldSplit({i: assignments[i] for i in ids}, fold_count)
