"""The nine scored nodule attributes and their rating scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    scale_min: int
    scale_max: int

    @property
    def span(self) -> int:
        return self.scale_max - self.scale_min


ATTRIBUTES: tuple[AttributeSpec, ...] = (
    AttributeSpec("subtlety", 1, 5),
    AttributeSpec("internal_structure", 1, 4),
    AttributeSpec("calcification", 1, 6),
    AttributeSpec("sphericity", 1, 5),
    AttributeSpec("margin", 1, 5),
    AttributeSpec("lobulation", 1, 5),
    AttributeSpec("spiculation", 1, 5),
    AttributeSpec("texture", 1, 5),
    AttributeSpec("malignancy", 1, 5),
)
ATTRIBUTE_NAMES: tuple[str, ...] = tuple(a.name for a in ATTRIBUTES)
NUM_ATTRIBUTES = len(ATTRIBUTES)
ATTRIBUTE_INDEX = {name: i for i, name in enumerate(ATTRIBUTE_NAMES)}

SCALE_MIN = np.array([a.scale_min for a in ATTRIBUTES], dtype=np.float64)
SCALE_MAX = np.array([a.scale_max for a in ATTRIBUTES], dtype=np.float64)


class RatingError(ValueError):
    """A rating lies outside its attribute's scale."""


def check_rating(name: str, value: float) -> None:
    spec = ATTRIBUTES[ATTRIBUTE_INDEX[name]]
    if not (spec.scale_min <= value <= spec.scale_max) or not np.isfinite(value):
        raise RatingError(
            f"{name} rating {value} outside scale [{spec.scale_min}, {spec.scale_max}]"
        )


def normalize_ratings(ratings) -> np.ndarray:
    """Map original-scale ratings (length 9, canonical order) into [0, 1]."""
    r = np.asarray(ratings, dtype=np.float64)
    if r.shape != (NUM_ATTRIBUTES,):
        raise ValueError(f"expected {NUM_ATTRIBUTES} ratings, got shape {r.shape}")
    for name, value in zip(ATTRIBUTE_NAMES, r):
        check_rating(name, value)
    return (r - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)


def denormalize_score(value, spec: AttributeSpec | None = None):
    """Inverse of :func:`normalize_ratings`.

    With ``spec`` a scalar on that attribute's scale is returned; otherwise
    ``value`` is a length-9 vector in canonical order.
    """
    if spec is not None:
        v = float(value)
        if not 0.0 <= v <= 1.0:
            raise RatingError(f"normalised score {v} outside [0, 1]")
        return spec.scale_min + v * spec.span
    v = np.asarray(value, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise RatingError("normalised scores must lie in [0, 1]")
    return SCALE_MIN + v * (SCALE_MAX - SCALE_MIN)
