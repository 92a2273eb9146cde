"""Procedural nodule phantoms with known attribute scores.

Each nodule is an ellipsoidal blob rendered on a noisy -800 HU lung
background over ``M`` axial slices (cross-sections shrink and fade towards
the end slices). Every attribute is driven by one latent level in [0, 1]:

==================  ==========================================  ==================
attribute           rendered as                                 score
==================  ==========================================  ==================
sphericity          in-plane axis ratio 0.5 + 0.5 * s           1 + 4 s
margin              boundary blur 0.5 + 3.5 * (1 - m) px        1 + 4 m
subtlety            core contrast 250 + 600 * c HU (and blur)   1 + 4 (0.6 c + 0.4 m)
lobulation          sinusoidal boundary amplitude 0.22 * l      1 + 4 l
spiculation         3 + 9 p radial spikes (none when p < 0.1)   1 + 4 p
texture             interior noise 15 + 250 * h HU              5 - 4 h
internal_structure  dark pockets when h > 0.7                   1 + 3 clip((h - 0.7) / 0.3)
calcification       +400 HU pattern 1..5 (35% of nodules)       pattern, 6 if absent
malignancy          none (derived)                              MALIGNANCY_WEIGHTS
==================  ==========================================  ==================

Malignancy is the fixed affine combination::

    1 + 0.25 (lobulation - 1) + 0.25 (spiculation - 1)
      + 0.25 (5 - margin) + 0.25 (5 - sphericity)

clamped to [1, 5]. With ``rater_count > 1`` each simulated rater adds
N(0, 0.5) noise per attribute (clamped to scale) and the stored rating is
the rater mean.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..attributes import ATTRIBUTE_INDEX, NUM_ATTRIBUTES, SCALE_MAX, SCALE_MIN
from .formats import NoduleSample, NoduleVolume

MALIGNANCY_WEIGHTS = {
    "intercept": 1.0,
    "lobulation": 0.25,
    "spiculation": 0.25,
    "margin": 0.25,
    "sphericity": 0.25,
}
BACKGROUND_HU = -800.0
CALCIFICATION_HU = 400.0
RATER_SIGMA = 0.5
MAX_SLICES = 45
MEAN_SLICES = 5.6
SIZE = 64


def malignancy_from_attributes(lobulation, spiculation, margin, sphericity):
    w = MALIGNANCY_WEIGHTS
    raw = (
        w["intercept"]
        + w["lobulation"] * (lobulation - 1.0)
        + w["spiculation"] * (spiculation - 1.0)
        + w["margin"] * (5.0 - margin)
        + w["sphericity"] * (5.0 - sphericity)
    )
    return np.clip(raw, 1.0, 5.0)


@dataclass
class SynthParams:
    slices: int
    radius: float  # px, 12..19
    sphericity_level: float
    margin_level: float
    contrast_level: float
    lobulation_level: float
    lobulation_waves: int  # 3..7
    spiculation_level: float
    heterogeneity_level: float
    calcification_pattern: int  # 1..5, or 6 for absent
    rotation: float
    lobulation_phase: float

    @property
    def axis_ratio(self) -> float:
        return 0.5 + 0.5 * self.sphericity_level

    @property
    def blur(self) -> float:
        return 0.5 + 3.5 * (1.0 - self.margin_level)

    @property
    def contrast(self) -> float:
        return 250.0 + 600.0 * self.contrast_level

    @property
    def lobulation_amplitude(self) -> float:
        return 0.22 * self.lobulation_level

    @property
    def spike_count(self) -> int:
        return 0 if self.spiculation_level < 0.1 else int(round(3 + 9 * self.spiculation_level))

    @property
    def spike_length(self) -> float:
        return (0.25 + 0.6 * self.spiculation_level) * self.radius

    @property
    def heterogeneity(self) -> float:
        return 15.0 + 250.0 * self.heterogeneity_level

    def to_dict(self) -> dict:
        return asdict(self)


def draw_slice_count(rng: np.random.Generator) -> int:
    # Geometric on {1, 2, ...} with mean 5.6, truncated at 45.
    return int(min(MAX_SLICES, rng.geometric(1.0 / MEAN_SLICES)))


def draw_params(rng: np.random.Generator) -> SynthParams:
    u = rng.uniform
    present = u() < 0.35
    return SynthParams(
        slices=draw_slice_count(rng),
        radius=float(u(12.0, 19.0)),
        sphericity_level=float(u()),
        margin_level=float(u()),
        contrast_level=float(u()),
        lobulation_level=float(u()),
        lobulation_waves=int(rng.integers(3, 8)),
        spiculation_level=float(u()),
        heterogeneity_level=float(u()),
        calcification_pattern=int(rng.integers(1, 6)) if present else 6,
        rotation=float(u(0.0, np.pi)),
        lobulation_phase=float(u(0.0, 2 * np.pi)),
    )


def attribute_scores(p: SynthParams) -> np.ndarray:
    """Ground-truth scores (canonical order) as a pure function of the knobs."""
    s = np.empty(NUM_ATTRIBUTES)
    ix = ATTRIBUTE_INDEX
    s[ix["subtlety"]] = 1.0 + 4.0 * (0.6 * p.contrast_level + 0.4 * p.margin_level)
    s[ix["internal_structure"]] = 1.0 + 3.0 * float(np.clip((p.heterogeneity_level - 0.7) / 0.3, 0.0, 1.0))
    s[ix["calcification"]] = float(p.calcification_pattern)
    s[ix["sphericity"]] = 1.0 + 4.0 * p.sphericity_level
    s[ix["margin"]] = 1.0 + 4.0 * p.margin_level
    s[ix["lobulation"]] = 1.0 + 4.0 * p.lobulation_level
    s[ix["spiculation"]] = 1.0 + 4.0 * p.spiculation_level
    s[ix["texture"]] = 5.0 - 4.0 * p.heterogeneity_level
    s[ix["malignancy"]] = malignancy_from_attributes(
        s[ix["lobulation"]], s[ix["spiculation"]], s[ix["margin"]], s[ix["sphericity"]]
    )
    return np.clip(s, SCALE_MIN, SCALE_MAX)


def _gauss_blob(dx, dy, sigma):
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def render(p: SynthParams, rng: np.random.Generator) -> np.ndarray:
    """Render the ``(M, 64, 64)`` HU stack for one parameter draw."""
    M = p.slices
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    c0 = (SIZE - 1) / 2.0
    cx, cy = c0 + rng.uniform(-2, 2), c0 + rng.uniform(-2, 2)
    ct, st = np.cos(p.rotation), np.sin(p.rotation)
    ratio = p.axis_ratio
    spike_dirs = rng.uniform(0, 2 * np.pi, size=p.spike_count)
    spike_len = p.spike_length * rng.uniform(0.7, 1.3, size=p.spike_count)

    # Calcification blob centres in the nodule frame (fractions of radius).
    pattern = p.calcification_pattern
    if pattern == 1:  # popcorn
        n = int(rng.integers(4, 7))
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = rng.uniform(0.1, 0.6, n)
        calc_spots = [(r * np.cos(a), r * np.sin(a), 0.09) for a, r in zip(ang, rad)]
    elif pattern == 4:  # non-central
        a = rng.uniform(0, 2 * np.pi)
        calc_spots = [(0.55 * np.cos(a), 0.55 * np.sin(a), 0.15)]
    elif pattern == 5:  # central
        calc_spots = [(0.0, 0.0, 0.17)]
    else:
        calc_spots = []
    pockets = []
    if p.heterogeneity_level > 0.7:
        n = int(rng.integers(2, 5))
        ang = rng.uniform(0, 2 * np.pi, n)
        rad = rng.uniform(0.0, 0.5, n)
        pockets = [(r * np.cos(a), r * np.sin(a)) for a, r in zip(ang, rad)]
    pocket_depth = (p.heterogeneity_level - 0.7) / 0.3 * 0.8 * p.contrast if pockets else 0.0

    out = np.empty((M, SIZE, SIZE), dtype=np.float32)
    for k in range(M):
        z = 0.0 if M == 1 else ((k + 0.5) / M) * 2.0 - 1.0
        sc = float(np.sqrt(max(1.0 - z * z, 0.1)))
        R0 = p.radius * sc
        dx = xx - (cx + rng.uniform(-0.5, 0.5))
        dy = yy - (cy + rng.uniform(-0.5, 0.5))
        u = dx * ct + dy * st
        v = -dx * st + dy * ct
        rho = np.sqrt(u * u + (v / ratio) ** 2)
        phi = np.arctan2(v / ratio, u)
        R = R0 * (1.0 + p.lobulation_amplitude * np.sin(p.lobulation_waves * phi + p.lobulation_phase))
        body = 0.5 * (1.0 + np.tanh((R - rho) / (2.0 * p.blur)))

        mask = body
        for psi, length in zip(spike_dirs, spike_len):
            phi_rel = psi - p.rotation
            r_edge = R0 / np.sqrt(np.cos(phi_rel) ** 2 + (np.sin(phi_rel) / ratio) ** 2)
            along = dx * np.cos(psi) + dy * np.sin(psi)
            perp = -dx * np.sin(psi) + dy * np.cos(psi)
            r_end = r_edge + length * sc
            taper = np.clip((r_end - along) / (0.6 * length * sc + 1e-9), 0.0, 1.0)
            width = 0.6 + 0.8 * taper
            spike = np.exp(-(perp * perp) / (2.0 * width * width)) * taper * (along > 0)
            mask = np.maximum(mask, spike)

        fade = 0.55 + 0.45 * sc
        het = gaussian_filter(rng.standard_normal((SIZE, SIZE)), 1.5)
        het /= het.std() + 1e-12
        nodule = mask * p.contrast * fade + body * p.heterogeneity * het

        if pockets:
            pk = sum(_gauss_blob(u - px * R0, v - py * R0, 0.12 * R0) for px, py in pockets)
            nodule = nodule - body * np.minimum(pk, 1.0) * pocket_depth

        calc = np.zeros_like(body)
        if pattern == 2:  # laminated ring
            calc = np.exp(-((rho - 0.5 * R0) ** 2) / (2.0 * 1.0**2))
        elif pattern == 3:  # solid core
            calc = 0.5 * (1.0 + np.tanh((0.55 * R0 - rho) / 1.0))
        for px, py, sig in calc_spots:
            calc = np.maximum(calc, _gauss_blob(u - px * R0, v - py * R0, max(sig * R0, 0.8)))
        nodule = nodule + CALCIFICATION_HU * sc * calc * body

        bg = BACKGROUND_HU + 30.0 * gaussian_filter(rng.standard_normal((SIZE, SIZE)), 2.0) / 0.14
        noise = 20.0 * rng.standard_normal((SIZE, SIZE))
        out[k] = (bg + nodule + noise).astype(np.float32)
    return out


def simulate_raters(scores: np.ndarray, rater_count: int, rng: np.random.Generator):
    """Noisy per-rater ratings (R, 9) and their mean; ``None`` raters when R <= 1."""
    if rater_count <= 1:
        return scores.copy(), None
    raters = np.clip(
        scores[None, :] + RATER_SIGMA * rng.standard_normal((rater_count, NUM_ATTRIBUTES)),
        SCALE_MIN,
        SCALE_MAX,
    )
    return raters.mean(axis=0), raters


def synth_sample(index: int, seed: int, rater_count: int = 1) -> tuple[NoduleSample, SynthParams]:
    # Per-nodule stream: nodule i is identical whatever the corpus size.
    rng = np.random.default_rng([seed, index])
    params = draw_params(rng)
    scores = attribute_scores(params)
    slices = render(params, rng)
    ratings, raters = simulate_raters(scores, rater_count, rng)
    nid = f"synth-{seed}-{index:05d}"
    return NoduleSample(NoduleVolume(nid, slices), ratings, raters), params


def synth_generate(count: int, seed: int, rater_count: int = 1) -> list[NoduleSample]:
    if count < 1:
        raise ValueError("count must be at least 1")
    return [synth_sample(i, seed, rater_count)[0] for i in range(count)]
