"""MAE evaluation, significance tests and attention analytics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sps

from .attributes import ATTRIBUTE_NAMES, NUM_ATTRIBUTES, SCALE_MAX, SCALE_MIN
from .autodiff import no_record
from .data.formats import NoduleSample
from .data.preprocess import normalize_intensity
from .model import Model


class AnalyticsError(ValueError):
    pass


class DegenerateInputError(AnalyticsError):
    pass


@dataclass
class NoduleRecord:
    """Detached, float64 copy of one forward pass for analytics."""

    id: str
    alpha: np.ndarray
    caam: np.ndarray
    final: np.ndarray  # normalised, (9,)
    aux: np.ndarray | None
    sam_enabled: bool
    caam_enabled: bool

    @property
    def num_slices(self) -> int:
        return self.alpha.shape[0]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "alpha": self.alpha.tolist(),
            "caam": self.caam.tolist(),
            "final": self.final.tolist(),
            "aux": None if self.aux is None else self.aux.tolist(),
            "sam_enabled": self.sam_enabled,
            "caam_enabled": self.caam_enabled,
        }


def collect_records(model: Model, samples: Sequence[NoduleSample], stats: dict, with_aux: bool = True) -> list[NoduleRecord]:
    """Forward every sample without augmentation or recording."""
    out = []
    with no_record():
        for s in samples:
            vol = normalize_intensity(s.volume.slices, stats)
            rec = model.forward(vol, compute_aux=with_aux).to_numpy()
            out.append(
                NoduleRecord(
                    s.id,
                    rec["alpha"],
                    rec["caam"],
                    rec["final"],
                    rec["aux"],
                    bool(rec["sam_enabled"]),
                    bool(rec["caam_enabled"]),
                )
            )
    return out


@dataclass
class EvalReport:
    per_attribute_mae: np.ndarray
    mean_mae: float
    count: int
    ids: list[str]
    abs_errors: np.ndarray  # (N, 9), original scales
    aux_per_attribute_mae: np.ndarray | None = None
    records: list[NoduleRecord] = field(default_factory=list, repr=False)

    @property
    def per_nodule_errors(self) -> np.ndarray:
        """Mean absolute error across attributes for each nodule."""
        return self.abs_errors.mean(axis=1)

    def as_dict(self) -> dict:
        return dict(zip(ATTRIBUTE_NAMES, map(float, self.per_attribute_mae)), mean=self.mean_mae)


def _denorm(v: np.ndarray) -> np.ndarray:
    return SCALE_MIN + np.asarray(v, dtype=np.float64) * (SCALE_MAX - SCALE_MIN)


def report_from_records(records: Sequence[NoduleRecord], samples: Sequence[NoduleSample]) -> EvalReport:
    if len(records) != len(samples):
        raise AnalyticsError("records and samples differ in length")
    if not records:
        raise AnalyticsError("cannot evaluate an empty test set")
    truth = np.stack([s.ratings for s in samples])
    pred = np.stack([_denorm(r.final) for r in records])
    abs_err = np.abs(pred - truth)
    per_attr = abs_err.mean(axis=0)
    aux_mae = None
    if all(r.aux is not None for r in records):
        aux_mae = np.abs(np.stack([_denorm(r.aux) for r in records]) - truth).mean(axis=0)
    return EvalReport(
        per_attribute_mae=per_attr,
        mean_mae=float(per_attr.mean()),
        count=len(records),
        ids=[s.id for s in samples],
        abs_errors=abs_err,
        aux_per_attribute_mae=aux_mae,
        records=list(records),
    )


def evaluate(model: Model, samples: Sequence[NoduleSample], stats: dict) -> EvalReport:
    """Per-attribute MAE on de-normalised scores against the average ratings."""
    return report_from_records(collect_records(model, samples, stats), samples)


def constant_predictor_report(train: Sequence[NoduleSample], test: Sequence[NoduleSample]) -> EvalReport:
    """Always predict each attribute's training-set mean rating."""
    means = np.stack([s.ratings for s in train]).mean(axis=0)
    truth = np.stack([s.ratings for s in test])
    abs_err = np.abs(truth - means)
    per_attr = abs_err.mean(axis=0)
    return EvalReport(per_attr, float(per_attr.mean()), len(test), [s.id for s in test], abs_err)


# --------------------------------------------------------------------------
# significance


@dataclass
class TTestResult:
    t: float
    p: float
    n: int
    mean_difference: float

    def to_dict(self) -> dict:
        return {"t": self.t, "p": self.p, "n": self.n, "mean_difference": self.mean_difference}


def paired_t_test(errors_a, errors_b) -> TTestResult:
    """Two-sided paired t-test on per-nodule errors (``a - b``)."""
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise AnalyticsError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise AnalyticsError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n, 0.0)
        raise DegenerateInputError("differences are constant and nonzero; t is undefined")
    t = mean / (sd / np.sqrt(n))
    p = float(2.0 * sps.t.sf(abs(t), df=n - 1))
    return TTestResult(float(t), min(1.0, p), n, mean)


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Overall and per-attribute paired tests between two evaluations of the same nodules."""
    if a.ids != b.ids:
        # Align on shared ids.
        common = [i for i in a.ids if i in set(b.ids)]
        ia = [a.ids.index(i) for i in common]
        ib = [b.ids.index(i) for i in common]
        ea, eb = a.abs_errors[ia], b.abs_errors[ib]
    else:
        common, ea, eb = a.ids, a.abs_errors, b.abs_errors
    if not common:
        raise AnalyticsError("reports share no nodule ids")
    overall = paired_t_test(ea.mean(axis=1), eb.mean(axis=1))
    per_attr = {}
    for k, name in enumerate(ATTRIBUTE_NAMES):
        try:
            per_attr[name] = paired_t_test(ea[:, k], eb[:, k]).to_dict()
        except DegenerateInputError:
            per_attr[name] = None
    return {
        "n": len(common),
        "mae_a": dict(zip(ATTRIBUTE_NAMES, map(float, ea.mean(axis=0))), mean=float(ea.mean())),
        "mae_b": dict(zip(ATTRIBUTE_NAMES, map(float, eb.mean(axis=0))), mean=float(eb.mean())),
        "overall": overall.to_dict(),
        "per_attribute": per_attr,
    }


# --------------------------------------------------------------------------
# slice attention


@dataclass
class SamSliceStats:
    end_mean: float | None
    nonend_mean: float | None
    ratio: float | None  # non-end mean / end mean
    qualifying: int
    per_nodule: list[list[float]]

    def to_dict(self) -> dict:
        return {
            "end_mean": self.end_mean,
            "nonend_mean": self.nonend_mean,
            "ratio": self.ratio,
            "qualifying": self.qualifying,
            "per_nodule": self.per_nodule,
        }


def sam_slice_stats(alphas: Sequence) -> SamSliceStats:
    """Pool slice weights rescaled by ``M`` (uniform weights become 1).

    Only stacks with at least 3 slices feed the end / non-end pools.
    ``alphas`` may be weight vectors or :class:`NoduleRecord` objects.
    """
    end, nonend, per = [], [], []
    for a in alphas:
        w = np.asarray(getattr(a, "alpha", a), dtype=np.float64)
        scaled = w * w.size
        per.append(scaled.tolist())
        if w.size >= 3:
            end.extend([scaled[0], scaled[-1]])
            nonend.extend(scaled[1:-1])
    if not end:
        return SamSliceStats(None, None, None, 0, per)
    e, ne = float(np.mean(end)), float(np.mean(nonend))
    return SamSliceStats(e, ne, ne / e if e > 0 else None, len(end) // 2, per)


# --------------------------------------------------------------------------
# cross-attribute attention


def _caam_stack(records) -> np.ndarray:
    mats = [np.asarray(r.caam, dtype=np.float64) for r in records if getattr(r, "caam_enabled", True)]
    if not mats:
        raise AnalyticsError("no records with cross-attribute attention enabled")
    return np.stack(mats)


def caam_mean_matrix(records) -> tuple[np.ndarray, np.ndarray]:
    """``(raw mean Q, display)``; display rows are divided by their absolute sums."""
    raw = _caam_stack(records).mean(axis=0)
    denom = np.abs(raw).sum(axis=1, keepdims=True)
    display = np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)
    return raw, display


def _pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.dot(xc, xc))
    sy = np.sqrt(np.dot(yc, yc))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


@dataclass
class CaamCorrelation:
    raw: np.ndarray
    display: np.ndarray
    counts: np.ndarray


def caam_correlation_matrix(records, axis: str = "rows") -> CaamCorrelation:
    """Mean per-nodule Pearson correlation between weight profiles.

    ``axis="rows"`` correlates ``Q[i]`` with ``Q[j]`` (how attributes ``i``
    and ``j`` weigh every attribute); ``"columns"`` correlates columns.
    Zero-variance pairs are skipped per nodule; ``counts`` records how many
    nodules contributed. The display copy is min-max scaled to [0, 1].
    """
    Q = _caam_stack(records)
    if Q.shape[0] < 2:
        raise AnalyticsError("need at least 2 records")
    if axis == "columns":
        Q = Q.transpose(0, 2, 1)
    elif axis != "rows":
        raise ValueError(f"axis must be 'rows' or 'columns', got {axis!r}")
    K = Q.shape[1]
    sums = np.zeros((K, K))
    counts = np.zeros((K, K), dtype=np.int64)
    for q in Q:
        for i in range(K):
            for j in range(i + 1, K):
                r = _pearson(q[i], q[j])
                if r is not None:
                    sums[i, j] += r
                    counts[i, j] += 1
    raw = np.full((K, K), np.nan)
    ok = counts > 0
    raw[ok] = sums[ok] / counts[ok]
    raw = np.where(np.isnan(raw), raw.T, raw)
    counts = counts + counts.T
    np.fill_diagonal(raw, 1.0)
    np.fill_diagonal(counts, Q.shape[0])
    return CaamCorrelation(raw, _minmax(raw), counts)


def _minmax(m: np.ndarray) -> np.ndarray:
    finite = np.isfinite(m)
    if not finite.any():
        return m.copy()
    lo, hi = m[finite].min(), m[finite].max()
    if hi == lo:
        return np.where(finite, 1.0, np.nan)
    return (m - lo) / (hi - lo)


def gt_correlation_matrix(samples) -> np.ndarray:
    """|Pearson| between average ratings across nodules; NaN for constant columns."""
    R = np.stack([np.asarray(getattr(s, "ratings", s), dtype=np.float64) for s in samples])
    if R.shape[0] < 2:
        raise AnalyticsError("need at least 2 samples")
    K = R.shape[1]
    out = np.full((K, K), np.nan)
    for i in range(K):
        for j in range(i, K):
            r = _pearson(R[:, i], R[:, j])
            if r is not None:
                out[i, j] = out[j, i] = abs(r)
    for i in range(K):
        if np.isfinite(out[i, i]):
            out[i, i] = 1.0
    return out


def interobserver_variation(samples) -> np.ndarray | None:
    """Per-attribute mean over nodules of the mean |difference| across rater pairs.

    Attributes without any multi-rater nodule are NaN; ``None`` if no sample
    has two or more raters at all.
    """
    sums = np.zeros(NUM_ATTRIBUTES)
    counts = np.zeros(NUM_ATTRIBUTES, dtype=np.int64)
    for s in samples:
        raters = getattr(s, "rater_ratings", None)
        if raters is None or len(raters) < 2:
            continue
        raters = np.asarray(raters, dtype=np.float64)
        for k in range(NUM_ATTRIBUTES):
            vals = raters[:, k][~np.isnan(raters[:, k])]
            if vals.size < 2:
                continue
            diffs = np.abs(vals[:, None] - vals[None, :])[np.triu_indices(vals.size, 1)]
            sums[k] += diffs.mean()
            counts[k] += 1
    if not counts.any():
        return None
    return np.divide(sums, counts, out=np.full(NUM_ATTRIBUTES, np.nan), where=counts > 0)


# --------------------------------------------------------------------------
# reports and exporters


@dataclass
class AttnReport:
    sam: SamSliceStats
    caam_mean_raw: np.ndarray | None
    caam_mean_display: np.ndarray | None
    caam_corr_raw: np.ndarray | None
    caam_corr_display: np.ndarray | None
    gt_corr: np.ndarray | None
    ib: np.ndarray | None
    caam_corr_counts: np.ndarray | None = None

    def to_json_obj(self) -> dict:
        def mat(m):
            return None if m is None else [[_num(v) for v in row] for row in np.asarray(m)]

        return {
            "attributes": list(ATTRIBUTE_NAMES),
            "sam": self.sam.to_dict(),
            "caam_mean_raw": mat(self.caam_mean_raw),
            "caam_mean_display": mat(self.caam_mean_display),
            "caam_corr_raw": mat(self.caam_corr_raw),
            "caam_corr_display": mat(self.caam_corr_display),
            "caam_corr_counts": mat(self.caam_corr_counts),
            "gt_corr": mat(self.gt_corr),
            "ib": None if self.ib is None else [_num(v) for v in self.ib],
        }


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def attention_report(records: Sequence[NoduleRecord], samples: Sequence[NoduleSample] = (), corr_axis: str = "rows") -> AttnReport:
    sam = sam_slice_stats([r for r in records if r.sam_enabled])
    mean_raw = mean_disp = corr = None
    caam_records = [r for r in records if r.caam_enabled]
    if caam_records:
        mean_raw, mean_disp = caam_mean_matrix(caam_records)
        if len(caam_records) >= 2:
            corr = caam_correlation_matrix(caam_records, axis=corr_axis)
    gt = gt_correlation_matrix(samples) if len(samples) >= 2 else None
    ib = interobserver_variation(samples) if samples else None
    return AttnReport(
        sam,
        mean_raw,
        mean_disp,
        None if corr is None else corr.raw,
        None if corr is None else corr.display,
        gt,
        ib,
        None if corr is None else corr.counts,
    )


def write_eval_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attribute", "mae"])
        for name, v in zip(ATTRIBUTE_NAMES, report.per_attribute_mae):
            w.writerow([name, f"{v:.6f}"])
        w.writerow(["mean", f"{report.mean_mae:.6f}"])


def read_eval_csv(path) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["attribute", "mae"]:
        raise AnalyticsError(f"{path}: not an eval CSV")
    return {name: float(v) for name, v in rows[1:]}


def write_errors_csv(report: EvalReport, path) -> None:
    """Per-nodule absolute errors (original scales), one row per nodule."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", *ATTRIBUTE_NAMES])
        for nid, row in zip(report.ids, report.abs_errors):
            w.writerow([nid, *(repr(float(v)) for v in row)])


def read_errors_csv(path) -> EvalReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["id", *ATTRIBUTE_NAMES]:
        raise AnalyticsError(f"{path}: not a per-nodule errors CSV")
    ids = [r[0] for r in rows[1:]]
    errs = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(-1, NUM_ATTRIBUTES)
    per = errs.mean(axis=0) if len(ids) else np.full(NUM_ATTRIBUTES, np.nan)
    return EvalReport(per, float(per.mean()), len(ids), ids, errs)


def write_attn_json(report: AttnReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json_obj(), indent=2, sort_keys=True), encoding="utf-8")
