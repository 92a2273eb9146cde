import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from anct.attributes import ATTRIBUTE_NAMES, ATTRIBUTES, SCALE_MAX, SCALE_MIN
from anct.data import NoduleSample, NoduleVolume, compute_dataset_stats, synth_generate
from anct.evaluation import (
    AnalyticsError,
    DegenerateInputError,
    NoduleRecord,
    attention_report,
    caam_correlation_matrix,
    caam_mean_matrix,
    collect_records,
    compare_reports,
    constant_predictor_report,
    evaluate,
    gt_correlation_matrix,
    interobserver_variation,
    paired_t_test,
    read_errors_csv,
    read_eval_csv,
    report_from_records,
    sam_slice_stats,
    write_attn_json,
    write_errors_csv,
    write_eval_csv,
)
from anct.model import Model, ModelConfig

A = {n: i for i, n in enumerate(ATTRIBUTE_NAMES)}


def sample(ratings, nid="n", raters=None):
    return NoduleSample(NoduleVolume(nid, np.zeros((1, 64, 64))), np.asarray(ratings, float), raters)


def record(final, nid="n", alpha=(1.0,), caam=None):
    caam = np.zeros((9, 9)) if caam is None else np.asarray(caam, float)
    return NoduleRecord(nid, np.asarray(alpha, float), caam, np.asarray(final, float), None, True, True)


def to_unit(r):
    return (np.asarray(r, float) - SCALE_MIN) / (SCALE_MAX - SCALE_MIN)


# --------------------------------------------------------------------------
# MAE


def test_perfect_predictions_zero_mae():
    gts = [np.array([3, 2, 4, 3, 3, 2, 4, 3, 5.0]), np.array([1, 1, 6, 5, 5, 5, 5, 5, 1.0])]
    rep = report_from_records([record(to_unit(g), str(i)) for i, g in enumerate(gts)], [sample(g, str(i)) for i, g in enumerate(gts)])
    assert np.all(rep.per_attribute_mae == 0) and rep.mean_mae == 0


def test_single_nodule_subtlety_half():
    gt = np.full(9, 3.0)
    pred = gt.copy()
    pred[A["subtlety"]] = 3.5
    rep = report_from_records([record(to_unit(pred))], [sample(gt)])
    assert rep.per_attribute_mae[A["subtlety"]] == pytest.approx(0.5, abs=1e-15)
    assert rep.count == 1


def test_evaluate_matches_flat_loop():
    samples = synth_generate(6, seed=8)
    model = Model.create(ModelConfig(channel_preset="tiny", attention_hidden=16, head_hidden=16), seed=1)
    stats = compute_dataset_stats(samples)
    rep = evaluate(model, samples, stats)
    # Flat loop over the same records.
    total = [0.0] * 9
    for rec, s in zip(rep.records, samples):
        for k, spec in enumerate(ATTRIBUTES):
            pred = spec.scale_min + float(rec.final[k]) * (spec.scale_max - spec.scale_min)
            total[k] += abs(pred - float(s.ratings[k]))
    flat = [t / len(samples) for t in total]
    np.testing.assert_allclose(rep.per_attribute_mae, flat, atol=1e-12, rtol=0)
    assert abs(rep.mean_mae - sum(flat) / 9) < 1e-12
    assert abs(rep.mean_mae - rep.per_attribute_mae.mean()) < 1e-12
    assert rep.aux_per_attribute_mae is not None
    # Re-collecting gives the same records (no augmentation, no state).
    again = collect_records(model, samples, stats)
    for a, b in zip(rep.records, again):
        assert a.final.tobytes() == b.final.tobytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_mae_properties(n, seed):
    r = np.random.default_rng(seed)
    truth = SCALE_MIN + r.random((n, 9)) * (SCALE_MAX - SCALE_MIN)
    pred = r.random((n, 9))
    recs = [record(p, str(i)) for i, p in enumerate(pred)]
    smp = [sample(t, str(i)) for i, t in enumerate(truth)]
    rep = report_from_records(recs, smp)
    assert np.all(rep.per_attribute_mae >= 0)
    assert np.all(rep.per_attribute_mae <= SCALE_MAX - SCALE_MIN)
    # Symmetric in prediction and truth.
    swapped = report_from_records(
        [record(to_unit(t), str(i)) for i, t in enumerate(truth)],
        [sample(SCALE_MIN + p * (SCALE_MAX - SCALE_MIN), str(i)) for i, p in enumerate(pred)],
    )
    np.testing.assert_allclose(swapped.per_attribute_mae, rep.per_attribute_mae, atol=1e-12)


def test_constant_predictor():
    train = [sample(np.full(9, 2.0), "a"), sample(np.full(9, 4.0), "b")]
    test = [sample(np.full(9, 3.0), "c"), sample(np.full(9, 1.0), "d")]
    rep = constant_predictor_report(train, test)
    np.testing.assert_allclose(rep.per_attribute_mae, 1.0)


def test_report_errors():
    with pytest.raises(AnalyticsError):
        report_from_records([], [])
    with pytest.raises(AnalyticsError):
        report_from_records([record(np.zeros(9))], [])


# --------------------------------------------------------------------------
# t-test


def test_ttest_examples():
    x = np.array([0.3, 0.5, 0.2])
    res = paired_t_test(x, x)
    assert (res.t, res.p) == (0.0, 1.0)
    assert paired_t_test([1.0, -1.0], [0.0, 0.0]).t == 0.0
    with pytest.raises(DegenerateInputError):
        paired_t_test([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
    with pytest.raises(AnalyticsError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(AnalyticsError):
        paired_t_test([1.0, 2.0], [2.0, 3.0, 4.0])


def test_ttest_ten_sample_reference():
    a = np.array([0.52, 0.61, 0.47, 0.55, 0.70, 0.44, 0.58, 0.63, 0.49, 0.51])
    b = np.array([0.48, 0.57, 0.49, 0.50, 0.62, 0.41, 0.55, 0.60, 0.45, 0.50])
    res = paired_t_test(a, b)
    ref = sps.ttest_rel(a, b)
    assert res.t == pytest.approx(ref.statistic, rel=1e-12)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-9)
    # Tabulated: two-sided 5% critical value at 9 dof is 2.262.
    assert abs(res.t) > 2.262 and res.p < 0.05
    assert res.n == 10 and res.mean_difference == pytest.approx((a - b).mean())


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 40), st.integers(0, 10_000))
def test_ttest_matches_scipy(n, seed):
    r = np.random.default_rng(seed)
    a, b = r.random(n), r.random(n)
    res = paired_t_test(a, b)
    ref = sps.ttest_rel(a, b)
    assert res.t == pytest.approx(ref.statistic, rel=1e-9, abs=1e-12)
    assert res.p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-12)
    assert 0 <= res.p <= 1
    assert paired_t_test(a, a).t == 0.0


def test_compare_reports_aligns_ids():
    gt = [np.full(9, 3.0)] * 4
    ids = ["a", "b", "c", "d"]
    smp = [sample(g, i) for g, i in zip(gt, ids)]
    ra = report_from_records([record(np.full(9, v), i) for v, i in zip([0.5, 0.6, 0.7, 0.55], ids)], smp)
    rb = report_from_records([record(np.full(9, v), i) for v, i in zip([0.52, 0.5, 0.8, 0.5], ids)], smp)
    out = compare_reports(ra, rb)
    ref = sps.ttest_rel(ra.per_nodule_errors, rb.per_nodule_errors)
    assert out["overall"]["t"] == pytest.approx(ref.statistic)
    assert out["n"] == 4 and set(out["per_attribute"]) == set(ATTRIBUTE_NAMES)
    # Reordered ids still pair up.
    perm = [2, 0, 3, 1]
    rb2 = report_from_records([rb.records[k] for k in perm], [smp[k] for k in perm])
    assert compare_reports(ra, rb2)["overall"]["t"] == pytest.approx(ref.statistic)


# --------------------------------------------------------------------------
# slice attention


def test_sam_stats_examples():
    s = sam_slice_stats([np.array([0.1, 0.8, 0.1])])
    assert s.end_mean == pytest.approx(0.3, abs=1e-15)
    assert s.nonend_mean == pytest.approx(2.4, abs=1e-15)
    assert s.ratio == pytest.approx(8.0, abs=1e-12)
    u = sam_slice_stats([np.full(4, 0.25)])
    assert u.end_mean == u.nonend_mean == 1.0 and u.ratio == 1.0
    empty = sam_slice_stats([np.array([0.5, 0.5]), np.array([1.0])])
    assert empty.end_mean is None and empty.qualifying == 0
    assert empty.per_nodule == [[1.0, 1.0], [1.0]]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=8), st.integers(0, 1000))
def test_sam_scaled_weights_sum_to_m(ms, seed):
    r = np.random.default_rng(seed)
    alphas = []
    for m in ms:
        a = r.random(m) + 1e-3
        alphas.append(a / a.sum())
    s = sam_slice_stats(alphas)
    for m, w in zip(ms, s.per_nodule):
        assert abs(sum(w) - m) < 1e-12
    ends = [x for m, w in zip(ms, s.per_nodule) if m >= 3 for x in (w[0], w[-1])]
    if ends:
        assert s.end_mean == pytest.approx(np.mean(ends))


# --------------------------------------------------------------------------
# cross-attribute attention


def _pearson_oracle(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_caam_mean_matrix():
    q = np.arange(81, dtype=float).reshape(9, 9) - 40
    raw, disp = caam_mean_matrix([record(np.zeros(9), caam=q)])
    np.testing.assert_array_equal(raw, q)
    np.testing.assert_allclose(np.abs(disp).sum(axis=1), 1.0, atol=1e-15)
    raw2, disp2 = caam_mean_matrix([record(np.zeros(9), caam=q)] * 3)
    np.testing.assert_array_equal(raw2, q)
    r = np.random.default_rng(0)
    qs = r.standard_normal((5, 9, 9))
    raw3, _ = caam_mean_matrix([record(np.zeros(9), caam=m) for m in qs])
    loop = np.zeros((9, 9))
    for i in range(9):
        for j in range(9):
            loop[i, j] = sum(m[i, j] for m in qs) / 5
    np.testing.assert_allclose(raw3, loop, atol=1e-14)
    with pytest.raises(AnalyticsError):
        caam_mean_matrix([NoduleRecord("x", np.ones(1), np.zeros((9, 9)), np.zeros(9), None, True, False)])


def test_caam_correlation_examples():
    r = np.random.default_rng(1)
    q = r.standard_normal((9, 9))
    q[1] = 2 * q[0]
    q[2] = -q[0]
    q2 = r.standard_normal((9, 9))
    q2[1] = 3 * q2[0] + 1
    q2[2] = -5 * q2[0]
    out = caam_correlation_matrix([record(np.zeros(9), caam=q), record(np.zeros(9), caam=q2)])
    assert out.raw[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert out.raw[0, 2] == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_array_equal(out.raw, out.raw.T)
    np.testing.assert_array_equal(np.diag(out.raw), 1.0)
    assert np.nanmin(out.display) == 0.0 and np.nanmax(out.display) == 1.0


def test_caam_correlation_matches_oracle_and_skips_constant():
    r = np.random.default_rng(2)
    qs = r.standard_normal((6, 9, 9))
    qs[0, 4] = 0.7  # constant row in one nodule
    recs = [record(np.zeros(9), caam=m) for m in qs]
    out = caam_correlation_matrix(recs)
    for i in range(9):
        for j in range(9):
            if i == j:
                continue
            vals = [
                _pearson_oracle(m[i], m[j])
                for m in qs
                if np.ptp(m[i]) > 0 and np.ptp(m[j]) > 0
            ]
            assert out.raw[i, j] == pytest.approx(sum(vals) / len(vals), abs=1e-10)
            assert out.counts[i, j] == len(vals)
    assert out.counts[4, 0] == 5
    cols = caam_correlation_matrix(recs, axis="columns")
    assert cols.raw[1, 3] == pytest.approx(np.mean([_pearson_oracle(m[:, 1], m[:, 3]) for m in qs]), abs=1e-10)
    assert np.all((out.raw >= -1) & (out.raw <= 1))
    with pytest.raises(AnalyticsError):
        caam_correlation_matrix(recs[:1])


def test_gt_correlation():
    r = np.random.default_rng(3)
    R = SCALE_MIN + r.random((30, 9)) * (SCALE_MAX - SCALE_MIN)
    R[:, 1] = 1 + 0.5 * (R[:, 0] - 1)  # perfectly linear with subtlety (stays in scale)
    R[:, 2] = 3.0  # constant column
    smp = [sample(row, str(i)) for i, row in enumerate(R)]
    g = gt_correlation_matrix(smp)
    assert g[0, 0] == 1.0 and g[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert np.isnan(g[2, 0]) and np.isnan(g[2, 2])
    for i in (0, 3, 5):
        for j in (4, 7, 8):
            assert g[i, j] == pytest.approx(abs(_pearson_oracle(R[:, i], R[:, j])), abs=1e-10)
    np.testing.assert_array_equal(np.nan_to_num(g), np.nan_to_num(g.T))
    with pytest.raises(AnalyticsError):
        gt_correlation_matrix(smp[:1])


def test_interobserver_variation():
    agree = sample(np.full(9, 3.0), "a", np.full((2, 9), 3.0))
    assert np.all(interobserver_variation([agree]) == 0)
    raters = np.full((2, 9), 3.0)
    raters[:, 0] = [1.0, 3.0]
    ib = interobserver_variation([sample(raters.mean(axis=0), "b", raters)])
    assert ib[0] == 2.0
    three = np.array([[1.0] * 9, [2.0] * 9, [4.0] * 9])
    ib3 = interobserver_variation([sample(three.mean(axis=0), "c", three)])
    assert ib3[0] == pytest.approx((1 + 3 + 2) / 3)
    assert interobserver_variation([sample(np.full(9, 3.0))]) is None
    pooled = interobserver_variation([agree, sample(raters.mean(axis=0), "b", raters)])
    assert pooled[0] == 1.0


# --------------------------------------------------------------------------
# exporters


def test_csv_round_trips(tmp_path):
    r = np.random.default_rng(4)
    recs = [record(r.random(9), f"id{i}") for i in range(5)]
    smp = [sample(SCALE_MIN + r.random(9) * (SCALE_MAX - SCALE_MIN), f"id{i}") for i in range(5)]
    rep = report_from_records(recs, smp)
    write_eval_csv(rep, tmp_path / "eval.csv")
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "attribute,mae" and len(lines) == 11 and lines[-1].startswith("mean,")
    assert all(len(line.split(",")[1].split(".")[1]) == 6 for line in lines[1:])
    back = read_eval_csv(tmp_path / "eval.csv")
    assert back["mean"] == pytest.approx(rep.mean_mae, abs=5e-7)
    write_errors_csv(rep, tmp_path / "errors.csv")
    er = read_errors_csv(tmp_path / "errors.csv")
    assert er.ids == rep.ids
    np.testing.assert_array_equal(er.abs_errors, rep.abs_errors)


def test_attn_json_schema_and_purity(tmp_path):
    samples = synth_generate(5, seed=6, rater_count=3)
    model = Model.create(ModelConfig(channel_preset="tiny", attention_hidden=16, head_hidden=16), seed=0)
    recs = collect_records(model, samples, compute_dataset_stats(samples))
    rep = attention_report(recs, samples)
    write_attn_json(rep, tmp_path / "a.json")
    write_attn_json(attention_report(recs, samples), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    obj = json.loads((tmp_path / "a.json").read_text())
    assert set(obj["sam"]) >= {"end_mean", "nonend_mean", "ratio", "per_nodule"}
    for key in ("caam_mean_raw", "caam_mean_display", "caam_corr_raw", "caam_corr_display", "gt_corr"):
        assert np.array(obj[key], dtype=float).shape == (9, 9), key
    assert len(obj["ib"]) == 9
    disp = np.array(obj["caam_mean_display"], dtype=float)
    np.testing.assert_allclose(np.abs(disp).sum(axis=1), 1.0, atol=1e-12)
