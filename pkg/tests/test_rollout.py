"""Rollout and evaluation tests: protocol arithmetic, anchoring, the
closed-loop write-back rule, baselines, and pooled metrics."""

import copy
import csv
import math

import numpy as np
import pytest

import cmwm.diffcore as dc
import cmwm.model as mdl
import cmwm.rollout as ro
from cmwm.data import (PatientRecord, PeriodRecord, fit_standardizer,
                       identity_standardizer)
from cmwm.synthetic import SyntheticSpec, generate_synthetic_cohort

DIMS = dict(d_x=4, d_a_comm=3, d_tau=3, d_static_in=3)


def make_cohort(n_patients=8, seed=11, **kw):
    spec = SyntheticSpec(n_patients=n_patients, min_periods=6, max_periods=9,
                         seed=seed, **DIMS, **kw)
    return generate_synthetic_cohort(spec)[0], spec


def make_model(spec, seed=1):
    cfg = mdl.ModelConfig(d_x=spec.d_x, d_a_struct=spec.d_a_struct,
                          d_a_comm=spec.d_a_comm, d_tau=spec.d_tau,
                          d_static_in=spec.d_static_in,
                          d_b=4, d_z=6, d_u=5, d_h=8, dropout=0.0, seed=seed)
    return mdl.init_params(cfg)


def series_patient(targets, pid="p"):
    """Patient whose target series is given; other channels constant."""
    periods = [
        PeriodRecord(x=np.array([float(y), 1.0, 2.0, 3.0]),
                     a_struct=np.zeros(2), a_comm=np.zeros(3),
                     tau=np.array([float(t), 0.0, 1.0]))
        for t, y in enumerate(targets)
    ]
    return PatientRecord(pid, np.zeros(3), periods)


# ---------------------------------------------------------------------------
# config and protocol arithmetic


def test_config_validation():
    bad = [dict(protocol="weekly"), dict(fixed_context=0),
           dict(anchor_weight=-0.1), dict(anchor_weight=1.1),
           dict(anchor_jump_cap=0.0), dict(trend_window=0),
           dict(feedback_clip=(200.0, 1.0))]
    for kw in bad:
        with pytest.raises(ValueError):
            ro.RolloutConfig(**kw)


def test_dynamic50_context_formula():
    cfg = ro.RolloutConfig(protocol="dynamic50")
    expected = {5: 3, 6: 3, 7: 3, 8: 4, 9: 4, 10: 5, 11: 5, 12: 6}
    for t, c in expected.items():
        assert cfg.context_for(t) == c == max(3, t // 2)


def test_fixed_context():
    cfg = ro.RolloutConfig(protocol="fixed", fixed_context=4)
    assert cfg.context_for(5) == 4
    assert cfg.context_for(50) == 4


# ---------------------------------------------------------------------------
# metrics


def test_metrics_closed_form():
    summary = ro.metrics([(1.0, 0.0), (0.0, 3.0)])
    assert summary.n == 2
    assert summary.mae == pytest.approx(2.0, abs=1e-12)
    assert summary.rmse == pytest.approx(math.sqrt(5.0), abs=1e-12)


def test_metrics_zero_errors():
    summary = ro.metrics([(2.0, 2.0), (5.0, 5.0)])
    assert summary.mae == 0.0 and summary.rmse == 0.0


def test_metrics_empty_errors():
    with pytest.raises(ValueError):
        ro.metrics([])


def test_metrics_rmse_at_least_mae():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pairs = [(float(a), float(b)) for a, b in rng.normal(size=(12, 2))]
        s = ro.metrics(pairs)
        assert s.rmse >= s.mae >= 0.0


def test_metrics_order_independent():
    rng = np.random.default_rng(1)
    pairs = [(float(a), float(b)) for a, b in rng.normal(size=(50, 2))]
    shuffled = list(pairs)
    rng.shuffle(shuffled)
    assert ro.metrics(pairs) == ro.metrics(shuffled)


# ---------------------------------------------------------------------------
# first-step anchor


def test_anchor_alpha_zero_within_cap_is_identity():
    cfg = ro.RolloutConfig(anchor_weight=0.0, anchor_jump_cap=5.0)
    assert ro.anchor_first_step(49.7, [52.0, 50.0], cfg) == 49.7


def test_anchor_alpha_zero_clips_to_cap():
    cfg = ro.RolloutConfig(anchor_weight=0.0, anchor_jump_cap=5.0)
    assert ro.anchor_first_step(40.0, [60.0, 60.0, 60.0], cfg) == 55.0


def test_anchor_trend_extrapolation():
    cfg = ro.RolloutConfig(anchor_weight=1.0, anchor_jump_cap=5.0)
    assert ro.anchor_first_step(12.3, [50.0, 48.0], cfg) == pytest.approx(46.0)


def test_anchor_flat_history_holds_level():
    cfg = ro.RolloutConfig(anchor_weight=1.0, anchor_jump_cap=5.0)
    assert ro.anchor_first_step(40.0, [60.0, 60.0, 60.0], cfg) == pytest.approx(60.0)


def test_anchor_single_point_history():
    cfg = ro.RolloutConfig(anchor_weight=1.0, anchor_jump_cap=5.0)
    assert ro.anchor_first_step(10.0, [63.0], cfg) == pytest.approx(63.0)


def test_anchor_uses_last_trend_window_points():
    # changes within the window: 70->60 (-10), 60->58 (-2); mean -6
    cfg = ro.RolloutConfig(anchor_weight=1.0, anchor_jump_cap=50.0, trend_window=3)
    got = ro.anchor_first_step(0.0, [90.0, 70.0, 60.0, 58.0], cfg)
    assert got == pytest.approx(52.0)


def test_anchor_empty_history_errors():
    with pytest.raises(ValueError):
        ro.anchor_first_step(50.0, [], ro.RolloutConfig())


def test_anchor_cap_respected_always():
    rng = np.random.default_rng(2)
    cfg = ro.RolloutConfig(anchor_weight=0.6, anchor_jump_cap=5.0)
    for _ in range(200):
        history = list(rng.uniform(20, 120, size=rng.integers(1, 5)))
        y_hat = float(rng.uniform(-50, 250))
        out = ro.anchor_first_step(y_hat, history, cfg)
        assert abs(out - history[-1]) <= 5.0 + 1e-12


def test_anchor_blend_is_convex():
    cfg = ro.RolloutConfig(anchor_weight=0.25, anchor_jump_cap=1000.0)
    got = ro.anchor_first_step(40.0, [60.0, 60.0], cfg)
    assert got == pytest.approx(0.25 * 60.0 + 0.75 * 40.0)


# ---------------------------------------------------------------------------
# rollout


def test_rollout_horizon_count():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig()
    for patient in cohort[:4]:
        for c in (3, patient.n_periods - 1):
            result = ro.rollout(params, stdzr, patient, c, cfg)
            assert result.horizons == patient.n_periods - c
            assert len(result.y_true) == result.horizons
            assert result.c == c


def test_rollout_context_out_of_range():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    patient = cohort[0]
    for c in (0, patient.n_periods, patient.n_periods + 3):
        with pytest.raises(ValueError):
            ro.rollout(params, stdzr, patient, c, ro.RolloutConfig())


def test_rollout_never_reads_future_targets():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig(anchor_enabled=True)
    patient = cohort[0]
    c = 3
    mutated = copy.deepcopy(patient)
    for period in mutated.periods[c:]:
        period.x[0] -= 37.0
    res_a = ro.rollout(params, stdzr, patient, c, cfg)
    res_b = ro.rollout(params, stdzr, mutated, c, cfg)
    assert res_a.y_hat == res_b.y_hat
    assert res_a.y_true != res_b.y_true


def test_rollout_anchored_alpha_zero_large_cap_bit_exact():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    plain = ro.RolloutConfig(anchor_enabled=False)
    anchored = ro.RolloutConfig(anchor_enabled=True, anchor_weight=0.0,
                                anchor_jump_cap=1e9)
    for patient in cohort:
        c = plain.context_for(patient.n_periods)
        res_a = ro.rollout(params, stdzr, patient, c, plain)
        res_b = ro.rollout(params, stdzr, patient, c, anchored)
        assert res_a.y_hat == res_b.y_hat
        assert res_b.anchored_first and not res_a.anchored_first


def test_rollout_anchor_caps_first_jump():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig(anchor_enabled=True, anchor_weight=1.0,
                           anchor_jump_cap=5.0)
    for patient in cohort:
        c = cfg.context_for(patient.n_periods)
        result = ro.rollout(params, stdzr, patient, c, cfg)
        y_last = patient.targets_raw()[c - 1]
        assert abs(result.y_hat[0] - y_last) <= 5.0 + 1e-12


def test_rollout_feedback_clip_bounds_predictions():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig(feedback_clip=(60.0, 62.0))
    result = ro.rollout(params, stdzr, cohort[0], 3, cfg)
    assert all(60.0 <= v <= 62.0 for v in result.y_hat)


def test_rollout_model_emitting_last_fed_value_is_carry_forward(monkeypatch):
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = identity_standardizer(spec.d_x, spec.d_tau)
    last_seen = {}

    real_encode_state = mdl.encode_state

    def spy_encode_state(x_std, b, p, drop_rng=None):
        value = x_std.value if isinstance(x_std, dc.Tensor) else np.asarray(x_std)
        last_seen["y"] = float(value[0, 0])
        return real_encode_state(x_std, b, p, drop_rng)

    def echo_head(h, b, tau_std, p, drop_rng=None):
        y = dc.constant(np.array([[last_seen["y"]]]))
        z = dc.constant(np.zeros((1, p.cfg.d_z)))
        return y, z

    monkeypatch.setattr(ro.mdl, "encode_state", spy_encode_state)
    monkeypatch.setattr(ro.mdl, "predict_head", echo_head)

    patient = cohort[0]
    c = 4
    result = ro.rollout(params, stdzr, patient, c, ro.RolloutConfig(feedback_clip=None))
    baseline = ro.baseline_carry_forward(patient, c)
    assert result.y_hat == pytest.approx(baseline.y_hat, abs=1e-12)


# ---------------------------------------------------------------------------
# baselines


def test_carry_forward_constant_history():
    patient = series_patient([55.0] * 6)
    result = ro.baseline_carry_forward(patient, 3)
    assert result.y_hat == (55.0, 55.0, 55.0)


def test_linear_trend_collinear_history():
    patient = series_patient([60.0, 55.0, 50.0, 1.0, 2.0])
    result = ro.baseline_linear_trend(patient, 3)
    assert result.y_hat == pytest.approx([45.0, 40.0], abs=1e-9)
    assert result.y_true == (1.0, 2.0)


def test_linear_trend_constant_history():
    patient = series_patient([42.0] * 5)
    result = ro.baseline_linear_trend(patient, 3)
    assert result.y_hat == pytest.approx([42.0, 42.0], abs=1e-9)


def test_linear_trend_least_squares_fit():
    # y = (2, 0, 4, 2) at t = 0..3: slope 0.4, intercept 1.4
    patient = series_patient([2.0, 0.0, 4.0, 2.0, 9.0, 9.0])
    result = ro.baseline_linear_trend(patient, 4)
    assert result.y_hat == pytest.approx([1.4 + 0.4 * 4, 1.4 + 0.4 * 5], abs=1e-9)


def test_baselines_context_validation():
    patient = series_patient([50.0] * 4)
    with pytest.raises(ValueError):
        ro.baseline_carry_forward(patient, 4)
    with pytest.raises(ValueError):
        ro.baseline_linear_trend(patient, 0)


def test_carry_forward_on_declining_cohort_has_positive_mae():
    cohort, _ = make_cohort(n_patients=12)
    report = ro.evaluate_baseline("carry_forward", cohort, ro.RolloutConfig())
    assert report.summary.mae > 0.0


# ---------------------------------------------------------------------------
# evaluate_protocol


def test_evaluate_protocol_skips_short_histories():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    short = series_patient([50.0, 49.0, 48.0], pid="short")
    report = ro.evaluate_protocol(params, stdzr, cohort + [short],
                                  ro.RolloutConfig())
    assert report.skipped_patients == ("short",)
    assert len(report.results) == len(cohort)


def test_evaluate_protocol_all_skipped_gives_no_summary():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    short = [series_patient([50.0, 49.0], pid=f"s{i}") for i in range(3)]
    report = ro.evaluate_protocol(params, stdzr, short, ro.RolloutConfig())
    assert report.summary is None
    assert report.results == ()
    assert len(report.skipped_patients) == 3


def test_evaluate_protocol_order_independent():
    cohort, spec = make_cohort(n_patients=10)
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig()
    fwd = ro.evaluate_protocol(params, stdzr, cohort, cfg)
    rev = ro.evaluate_protocol(params, stdzr, list(reversed(cohort)), cfg)
    assert fwd.summary == rev.summary


def test_evaluate_protocol_pools_all_points():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig()
    report = ro.evaluate_protocol(params, stdzr, cohort, cfg)
    expected_points = sum(p.n_periods - cfg.context_for(p.n_periods)
                          for p in cohort)
    assert report.summary.n == expected_points
    pairs = [(yh, yt) for r in report.results for yh, yt in zip(r.y_hat, r.y_true)]
    assert ro.metrics(pairs) == report.summary


def test_evaluate_protocol_fixed_context():
    cohort, spec = make_cohort()
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    cfg = ro.RolloutConfig(protocol="fixed", fixed_context=5)
    report = ro.evaluate_protocol(params, stdzr, cohort, cfg)
    assert all(r.c == 5 for r in report.results)
    skipped = {p.patient_id for p in cohort if p.n_periods <= 5}
    assert set(report.skipped_patients) == skipped


def test_evaluate_baseline_unknown_name():
    cohort, _ = make_cohort(n_patients=4)
    with pytest.raises(ValueError):
        ro.evaluate_baseline("gpt", cohort, ro.RolloutConfig())


def test_evaluate_baseline_matches_direct_calls():
    cohort, _ = make_cohort(n_patients=6)
    cfg = ro.RolloutConfig()
    report = ro.evaluate_baseline("linear_trend", cohort, cfg)
    for result, patient in zip(report.results, cohort):
        direct = ro.baseline_linear_trend(patient, cfg.context_for(patient.n_periods))
        assert result == direct


def test_report_to_dict_round_trip_shape():
    cohort, spec = make_cohort(n_patients=4)
    params = make_model(spec)
    stdzr = fit_standardizer(cohort)
    report = ro.evaluate_protocol(params, stdzr, cohort, ro.RolloutConfig())
    d = report.to_dict()
    assert d["protocol"] == "dynamic50"
    assert set(d["summary"]) == {"n", "mae", "rmse"}
    assert len(d["results"]) == len(report.results)
    assert d["results"][0]["patient_id"] == cohort[0].patient_id


def test_write_points_csv(tmp_path):
    patient = series_patient([60.0, 55.0, 50.0, 45.0, 40.0])
    result = ro.baseline_carry_forward(patient, 3)
    path = tmp_path / "points.csv"
    ro.write_points_csv(path, [result])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["patient_id", "period", "y_hat", "y_true"]
    assert len(rows) == 3
    assert rows[1] == ["p", "3", "50.0", "45.0"]
    assert rows[2] == ["p", "4", "50.0", "40.0"]
