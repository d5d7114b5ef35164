"""Cohort I/O, splitting, standardisation, and ablation-view tests."""

import json
import logging

import numpy as np
import pytest

from cmwm import data
from cmwm.synthetic import SyntheticSpec, generate_synthetic_cohort


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def ckd_shaped_patient(pid="p1", n_periods=4) -> dict:
    rng = np.random.default_rng(hash(pid) % 2**32)
    return {
        "patient_id": pid,
        "static": rng.normal(size=52).tolist(),
        "periods": [
            {
                "x": rng.normal(size=9).tolist(),
                "a_struct": rng.integers(0, 2, size=62).astype(float).tolist(),
                "a_comm": rng.normal(size=256).tolist(),
                "tau": rng.normal(size=6).tolist(),
            }
            for _ in range(n_periods)
        ],
    }


class TestLoadCohort:
    def test_ckd_shaped_record_parses(self, tmp_path):
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(ckd_shaped_patient())])
        cohort, report = data.load_cohort(path)
        assert len(cohort) == 1
        assert (report.d_x, report.d_a_struct, report.d_a_comm, report.d_tau) == (9, 62, 256, 6)
        assert report.d_static_in == 52
        assert report.n_periods == 4

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(ckd_shaped_patient()), "{not json"])
        with pytest.raises(data.CohortError, match="line 2"):
            data.load_cohort(path)

    def test_non_binary_a_struct_rejected(self, tmp_path):
        bad = ckd_shaped_patient()
        bad["periods"][0]["a_struct"][3] = 2
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(bad)])
        with pytest.raises(data.CohortError, match="non-binary"):
            data.load_cohort(path)

    def test_missing_field_rejected(self, tmp_path):
        bad = ckd_shaped_patient()
        del bad["periods"][1]["tau"]
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(bad)])
        with pytest.raises(data.CohortError, match="tau"):
            data.load_cohort(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        a = ckd_shaped_patient("a")
        b = ckd_shaped_patient("b")
        b["periods"][0]["x"] = b["periods"][0]["x"][:5]
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(a), json.dumps(b)])
        with pytest.raises(data.CohortError, match="dims"):
            data.load_cohort(path)

    def test_zero_periods_rejected(self, tmp_path):
        bad = ckd_shaped_patient()
        bad["periods"] = []
        path = tmp_path / "cohort.jsonl"
        write_lines(path, [json.dumps(bad)])
        with pytest.raises(data.CohortError, match="period"):
            data.load_cohort(path)

    def test_empty_file_warns(self, tmp_path, caplog):
        path = tmp_path / "cohort.jsonl"
        path.write_text("", encoding="utf-8")
        with caplog.at_level(logging.WARNING):
            cohort, report = data.load_cohort(path)
        assert cohort == []
        assert report.n_patients == 0
        assert any("no patients" in r.message for r in caplog.records)

    def test_round_trip_lossless(self, tmp_path):
        spec = SyntheticSpec(n_patients=5, seed=3)
        cohort, _ = generate_synthetic_cohort(spec)
        path = tmp_path / "cohort.jsonl"
        data.save_cohort(path, cohort)
        loaded, _ = data.load_cohort(path)
        assert len(loaded) == len(cohort)
        for a, b in zip(cohort, loaded):
            assert a.patient_id == b.patient_id
            np.testing.assert_array_equal(a.static_raw, b.static_raw)
            for pa, pb in zip(a.periods, b.periods):
                np.testing.assert_array_equal(pa.x, pb.x)
                np.testing.assert_array_equal(pa.a_struct, pb.a_struct)
                np.testing.assert_array_equal(pa.a_comm, pb.a_comm)
                np.testing.assert_array_equal(pa.tau, pb.tau)


def tiny_cohort(n=10, seed=0):
    cohort, _ = generate_synthetic_cohort(SyntheticSpec(n_patients=n, seed=seed))
    return cohort


class TestSplit:
    def test_reference_split_sizes(self):
        cohort = [data.PatientRecord(str(i), np.zeros(2), [
            data.PeriodRecord(np.zeros(2), np.zeros(1), np.zeros(1), np.zeros(1))
        ]) for i in range(2232)]
        train, val, test = data.split_patients(cohort, (0.7, 0.15, 0.15), seed=1)
        assert (len(train), len(val), len(test)) == (1562, 334, 336)

    def test_partition(self):
        cohort = tiny_cohort(23)
        train, val, test = data.split_patients(cohort, seed=4)
        ids = [p.patient_id for p in train + val + test]
        assert sorted(ids) == sorted(p.patient_id for p in cohort)
        assert len(set(ids)) == len(ids)

    def test_deterministic(self):
        cohort = tiny_cohort(17)
        a = data.split_patients(cohort, seed=9)
        b = data.split_patients(cohort, seed=9)
        for sa, sb in zip(a, b):
            assert [p.patient_id for p in sa] == [p.patient_id for p in sb]

    def test_fraction_validation(self):
        cohort = tiny_cohort(4)
        with pytest.raises(ValueError):
            data.split_patients(cohort, (0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            data.split_patients(cohort, (0.9, 0.2, -0.1))


class TestStandardizer:
    def test_train_target_zero_mean_unit_std(self):
        cohort = tiny_cohort(30)
        stdzr = data.fit_standardizer(cohort)
        ys = np.concatenate([p.stacked()["x"] for p in cohort])[:, data.TARGET_SLOT]
        ys_std = stdzr.std_y(ys)
        assert abs(ys_std.mean()) < 1e-9
        assert abs(ys_std.std() - 1.0) < 1e-9

    def test_round_trip_identity(self):
        cohort = tiny_cohort(8)
        stdzr = data.fit_standardizer(cohort)
        x = cohort[0].stacked()["x"]
        np.testing.assert_allclose(stdzr.destd_x(stdzr.std_x(x)), x, atol=1e-12)
        tau = cohort[0].stacked()["tau"]
        np.testing.assert_allclose(
            stdzr.std_tau(tau) * stdzr.tau_std + stdzr.tau_mean, tau, atol=1e-12
        )
        y = 57.3
        assert stdzr.destd_y(stdzr.std_y(y)) == pytest.approx(y, abs=1e-12)

    def test_constant_feature_flagged(self, caplog):
        periods = [
            data.PeriodRecord(np.array([float(i), 5.0]), np.zeros(1), np.zeros(1),
                              np.array([float(i)]))
            for i in range(4)
        ]
        cohort = [data.PatientRecord("p", np.zeros(2), periods)]
        with caplog.at_level(logging.WARNING):
            stdzr = data.fit_standardizer(cohort)
        assert stdzr.x_std[1] == 1.0
        assert any("zero variance" in r.message for r in caplog.records)

    def test_val_not_self_standardised(self):
        train = tiny_cohort(25, seed=1)
        val = tiny_cohort(25, seed=99)
        stdzr = data.fit_standardizer(train)
        # shift the val targets so its own stats clearly differ from train's
        for p in val:
            for period in p.periods:
                period.x[data.TARGET_SLOT] += 30.0
        ys_val = np.concatenate([p.stacked()["x"] for p in val])[:, data.TARGET_SLOT]
        ys_val_std = stdzr.std_y(ys_val)
        assert abs(ys_val_std.mean()) > 0.5

    def test_empty_train_rejected(self):
        with pytest.raises(data.CohortError):
            data.fit_standardizer([])

    def test_arrays_round_trip(self):
        stdzr = data.fit_standardizer(tiny_cohort(5))
        back = data.Standardizer.from_arrays(stdzr.to_arrays())
        np.testing.assert_array_equal(back.x_mean, stdzr.x_mean)
        np.testing.assert_array_equal(back.tau_std, stdzr.tau_std)

    def test_identity_standardizer(self):
        stdzr = data.identity_standardizer(3, 2)
        x = np.array([[1.5, -2.0, 0.25]])
        np.testing.assert_array_equal(stdzr.std_x(x), x)
        assert stdzr.destd_y(4.25) == 4.25


class TestCommVariants:
    def test_full_is_unchanged(self):
        cohort = tiny_cohort(3)
        out = data.apply_comm_variant(cohort, "full")
        for a, b in zip(cohort, out):
            for pa, pb in zip(a.periods, b.periods):
                np.testing.assert_array_equal(pa.a_comm, pb.a_comm)

    def test_zero_variant(self):
        cohort = tiny_cohort(3)
        out = data.apply_comm_variant(cohort, "zero")
        for p in out:
            for period in p.periods:
                np.testing.assert_array_equal(period.a_comm, np.zeros_like(period.a_comm))

    def test_zero_variant_leaves_original_alone(self):
        cohort = tiny_cohort(2)
        before = [period.a_comm.copy() for p in cohort for period in p.periods]
        data.apply_comm_variant(cohort, "zero")
        after = [period.a_comm for p in cohort for period in p.periods]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_intensity_keeps_volume_only(self):
        vec = np.array([3.0, -4.0, 0.0, 0.0, 0.0])
        out = data.intensity_features(vec)
        assert out[0] == pytest.approx(5.0)
        assert out[1] == pytest.approx(np.abs(vec).mean())
        assert out[2] == 1.0
        np.testing.assert_array_equal(out[3:], np.zeros(2))

    def test_intensity_is_sign_blind(self):
        vec = np.random.default_rng(0).normal(size=8)
        np.testing.assert_allclose(
            data.intensity_features(vec), data.intensity_features(-vec), atol=1e-15
        )

    def test_intensity_zero_comm_marked_absent(self):
        out = data.intensity_features(np.zeros(6))
        np.testing.assert_array_equal(out, np.zeros(6))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            data.apply_comm_variant(tiny_cohort(1), "loud")
