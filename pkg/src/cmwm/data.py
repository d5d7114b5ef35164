"""Cohort records, JSONL ingestion, patient-level splits, and train-stat
standardisation.

A cohort is a list of patients; each patient carries static covariates and
an ordered list of periods. The target observable lives in slot 0 of every
period's state vector by convention; everything downstream (feedback
write-back, metrics, anchoring) relies on that slot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

TARGET_SLOT = 0

COMM_VARIANTS = ("full", "zero", "intensity")


class CohortError(ValueError):
    """Malformed cohort file or record."""


@dataclass
class PeriodRecord:
    x: np.ndarray
    a_struct: np.ndarray
    a_comm: np.ndarray
    tau: np.ndarray

    @property
    def y_raw(self) -> float:
        return float(self.x[TARGET_SLOT])


@dataclass
class PatientRecord:
    patient_id: str
    static_raw: np.ndarray
    periods: list[PeriodRecord]

    @property
    def n_periods(self) -> int:
        return len(self.periods)

    def targets_raw(self) -> np.ndarray:
        return np.array([p.y_raw for p in self.periods])

    def stacked(self) -> dict[str, np.ndarray]:
        """Period fields stacked into (T, dim) arrays."""
        return {
            "x": np.stack([p.x for p in self.periods]),
            "a_struct": np.stack([p.a_struct for p in self.periods]),
            "a_comm": np.stack([p.a_comm for p in self.periods]),
            "tau": np.stack([p.tau for p in self.periods]),
        }


@dataclass(frozen=True)
class SchemaReport:
    n_patients: int
    n_periods: int
    d_x: int
    d_a_struct: int
    d_a_comm: int
    d_tau: int
    d_static_in: int


def _vector(raw, what: str, line_no: int) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise CohortError(f"line {line_no}: {what} is not numeric: {e}") from None
    if arr.ndim != 1:
        raise CohortError(f"line {line_no}: {what} must be a flat list")
    return arr


def _parse_patient(obj: dict, line_no: int) -> PatientRecord:
    try:
        patient_id = str(obj["patient_id"])
        static_raw = _vector(obj["static"], "static", line_no)
        raw_periods = obj["periods"]
    except KeyError as e:
        raise CohortError(f"line {line_no}: missing field {e}") from None
    if not isinstance(raw_periods, list) or len(raw_periods) == 0:
        raise CohortError(f"line {line_no}: patient {patient_id} needs >= 1 period")
    periods = []
    for j, rp in enumerate(raw_periods):
        try:
            period = PeriodRecord(
                x=_vector(rp["x"], f"periods[{j}].x", line_no),
                a_struct=_vector(rp["a_struct"], f"periods[{j}].a_struct", line_no),
                a_comm=_vector(rp["a_comm"], f"periods[{j}].a_comm", line_no),
                tau=_vector(rp["tau"], f"periods[{j}].tau", line_no),
            )
        except KeyError as e:
            raise CohortError(f"line {line_no}: periods[{j}] missing field {e}") from None
        bad = ~np.isin(period.a_struct, (0.0, 1.0))
        if np.any(bad):
            raise CohortError(
                f"line {line_no}: periods[{j}].a_struct has non-binary entries "
                f"{period.a_struct[bad][:3].tolist()}"
            )
        periods.append(period)
    return PatientRecord(patient_id, static_raw, periods)


def _dims_of(patient: PatientRecord) -> tuple[int, int, int, int, int]:
    p0 = patient.periods[0]
    return (len(p0.x), len(p0.a_struct), len(p0.a_comm), len(p0.tau),
            len(patient.static_raw))


def load_cohort(path) -> tuple[list[PatientRecord], SchemaReport]:
    """Read one patient per JSONL line; validate domains and dim consistency."""
    patients: list[PatientRecord] = []
    dims: tuple[int, int, int, int, int] | None = None
    n_periods = 0
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CohortError(f"line {line_no}: invalid JSON: {e}") from None
            patient = _parse_patient(obj, line_no)
            for j, period in enumerate(patient.periods):
                pdims = (len(period.x), len(period.a_struct), len(period.a_comm),
                         len(period.tau), len(patient.static_raw))
                if dims is None:
                    dims = pdims
                elif pdims != dims:
                    raise CohortError(
                        f"line {line_no}: periods[{j}] dims {pdims} != cohort dims {dims}"
                    )
            n_periods += patient.n_periods
            patients.append(patient)
    if not patients:
        log.warning("cohort file %s contains no patients", path)
        dims = (0, 0, 0, 0, 0)
    report = SchemaReport(len(patients), n_periods, *dims)
    return patients, report


def patient_to_dict(patient: PatientRecord) -> dict:
    return {
        "patient_id": patient.patient_id,
        "static": patient.static_raw.tolist(),
        "periods": [
            {
                "x": p.x.tolist(),
                "a_struct": p.a_struct.tolist(),
                "a_comm": p.a_comm.tolist(),
                "tau": p.tau.tolist(),
            }
            for p in patient.periods
        ],
    }


def save_cohort(path, cohort: Iterable[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for patient in cohort:
            f.write(json.dumps(patient_to_dict(patient)) + "\n")


def split_patients(cohort: Sequence[PatientRecord],
                   fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
                   seed: int = 0) -> tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]:
    """Disjoint patient-level train/val/test split, deterministic in the seed."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    order = np.random.default_rng(seed).permutation(len(cohort))
    n_train = int(np.floor(fractions[0] * len(cohort)))
    n_val = int(np.floor(fractions[1] * len(cohort)))
    train = [cohort[i] for i in order[:n_train]]
    val = [cohort[i] for i in order[n_train:n_train + n_val]]
    test = [cohort[i] for i in order[n_train + n_val:]]
    return train, val, test


@dataclass
class Standardizer:
    """Per-feature location/scale for x and tau, fitted on the train split.

    The target observable's stats are the x stats at the target slot.
    Zero-variance features keep std 1 so standardisation stays invertible.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    tau_mean: np.ndarray
    tau_std: np.ndarray

    @property
    def y_mean(self) -> float:
        return float(self.x_mean[TARGET_SLOT])

    @property
    def y_std(self) -> float:
        return float(self.x_std[TARGET_SLOT])

    def std_x(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std

    def destd_x(self, x_std) -> np.ndarray:
        return np.asarray(x_std, dtype=np.float64) * self.x_std + self.x_mean

    def std_tau(self, tau) -> np.ndarray:
        return (np.asarray(tau, dtype=np.float64) - self.tau_mean) / self.tau_std

    def std_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def destd_y(self, y_std):
        return np.asarray(y_std, dtype=np.float64) * self.y_std + self.y_mean

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "x_mean": self.x_mean, "x_std": self.x_std,
            "tau_mean": self.tau_mean, "tau_std": self.tau_std,
        }

    @classmethod
    def from_arrays(cls, arrays) -> "Standardizer":
        return cls(
            x_mean=np.asarray(arrays["x_mean"], dtype=np.float64),
            x_std=np.asarray(arrays["x_std"], dtype=np.float64),
            tau_mean=np.asarray(arrays["tau_mean"], dtype=np.float64),
            tau_std=np.asarray(arrays["tau_std"], dtype=np.float64),
        )


def _safe_stats(values: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    flat = std == 0.0
    if np.any(flat):
        log.warning("%s features %s have zero variance; std forced to 1",
                    what, np.flatnonzero(flat).tolist())
        std = np.where(flat, 1.0, std)
    return mean, std


def fit_standardizer(train: Sequence[PatientRecord]) -> Standardizer:
    """Pooled per-feature stats over every train patient-period."""
    if not train:
        raise CohortError("cannot fit a standardizer on an empty train split")
    xs = np.concatenate([p.stacked()["x"] for p in train])
    taus = np.concatenate([p.stacked()["tau"] for p in train])
    x_mean, x_std = _safe_stats(xs, "state")
    tau_mean, tau_std = _safe_stats(taus, "tau")
    return Standardizer(x_mean, x_std, tau_mean, tau_std)


def identity_standardizer(d_x: int, d_tau: int) -> Standardizer:
    """Stats that make standardisation the identity map (useful in tests)."""
    return Standardizer(np.zeros(d_x), np.ones(d_x), np.zeros(d_tau), np.ones(d_tau))


def standardized_arrays(patient: PatientRecord, stdzr: Standardizer) -> dict[str, np.ndarray]:
    """Model-ready views of one patient: standardised x/tau, raw actions,
    the raw target series, and the static row shaped (1, d)."""
    stacked = patient.stacked()
    return {
        "static": patient.static_raw.reshape(1, -1),
        "x_std": stdzr.std_x(stacked["x"]),
        "tau_std": stdzr.std_tau(stacked["tau"]),
        "a_struct": stacked["a_struct"],
        "a_comm": stacked["a_comm"],
        "y_raw": stacked["x"][:, TARGET_SLOT],
    }


def intensity_features(a_comm: np.ndarray) -> np.ndarray:
    """Volume-only summary of a communication vector: keeps how much was
    communicated, discards direction/content. Same output dim as input."""
    out = np.zeros_like(a_comm)
    norm = float(np.linalg.norm(a_comm))
    stats = (norm, float(np.abs(a_comm).mean()), 1.0 if norm > 0 else 0.0)
    k = min(3, len(a_comm))
    out[:k] = stats[:k]
    return out


def apply_comm_variant(cohort: Sequence[PatientRecord], variant: str) -> list[PatientRecord]:
    """Cohort view for the action-channel ablations.

    full: untouched; zero: communication vectors zeroed; intensity:
    communication vectors replaced by volume-only features.
    """
    if variant not in COMM_VARIANTS:
        raise ValueError(f"unknown comm variant {variant!r}; options {COMM_VARIANTS}")
    if variant == "full":
        return list(cohort)
    out = []
    for patient in cohort:
        periods = []
        for p in patient.periods:
            if variant == "zero":
                a_comm = np.zeros_like(p.a_comm)
            else:
                a_comm = intensity_features(p.a_comm)
            periods.append(PeriodRecord(p.x, p.a_struct, a_comm, p.tau))
        out.append(PatientRecord(patient.patient_id, patient.static_raw, periods))
    return out
