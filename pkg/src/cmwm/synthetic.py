"""Synthetic cohort with known linear action-conditioned dynamics.

The target declines by a base step each period, shifted by structured
actions (fixed per-action effects) and by an adherence signal carried in
the communication vector: the expected step is

    base + sum_j effect_j * a_struct_j + adherence_effect * <a_comm, dir>

plus Gaussian process noise. a_comm encodes a latent per-period adherence
level along a fixed unit direction plus isotropic noise, and is the zero
vector for no-communication periods, so zeroing or de-semanticising the
communication channel destroys exactly the adherence term and nothing
else. The oracle returns noise-free expected trajectories under any
action sequence.

Non-target covariates are generated independently of the target path so
ground-truth future covariates cannot reveal future targets.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import PatientRecord, PeriodRecord


@dataclass(frozen=True)
class SyntheticSpec:
    n_patients: int = 200
    min_periods: int = 5
    max_periods: int = 10
    baseline_mean: float = 70.0
    baseline_std: float = 12.0
    base_step: float = -3.0
    action_effects: tuple[float, ...] = (2.0, -2.0)
    action_prob: float = 0.45
    adherence_effect: float = 2.0
    comm_scale: float = 1.0
    comm_noise_std: float = 0.1
    no_comm_prob: float = 0.333
    noise_std: float = 2.0
    missing_prob: float = 0.2
    d_x: int = 5
    d_a_comm: int = 16
    d_tau: int = 3
    d_static_in: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if not 2 <= self.min_periods <= self.max_periods:
            raise ValueError("need 2 <= min_periods <= max_periods")
        for name in ("action_prob", "no_comm_prob", "missing_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")
        if self.noise_std < 0 or self.comm_noise_std < 0 or self.baseline_std < 0:
            raise ValueError("noise stds must be nonnegative")
        if min(self.d_x, self.d_tau) < 1 or self.d_a_comm < 1 or self.d_static_in < 2:
            raise ValueError("dims too small")
        if len(self.action_effects) < 1:
            raise ValueError("need at least one structured action")

    @property
    def d_a_struct(self) -> int:
        return len(self.action_effects)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_effects"] = list(self.action_effects)
        return d

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        d = dict(d)
        d["action_effects"] = tuple(d["action_effects"])
        return cls(**d)


class SyntheticOracle:
    """Noise-free expected dynamics of the generator."""

    def __init__(self, base_step: float, action_effects: Sequence[float],
                 adherence_effect: float, signal_direction: np.ndarray):
        self.base_step = float(base_step)
        self.action_effects = np.asarray(action_effects, dtype=np.float64)
        self.adherence_effect = float(adherence_effect)
        self.signal_direction = np.asarray(signal_direction, dtype=np.float64)

    def step_mean(self, a_struct, a_comm) -> float:
        """Expected one-period change of the target under one action pair."""
        a_struct = np.asarray(a_struct, dtype=np.float64)
        a_comm = np.asarray(a_comm, dtype=np.float64)
        return float(
            self.base_step
            + self.action_effects @ a_struct
            + self.adherence_effect * (self.signal_direction @ a_comm)
        )

    def expected_trajectory(self, y_start: float, a_struct_seq, a_comm_seq) -> np.ndarray:
        """Expected targets after each action, starting from y_start."""
        if len(a_struct_seq) != len(a_comm_seq):
            raise ValueError("action sequences must have equal length")
        out = []
        y = float(y_start)
        for a_s, a_c in zip(a_struct_seq, a_comm_seq):
            y += self.step_mean(a_s, a_c)
            out.append(y)
        return np.array(out)

    def expected_future(self, patient: PatientRecord, c: int) -> np.ndarray:
        """Expected post-context trajectory of a generated patient under its
        recorded actions. The action taken in period t drives the step into
        period t+1, so periods c..T-1 are driven by actions c-1..T-2."""
        driving = patient.periods[c - 1 : patient.n_periods - 1]
        return self.expected_trajectory(
            patient.periods[c - 1].y_raw,
            [p.a_struct for p in driving],
            [p.a_comm for p in driving],
        )

    def to_json(self) -> str:
        return json.dumps({
            "base_step": self.base_step,
            "action_effects": self.action_effects.tolist(),
            "adherence_effect": self.adherence_effect,
            "signal_direction": self.signal_direction.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticOracle":
        d = json.loads(text)
        return cls(d["base_step"], d["action_effects"], d["adherence_effect"],
                   np.asarray(d["signal_direction"]))


def _resize(values: Sequence[float], dim: int) -> np.ndarray:
    out = np.zeros(dim)
    k = min(dim, len(values))
    out[:k] = np.asarray(values, dtype=np.float64)[:k]
    return out


def generate_synthetic_cohort(spec: SyntheticSpec) -> tuple[list[PatientRecord], SyntheticOracle]:
    rng = np.random.default_rng(spec.seed)
    direction = rng.standard_normal(spec.d_a_comm)
    direction /= np.linalg.norm(direction)
    oracle = SyntheticOracle(spec.base_step, spec.action_effects,
                             spec.adherence_effect, direction)
    n_categories = spec.d_static_in - 2
    patients = []
    for i in range(spec.n_patients):
        n_periods = int(rng.integers(spec.min_periods, spec.max_periods + 1))
        static = np.zeros(spec.d_static_in)
        static[int(rng.integers(0, 2))] = 1.0
        if n_categories > 0:
            static[2 + int(rng.integers(0, n_categories))] = 1.0
        y = float(np.clip(rng.normal(spec.baseline_mean, spec.baseline_std), 20.0, 120.0))
        biomarker = float(rng.normal())
        periods = []
        for t in range(n_periods):
            a_struct = (rng.random(spec.d_a_struct) < spec.action_prob).astype(np.float64)
            if rng.random() < spec.no_comm_prob:
                a_comm = np.zeros(spec.d_a_comm)
            else:
                adherence = rng.uniform(-1.0, 1.0)
                a_comm = (spec.comm_scale * adherence * direction
                          + spec.comm_noise_std * rng.standard_normal(spec.d_a_comm))
            missing = rng.random() < spec.missing_prob
            cov_value = 0.0 if missing else float(rng.normal(1.0, 0.5))
            x = _resize(
                [y, biomarker, np.sin(2.0 * np.pi * t / 7.0), cov_value,
                 1.0 if missing else 0.0],
                spec.d_x,
            )
            tau = _resize(
                [float(t), np.sin(2.0 * np.pi * t / 6.0), np.cos(2.0 * np.pi * t / 6.0)],
                spec.d_tau,
            )
            periods.append(PeriodRecord(x=x, a_struct=a_struct, a_comm=a_comm, tau=tau))
            y += oracle.step_mean(a_struct, a_comm) + spec.noise_std * rng.standard_normal()
            biomarker = 0.9 * biomarker + 0.3 * rng.standard_normal()
        patients.append(PatientRecord(f"syn-{i:04d}", static, periods))
    return patients, oracle
