"""Read-only HTTP service for counterfactual what-if rollouts.

Serves a trained checkpoint plus a cohort file: list patients, fetch one
patient's history, and roll out a scenario twice (recorded actions vs.
edited actions) so a client can compare the two trajectories. Action
edits may flip structured-action bits, replace the period's
communication (raw text, embedded server-side, or a precomputed vector),
or override time covariates. Everything is deterministic: identical
requests against the same checkpoint produce identical responses.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

from . import __version__
from . import model as mdl
from . import rollout as ro
from .data import PatientRecord, Standardizer, load_cohort
from .embedding import (EmbeddingError, EmbeddingProvider,
                        HashEmbeddingProvider, HttpEmbeddingProvider,
                        ENDPOINT_ENV, embed_transcript)

log = logging.getLogger(__name__)

CHECKPOINT_ENV = "CMWM_CHECKPOINT"
COHORT_ENV = "CMWM_COHORT"
LABELS_ENV = "CMWM_ACTION_LABELS"
PORT_ENV = "PORT"
DEFAULT_PORT = 8000


class AnchorSettings(BaseModel):
    enabled: bool = False
    weight: float = Field(default=1.0, ge=0.0, le=1.0)
    jump_cap: float = Field(default=5.0, gt=0.0)
    trend_window: int = Field(default=3, ge=1)


class PeriodEdit(BaseModel):
    """Changes to one forecast period's inputs; unspecified fields keep
    the patient's recorded values."""

    period: int
    set_actions: list[int] = Field(default_factory=list)
    clear_actions: list[int] = Field(default_factory=list)
    comm_text: str | None = None
    comm_embedding: list[float] | None = None
    tau: list[float] | None = None


class Scenario(BaseModel):
    patient_id: str
    context: int | None = None
    edits: list[PeriodEdit] = Field(default_factory=list)
    anchor: AnchorSettings = Field(default_factory=AnchorSettings)


@dataclass
class ServiceState:
    params: mdl.ModelParams
    stdzr: Standardizer
    cohort: list[PatientRecord]
    action_labels: list[str]
    meta: dict = field(default_factory=dict)
    loss_weights: dict = field(default_factory=dict)
    provider: EmbeddingProvider = field(default_factory=HashEmbeddingProvider)
    feedback_clip: tuple[float, float] | None = (1.0, 200.0)

    def __post_init__(self):
        self.by_id = {p.patient_id: p for p in self.cohort}
        if len(self.by_id) != len(self.cohort):
            raise ValueError("cohort contains duplicate patient ids")
        if len(self.action_labels) != self.params.cfg.d_a_struct:
            raise ValueError(
                f"{len(self.action_labels)} action labels for "
                f"{self.params.cfg.d_a_struct} structured actions")


def default_action_labels(n: int) -> list[str]:
    return [f"action_{i}" for i in range(n)]


def build_state(checkpoint_path, cohort_path, labels_path=None,
                provider: EmbeddingProvider | None = None) -> ServiceState:
    """Load checkpoint + cohort from disk and cross-check their shapes."""
    ckpt = mdl.load_checkpoint(checkpoint_path)
    stdzr = Standardizer.from_arrays(ckpt.norm_stats)
    cohort, report = load_cohort(cohort_path)
    cfg = ckpt.cfg
    dims = (report.d_x, report.d_a_struct, report.d_a_comm,
            report.d_tau, report.d_static_in)
    expected = (cfg.d_x, cfg.d_a_struct, cfg.d_a_comm, cfg.d_tau, cfg.d_static_in)
    if cohort and dims != expected:
        raise ValueError(f"cohort dims {dims} do not match checkpoint dims {expected}")
    if labels_path is not None:
        with open(labels_path, "r", encoding="utf-8") as f:
            labels = json.load(f)
        if (not isinstance(labels, list)
                or not all(isinstance(v, str) for v in labels)):
            raise ValueError("action labels file must hold a JSON list of strings")
    else:
        labels = default_action_labels(cfg.d_a_struct)
    return ServiceState(
        params=ckpt.params, stdzr=stdzr, cohort=cohort, action_labels=labels,
        meta=ckpt.meta, loss_weights=ckpt.loss_weights,
        provider=provider or HashEmbeddingProvider())


def state_from_env() -> ServiceState:
    checkpoint = os.environ.get(CHECKPOINT_ENV)
    cohort = os.environ.get(COHORT_ENV)
    if not checkpoint or not cohort:
        raise ValueError(f"{CHECKPOINT_ENV} and {COHORT_ENV} must both be set")
    provider: EmbeddingProvider
    if os.environ.get(ENDPOINT_ENV):
        provider = HttpEmbeddingProvider()
    else:
        provider = HashEmbeddingProvider()
    return build_state(checkpoint, cohort,
                       labels_path=os.environ.get(LABELS_ENV),
                       provider=provider)


def _bad_request(msg: str) -> HTTPException:
    return HTTPException(status_code=400, detail=msg)


def apply_edits(patient: PatientRecord, edits: list[PeriodEdit], c: int,
                state: ServiceState) -> PatientRecord:
    """Return a copy of the patient with forecast-period inputs replaced."""
    cfg = state.params.cfg
    edited = copy.deepcopy(patient)
    for edit in edits:
        if not c <= edit.period < patient.n_periods:
            raise _bad_request(
                f"edit period {edit.period} outside forecast range "
                f"[{c}, {patient.n_periods})")
        target = edited.periods[edit.period]
        for idx in edit.set_actions + edit.clear_actions:
            if not 0 <= idx < cfg.d_a_struct:
                raise _bad_request(f"action index {idx} out of range "
                                   f"[0, {cfg.d_a_struct})")
        for idx in edit.set_actions:
            target.a_struct[idx] = 1.0
        for idx in edit.clear_actions:
            target.a_struct[idx] = 0.0
        if edit.comm_text is not None and edit.comm_embedding is not None:
            raise _bad_request("supply comm_text or comm_embedding, not both")
        if edit.comm_text is not None:
            try:
                vector = embed_transcript([(0, edit.comm_text)],
                                          state.provider, cfg.d_a_comm)
            except EmbeddingError as e:
                raise HTTPException(status_code=502, detail=str(e)) from e
            target.a_comm[:] = vector
        elif edit.comm_embedding is not None:
            if len(edit.comm_embedding) != cfg.d_a_comm:
                raise _bad_request(
                    f"comm_embedding has {len(edit.comm_embedding)} values, "
                    f"expected {cfg.d_a_comm}")
            target.a_comm[:] = np.asarray(edit.comm_embedding, dtype=np.float64)
        if edit.tau is not None:
            if len(edit.tau) != cfg.d_tau:
                raise _bad_request(
                    f"tau has {len(edit.tau)} values, expected {cfg.d_tau}")
            target.tau[:] = np.asarray(edit.tau, dtype=np.float64)
    return edited


def handle_rollout(state: ServiceState, scenario: Scenario) -> dict:
    patient = state.by_id.get(scenario.patient_id)
    if patient is None:
        raise HTTPException(status_code=404,
                            detail=f"unknown patient {scenario.patient_id!r}")
    c = scenario.context
    if c is None:
        c = max(3, patient.n_periods // 2)
    if not 1 <= c < patient.n_periods:
        raise _bad_request(
            f"context {c} out of range [1, {patient.n_periods}) for "
            f"patient {scenario.patient_id!r}")
    edited = apply_edits(patient, scenario.edits, c, state)
    rcfg = ro.RolloutConfig(
        protocol="fixed", fixed_context=c,
        anchor_enabled=scenario.anchor.enabled,
        anchor_weight=scenario.anchor.weight,
        anchor_jump_cap=scenario.anchor.jump_cap,
        trend_window=scenario.anchor.trend_window,
        feedback_clip=state.feedback_clip)
    baseline = ro.rollout(state.params, state.stdzr, patient, c, rcfg)
    counterfactual = ro.rollout(state.params, state.stdzr, edited, c, rcfg)
    return {
        "patient_id": patient.patient_id,
        "context": c,
        "periods": list(range(c, patient.n_periods)),
        "baseline": list(baseline.y_hat),
        "counterfactual": list(counterfactual.y_hat),
        "difference": [cf - b for cf, b in zip(counterfactual.y_hat, baseline.y_hat)],
        "observed": list(baseline.y_true),
        "anchored_first": baseline.anchored_first,
    }


def patient_summary(patient: PatientRecord) -> dict:
    targets = patient.targets_raw()
    return {
        "patient_id": patient.patient_id,
        "n_periods": patient.n_periods,
        "y_first": float(targets[0]),
        "y_last": float(targets[-1]),
    }


def patient_detail(patient: PatientRecord, state: ServiceState) -> dict:
    periods = []
    for t, period in enumerate(patient.periods):
        periods.append({
            "period": t,
            "y": period.y_raw,
            "x": period.x.tolist(),
            "a_struct": period.a_struct.tolist(),
            "tau": period.tau.tolist(),
            "comm_norm": float(np.linalg.norm(period.a_comm)),
        })
    return {
        "patient_id": patient.patient_id,
        "n_periods": patient.n_periods,
        "static": patient.static_raw.tolist(),
        "action_labels": state.action_labels,
        "periods": periods,
    }


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="what-if rollout service", version=__version__)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"])

    @app.get("/v1/patients")
    def list_patients() -> dict:
        return {"patients": [patient_summary(p) for p in state.cohort]}

    @app.get("/v1/patients/{patient_id}")
    def get_patient(patient_id: str) -> dict:
        patient = state.by_id.get(patient_id)
        if patient is None:
            raise HTTPException(status_code=404,
                                detail=f"unknown patient {patient_id!r}")
        return patient_detail(patient, state)

    @app.get("/v1/model")
    def model_info() -> dict:
        return {
            "version": __version__,
            "config": state.params.cfg.to_dict(),
            "loss_weights": state.loss_weights,
            "param_count": state.params.count(),
            "n_patients": len(state.cohort),
            "meta": state.meta,
        }

    @app.post("/v1/rollout")
    def rollout_scenario(scenario: Scenario) -> dict:
        return handle_rollout(state, scenario)

    return app


def run_server(state: ServiceState, port: int | None = None) -> None:
    import uvicorn

    if port is None:
        port = int(os.environ.get(PORT_ENV, DEFAULT_PORT))
    log.info("serving %d patients on port %d", len(state.cohort), port)
    uvicorn.run(create_app(state), host="0.0.0.0", port=port)
