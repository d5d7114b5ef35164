"""Rollout-prefix training.

Every history prefix of every patient becomes one training trajectory:
warm the recurrent state on the observed prefix, then predict forward for
up to the configured horizon, feeding each prediction back into the next
step's state exactly as deployment does. Per-step losses are aggregated
with a horizon-decay factor; the collapse regulariser sees the pooled
latents of the whole minibatch. Optimisation is AdamW with decoupled
decay and a global gradient-norm clip. Model selection tracks the
validation closed-loop MAE after every epoch (anchoring off).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import model as mdl
from . import objective as obj
from . import rollout as ro
from .data import (TARGET_SLOT, PatientRecord, Standardizer, fit_standardizer,
                   standardized_arrays)

log = logging.getLogger(__name__)

SIGREG_SCOPES = ("pooled", "encoded")


class TrainAbort(RuntimeError):
    """Non-finite loss; carries a diagnostic dump of the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    weight_decay: float = 8e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    c_min: int = 3
    max_horizon: int = 8
    horizon_decay: float = 0.7
    grad_clip_norm: float | None = 1.0
    sigreg_scope: str = "pooled"
    feedback_clip: tuple[float, float] | None = (1.0, 200.0)
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.max_horizon < 1:
            raise ValueError("max_horizon must be >= 1")
        if self.c_min < 1:
            raise ValueError("c_min must be >= 1")
        if not 0.0 < self.horizon_decay <= 1.0:
            raise ValueError("horizon_decay must be in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.sigreg_scope not in SIGREG_SCOPES:
            raise ValueError(f"sigreg_scope must be one of {SIGREG_SCOPES}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")
        if self.feedback_clip is not None and self.feedback_clip[0] >= self.feedback_clip[1]:
            raise ValueError("feedback_clip must be (low, high) with low < high")


@dataclass(frozen=True)
class PrefixSample:
    patient_index: int
    c: int
    h: int

    def __post_init__(self):
        if self.c < 1 or self.h < 1:
            raise ValueError("prefix sample needs c >= 1 and h >= 1")


def enumerate_rollout_prefixes(cohort: Sequence[PatientRecord],
                               cfg: TrainConfig) -> list[PrefixSample]:
    """One sample per (patient, prefix length c) with c in [c_min, T)."""
    samples = []
    for i, patient in enumerate(cohort):
        for c in range(cfg.c_min, patient.n_periods):
            h = min(cfg.max_horizon, patient.n_periods - c)
            samples.append(PrefixSample(i, c, h))
    return samples


# ---------------------------------------------------------------------------
# standardised per-patient arrays and (c, h) batch assembly


def standardize_cohort(cohort: Sequence[PatientRecord],
                       stdzr: Standardizer) -> list[dict[str, np.ndarray]]:
    return [standardized_arrays(p, stdzr) for p in cohort]


def build_batch(arrays: list[dict[str, np.ndarray]],
                samples: Sequence[PrefixSample]) -> dict:
    """Stack one (c, h) group of prefix samples into per-period matrices."""
    c = samples[0].c
    h = samples[0].h
    if any(s.c != c or s.h != h for s in samples):
        raise ValueError("batch mixes different (c, h) shapes")
    rows = [arrays[s.patient_index] for s in samples]
    span = c + h
    return {
        "c": c,
        "h": h,
        "n": len(rows),
        "patients": [s.patient_index for s in samples],
        "static": np.concatenate([r["static"] for r in rows]),
        "x_std": [np.stack([r["x_std"][t] for r in rows]) for t in range(span)],
        "tau_std": [np.stack([r["tau_std"][t] for r in rows]) for t in range(span)],
        "a_struct": [np.stack([r["a_struct"][t] for r in rows]) for t in range(span)],
        "a_comm": [np.stack([r["a_comm"][t] for r in rows]) for t in range(span)],
        "y_raw": np.stack([r["y_raw"][:span] for r in rows]),
    }


@dataclass
class StepTerms:
    y: dc.Tensor
    z: dc.Tensor
    slope: dc.Tensor
    cont: dc.Tensor
    jump: dc.Tensor


@dataclass
class UnrollResult:
    steps: list[StepTerms]
    encoded_latents: list[dc.Tensor]
    predicted_latents: list[dc.Tensor]
    latent_targets: list[np.ndarray] = field(default_factory=list)
    predictions: list[np.ndarray] = field(default_factory=list)
    fed_states: list[np.ndarray] = field(default_factory=list)


def unroll_training_trajectory(params: mdl.ModelParams, batch: dict,
                               stdzr: Standardizer, cfg: TrainConfig,
                               weights: obj.LossWeights,
                               drop_rng: np.random.Generator | None = None,
                               frozen_latent_targets: Sequence[np.ndarray] | None = None,
                               ) -> UnrollResult:
    """Closed-loop unroll of one (c, h) batch with per-step loss terms.

    Warm-up consumes the last min(c, context_len) observed periods with
    ground-truth states. Each prediction step k targets period c+k-1; its
    estimate is written into the target slot of that period's otherwise
    ground-truth state before the next transition. Actions and time
    covariates always come from ground truth. frozen_latent_targets, if
    given, replaces the latent-alignment targets (one array per step) so
    finite-difference checks see fixed targets; the arrays actually used
    are returned either way.
    """
    c, h, n = batch["c"], batch["h"], batch["n"]
    y_std_all = stdzr.std_y(batch["y_raw"])
    mu, sigma = stdzr.y_mean, stdzr.y_std

    b = mdl.encode_static(batch["static"], params)
    hidden = mdl.initial_hidden(params, n)
    encoded: list[dc.Tensor] = []
    predicted: list[dc.Tensor] = []
    targets_used: list[np.ndarray] = []
    warm = min(c, params.cfg.context_len)
    for t in range(c - warm, c):
        z = mdl.encode_state(batch["x_std"][t], b, params, drop_rng)
        u = mdl.encode_action(batch["a_struct"][t], batch["a_comm"][t], params, drop_rng)
        hidden = mdl.transition(hidden, z, u, params)
        encoded.append(z)

    steps: list[StepTerms] = []
    predictions: list[np.ndarray] = []
    fed_states: list[np.ndarray] = []
    for k in range(1, h + 1):
        p = c + k - 1
        y_hat_std, z_hat = mdl.predict_head(hidden, b, batch["tau_std"][p], params, drop_rng)
        predicted.append(z_hat)
        predictions.append(y_hat_std.value.copy())
        y_true_std = dc.constant(y_std_all[:, p:p + 1])
        y_prev_std = dc.constant(y_std_all[:, p - 1:p])
        y_prev_raw = dc.constant(batch["y_raw"][:, p - 1:p])
        y_hat_raw = dc.add_scalar(dc.scale(y_hat_std, sigma), mu)

        if frozen_latent_targets is not None:
            target_z = dc.constant(frozen_latent_targets[k - 1])
        else:
            with dc.no_tape():
                target_z = dc.detach(mdl.encode_state(batch["x_std"][p], b, params))
        targets_used.append(target_z.value)

        steps.append(StepTerms(
            y=obj.loss_supervised(y_hat_std, y_true_std),
            z=obj.loss_next_latent(z_hat, None, None, params, target_z=target_z),
            slope=obj.loss_slope(y_hat_std, y_prev_std, y_true_std),
            cont=obj.loss_continuity(y_hat_std, y_prev_std, weights),
            jump=obj.loss_jump(y_hat_raw, y_prev_raw, weights),
        ))

        if k < h:
            if cfg.feedback_clip is not None:
                lo, hi = cfg.feedback_clip
                fed_raw = dc.clip(y_hat_raw, lo, hi)
                fed_std = dc.scale(dc.add_scalar(fed_raw, -mu), 1.0 / sigma)
            else:
                fed_std = y_hat_std
            rest = dc.constant(batch["x_std"][p][:, TARGET_SLOT + 1:])
            x_fb = dc.concat_cols([fed_std, rest])
            fed_states.append(x_fb.value.copy())
            z = mdl.encode_state(x_fb, b, params, drop_rng)
            u = mdl.encode_action(batch["a_struct"][p], batch["a_comm"][p], params, drop_rng)
            hidden = mdl.transition(hidden, z, u, params)
            encoded.append(z)

    return UnrollResult(steps, encoded, predicted, targets_used, predictions, fed_states)


def aggregate_horizon_losses(per_step: Sequence[dc.Tensor], gamma: float) -> dc.Tensor:
    """Normalised horizon-decay combination: sum_k gamma^(k-1) L_k / sum_k gamma^(k-1)."""
    if not per_step:
        raise dc.DiffcoreError("aggregate_horizon_losses: empty step list")
    coeffs = [gamma ** k for k in range(len(per_step))]
    total = dc.scale(per_step[0], coeffs[0])
    for loss, coef in zip(per_step[1:], coeffs[1:]):
        total = dc.add(total, dc.scale(loss, coef))
    return dc.scale(total, 1.0 / sum(coeffs))


def batch_loss(params: mdl.ModelParams, batch: dict, stdzr: Standardizer,
               cfg: TrainConfig, weights: obj.LossWeights,
               drop_rng: np.random.Generator | None = None,
               sigreg_rng: np.random.Generator | None = None,
               sigreg_directions: np.ndarray | None = None,
               frozen_latent_targets: Sequence[np.ndarray] | None = None,
               ) -> tuple[dc.Tensor, obj.LossBreakdown, UnrollResult]:
    """Full six-term objective for one minibatch (taped scalar + breakdown)."""
    res = unroll_training_trajectory(params, batch, stdzr, cfg, weights,
                                     drop_rng, frozen_latent_targets)
    gamma = cfg.horizon_decay
    agg = {
        name: aggregate_horizon_losses([getattr(s, name) for s in res.steps], gamma)
        for name in ("y", "z", "slope", "cont", "jump")
    }
    pool = list(res.encoded_latents)
    if cfg.sigreg_scope == "pooled":
        pool += res.predicted_latents
    latents = dc.concat_rows(pool)
    sigreg = obj.loss_sigreg(latents, weights, rng=sigreg_rng,
                             directions=sigreg_directions)
    total, breakdown = obj.total_loss(agg["y"], agg["z"], sigreg, agg["slope"],
                                      agg["cont"], agg["jump"], w=weights)
    return total, breakdown, res


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_optimizer(params: mdl.ModelParams) -> OptimizerState:
    return OptimizerState(
        m={k: np.zeros_like(t.value) for k, t in params.tensors.items()},
        v={k: np.zeros_like(t.value) for k, t in params.tensors.items()},
    )


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm;
    returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def adamw_update(params: mdl.ModelParams, grads: dict[str, np.ndarray],
                 state: OptimizerState, cfg: TrainConfig) -> float:
    """One AdamW step with bias correction and decoupled weight decay.
    Returns the pre-clip global gradient norm."""
    norm = global_grad_norm(grads)
    if cfg.grad_clip_norm is not None:
        norm = clip_global_norm(grads, cfg.grad_clip_norm)
    state.step += 1
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, tensor in params.tensors.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.value -= cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                                  + cfg.weight_decay * tensor.value)
    return norm


# ---------------------------------------------------------------------------
# fit


@dataclass
class FitResult:
    params: mdl.ModelParams
    standardizer: Standardizer
    best_epoch: int
    best_metric: float | None
    history: list[dict]


def _grads_by_name(tape: dc.Tape, loss: dc.Tensor,
                   params: mdl.ModelParams) -> dict[str, np.ndarray]:
    by_tensor = tape.grad(loss, params.trainable())
    return {name: by_tensor[tensor] for name, tensor in params.tensors.items()}


def _val_summary(params: mdl.ModelParams, stdzr: Standardizer,
                 val: Sequence[PatientRecord],
                 rollout_cfg: ro.RolloutConfig) -> ro.MetricSummary | None:
    if not val:
        return None
    return ro.evaluate_protocol(params, stdzr, val, rollout_cfg).summary


def fit(model_cfg: mdl.ModelConfig, train: Sequence[PatientRecord],
        val: Sequence[PatientRecord], cfg: TrainConfig,
        weights: obj.LossWeights, stdzr: Standardizer | None = None,
        history_path=None, init: mdl.ModelParams | None = None) -> FitResult:
    """Train and return the best-validation-epoch parameters.

    Starts from freshly initialised weights unless init is given (copied,
    never mutated). Epoch 0 in the history is the starting model's
    validation metric; the best checkpoint may be any epoch including 0.
    History rows are appended to history_path as JSONL when given.
    """
    if stdzr is None:
        stdzr = fit_standardizer(train)
    if init is not None:
        if init.cfg != model_cfg:
            raise ValueError("init params were built for a different model config")
        params = init.copy()
    else:
        params = mdl.init_params(model_cfg)
    opt = init_optimizer(params)
    arrays = standardize_cohort(train, stdzr)
    samples = enumerate_rollout_prefixes(train, cfg)
    if not samples:
        raise ValueError("no training prefixes; check c_min against period counts")
    val_cfg = ro.RolloutConfig(protocol="dynamic50", anchor_enabled=False,
                               feedback_clip=cfg.feedback_clip)

    history: list[dict] = []

    def record(row: dict) -> None:
        history.append(row)
        if history_path is not None:
            with open(history_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(row) + "\n")

    best = params.copy()
    summary = _val_summary(params, stdzr, val, val_cfg)
    best_metric = summary.mae if summary else None
    best_epoch = 0
    record({
        "epoch": 0, "loss": None, "terms": None,
        "val_mae": summary.mae if summary else None,
        "val_rmse": summary.rmse if summary else None,
        "seconds": 0.0,
    })
    log.info("epoch 0 (starting point): val MAE %s",
             f"{best_metric:.4f}" if best_metric is not None else "n/a")

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.monotonic()
        shuffle_rng = np.random.default_rng([cfg.seed, epoch, 1])
        drop_rng = np.random.default_rng([cfg.seed, epoch, 2])
        sigreg_rng = np.random.default_rng([cfg.seed, epoch, 3])
        order = list(samples)
        shuffle_rng.shuffle(order)
        groups: dict[tuple[int, int], list[PrefixSample]] = {}
        for s in order:
            groups.setdefault((s.c, s.h), []).append(s)
        batches: list[list[PrefixSample]] = []
        for group in groups.values():
            for i in range(0, len(group), cfg.batch_size):
                batches.append(group[i:i + cfg.batch_size])
        shuffle_rng.shuffle(batches)

        term_sums = {k: 0.0 for k in ("y", "z", "sigreg", "slope", "cont", "jump", "total")}
        n_rows = 0
        for bi, chunk in enumerate(batches):
            batch = build_batch(arrays, chunk)
            with dc.Tape() as tape:
                total, breakdown, _ = batch_loss(
                    params, batch, stdzr, cfg, weights,
                    drop_rng=drop_rng if model_cfg.dropout > 0 else None,
                    sigreg_rng=sigreg_rng,
                )
            if not math.isfinite(breakdown.total):
                raise TrainAbort(
                    f"non-finite loss at epoch {epoch}, batch {bi}",
                    dump={
                        "epoch": epoch, "batch_index": bi,
                        "c": batch["c"], "h": batch["h"],
                        "patients": batch["patients"],
                        "breakdown": breakdown.to_dict(),
                    },
                )
            grads = _grads_by_name(tape, total, params)
            adamw_update(params, grads, opt, cfg)
            for key, value in breakdown.to_dict().items():
                term_sums[key] += value * batch["n"]
            n_rows += batch["n"]

        terms = {k: v / n_rows for k, v in term_sums.items()}
        summary = _val_summary(params, stdzr, val, val_cfg)
        seconds = time.monotonic() - t0
        record({
            "epoch": epoch, "loss": terms["total"],
            "terms": {k: terms[k] for k in ("y", "z", "sigreg", "slope", "cont", "jump")},
            "val_mae": summary.mae if summary else None,
            "val_rmse": summary.rmse if summary else None,
            "seconds": round(seconds, 3),
        })
        log.info("epoch %d: loss %.4f val MAE %s (%.1fs)", epoch, terms["total"],
                 f"{summary.mae:.4f}" if summary else "n/a", seconds)
        if summary is None:
            best = params.copy()
            best_epoch = epoch
        elif best_metric is None or summary.mae < best_metric:
            best = params.copy()
            best_metric = summary.mae
            best_epoch = epoch

    return FitResult(best, stdzr, best_epoch, best_metric, history)
