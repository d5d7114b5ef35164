"""The six-term training objective.

total = supervised + lam_z * next_latent + lam_sig * sigreg
        + lam_slope * slope + lam_cont * continuity + lam_jump * jump

All terms are scalar diffcore Tensors so they participate in the tape.
Supervised, slope, and continuity operate in standardised target units;
the jump term operates in raw target units. The latent-alignment target
is stop-gradiented. SIGReg compares random 1-D projections of the latent
batch against a standard Gaussian through their characteristic function.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import model as mdl

WeightFn = Callable[[int, float], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LossWeights:
    lambda_z: float = 0.08
    lambda_sig: float = 0.008
    lambda_slope: float = 0.2
    lambda_cont: float = 0.3
    lambda_jump: float = 0.2
    delta_c: float = 0.5
    delta_j: float = 10.0
    k_knots: int = 17
    t_max: float = 3.0
    q_projections: int = 64

    def __post_init__(self):
        lams = (self.lambda_z, self.lambda_sig, self.lambda_slope,
                self.lambda_cont, self.lambda_jump)
        if any(lam < 0 for lam in lams):
            raise ValueError("loss weights must be nonnegative")
        if self.delta_c <= 0 or self.delta_j <= 0:
            raise ValueError("huber/hinge thresholds must be positive")
        if self.k_knots < 2:
            raise ValueError("k_knots must be >= 2")
        if self.q_projections < 1:
            raise ValueError("q_projections must be >= 1")

    def to_dict(self) -> dict[str, float]:
        return {
            "lambda_z": self.lambda_z,
            "lambda_sig": self.lambda_sig,
            "lambda_slope": self.lambda_slope,
            "lambda_cont": self.lambda_cont,
            "lambda_jump": self.lambda_jump,
            "delta_c": self.delta_c,
            "delta_j": self.delta_j,
            "k_knots": self.k_knots,
            "t_max": self.t_max,
            "q_projections": self.q_projections,
        }

    @classmethod
    def from_dict(cls, d) -> "LossWeights":
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    y: float
    z: float
    sigreg: float
    slope: float
    cont: float
    jump: float
    total: float

    def recombined(self, w: LossWeights) -> float:
        """Re-sum the terms in the canonical order; must equal .total exactly."""
        total = self.y
        total += w.lambda_z * self.z
        total += w.lambda_sig * self.sigreg
        total += w.lambda_slope * self.slope
        total += w.lambda_cont * self.cont
        total += w.lambda_jump * self.jump
        return total

    def to_dict(self) -> dict[str, float]:
        return {
            "y": self.y, "z": self.z, "sigreg": self.sigreg,
            "slope": self.slope, "cont": self.cont, "jump": self.jump,
            "total": self.total,
        }


def _as_tensor(x) -> dc.Tensor:
    return x if isinstance(x, dc.Tensor) else dc.constant(x)


def _nonempty(t: dc.Tensor, what: str) -> dc.Tensor:
    if t.value.size == 0:
        raise dc.DiffcoreError(f"{what}: empty batch")
    return t


def loss_supervised(y_hat_std, y_true_std) -> dc.Tensor:
    """Mean smooth-L1 one-step error on the standardised target."""
    y_hat = _nonempty(_as_tensor(y_hat_std), "loss_supervised")
    return dc.smooth_l1(dc.sub(y_hat, _as_tensor(y_true_std)), beta=1.0)


def loss_next_latent(z_hat, x_next_std, b, p: mdl.ModelParams,
                     target_z: dc.Tensor | None = None) -> dc.Tensor:
    """Mean squared distance between the predicted next latent and the
    stop-gradiented encoding of the observed next state.

    The target always encodes ground truth, even when the unroll fed back
    its own estimates. target_z overrides the internal encoding with a
    precomputed constant (used to hold targets fixed in gradient checks).
    """
    z_hat = _nonempty(_as_tensor(z_hat), "loss_next_latent")
    if target_z is None:
        with dc.no_tape():
            target_z = dc.detach(mdl.encode_state(x_next_std, b, p))
    diff = dc.sub(z_hat, target_z)
    return dc.scale(dc.sum_all(dc.square(diff)), 1.0 / z_hat.rows)


def gaussian_trapezoid_weights(k_knots: int, t_max: float) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grid on [0, t_max] with trapezoid quadrature weights under a
    Gaussian window exp(-t^2/2)."""
    t = np.linspace(0.0, t_max, k_knots)
    dt = t_max / (k_knots - 1)
    trap = np.full(k_knots, dt)
    trap[0] = trap[-1] = dt / 2.0
    return t, trap * np.exp(-0.5 * t * t)


def unit_directions(rng: np.random.Generator, dim: int, count: int) -> np.ndarray:
    """count columns uniform on the unit sphere in R^dim (Gaussian draw, normalised)."""
    q = rng.standard_normal((dim, count))
    return q / np.linalg.norm(q, axis=0, keepdims=True)


def loss_sigreg(z_batch, w: LossWeights, rng: np.random.Generator | None = None,
                directions: np.ndarray | None = None,
                weight_fn: WeightFn = gaussian_trapezoid_weights) -> dc.Tensor:
    """Characteristic-function mismatch between 1-D projections of the latent
    batch and a standard Gaussian.

    For each direction q and grid point t: the batch's empirical cos/sin
    means are compared against exp(-t^2/2) and 0. Directions are redrawn
    from rng on every call unless given explicitly.
    """
    z = _as_tensor(z_batch)
    n = z.rows
    if n < 2:
        raise dc.DiffcoreError("loss_sigreg needs at least 2 latents")
    if directions is None:
        if rng is None:
            raise dc.DiffcoreError("loss_sigreg needs an rng or explicit directions")
        directions = unit_directions(rng, z.cols, w.q_projections)
    if directions.shape[0] != z.cols:
        raise dc.DiffcoreError(
            f"direction dim {directions.shape[0]} != latent dim {z.cols}"
        )
    q_count = directions.shape[1]
    t_grid, w_grid = weight_fn(w.k_knots, w.t_max)
    proj = dc.matmul(z, dc.constant(directions))
    total: dc.Tensor | None = None
    for t_k, w_k in zip(t_grid, w_grid):
        scaled = dc.scale(proj, float(t_k))
        c_err = dc.add_scalar(dc.mean_rows(dc.cos(scaled)), -float(np.exp(-0.5 * t_k * t_k)))
        s_hat = dc.mean_rows(dc.sin(scaled))
        per_q = dc.add(dc.square(c_err), dc.square(s_hat))
        term = dc.scale(dc.sum_all(per_q), float(w_k))
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, n / q_count)


def loss_slope(y_hat_std, y_prev_std, y_next_std) -> dc.Tensor:
    """Mean smooth-L1 between predicted and observed one-period change.

    Written literally as (y_hat - y_prev) - (y_next - y_prev); algebraically
    this equals the supervised term, and tests pin that identity.
    """
    y_hat = _nonempty(_as_tensor(y_hat_std), "loss_slope")
    y_prev = _as_tensor(y_prev_std)
    pred_change = dc.sub(y_hat, y_prev)
    true_change = dc.sub(_as_tensor(y_next_std), y_prev)
    return dc.smooth_l1(dc.sub(pred_change, true_change), beta=1.0)


def loss_continuity(y_hat_std, y_prev_std, w: LossWeights) -> dc.Tensor:
    """Mean Huber penalty on the predicted step from the previous observed
    target, in standardised units."""
    y_hat = _nonempty(_as_tensor(y_hat_std), "loss_continuity")
    return dc.huber(dc.sub(y_hat, _as_tensor(y_prev_std)), delta=w.delta_c)


def loss_jump(y_hat_raw, y_prev_raw, w: LossWeights) -> dc.Tensor:
    """Mean squared hinge on steps larger than delta_j, in raw target units."""
    y_hat = _nonempty(_as_tensor(y_hat_raw), "loss_jump")
    return dc.hinge_sq(dc.sub(y_hat, _as_tensor(y_prev_raw)), delta=w.delta_j)


def total_loss(y: dc.Tensor, z: dc.Tensor, sigreg: dc.Tensor, slope: dc.Tensor,
               cont: dc.Tensor, jump: dc.Tensor,
               w: LossWeights) -> tuple[dc.Tensor, LossBreakdown]:
    """Weighted sum in a fixed order; returns the taped scalar and a
    float breakdown for logging."""
    total = y
    total = dc.add(total, dc.scale(z, w.lambda_z))
    total = dc.add(total, dc.scale(sigreg, w.lambda_sig))
    total = dc.add(total, dc.scale(slope, w.lambda_slope))
    total = dc.add(total, dc.scale(cont, w.lambda_cont))
    total = dc.add(total, dc.scale(jump, w.lambda_jump))
    breakdown = LossBreakdown(
        y=y.item(), z=z.item(), sigreg=sigreg.item(), slope=slope.item(),
        cont=cont.item(), jump=jump.item(), total=total.item(),
    )
    return total, breakdown
