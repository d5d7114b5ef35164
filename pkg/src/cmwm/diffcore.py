"""Minimal reverse-mode autodiff over dense float64 matrices.

Everything the model needs and nothing more: 2-D tensors, a handful of
primitive ops with hand-written backward rules, and a tape that replays
them in reverse creation order (which is a valid reverse-topological
order, since an op's inputs always exist before its output).

Gradients are exact for the smooth region of every op and are checked
against central finite differences in the test suite. All values are
float64; there is no broadcasting beyond "row vector over rows".
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DiffcoreError(ValueError):
    """Raised on shape mismatches or invalid loss nodes."""


def _as_matrix(value) -> Array:
    out = np.asarray(value, dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise DiffcoreError(f"expected a scalar, vector or matrix, got ndim={out.ndim}")
    return np.ascontiguousarray(out)


class Tensor:
    """A 2-D float64 value, optionally tracked by the active tape."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value: Array = _as_matrix(value)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DiffcoreError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.shape})"


def constant(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def parameter(value, name: str = "") -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


@contextmanager
def no_tape():
    """Temporarily disable recording (e.g. for stop-gradient target branches)."""
    prev = _active_tape()
    _STATE.tape = None
    try:
        yield
    finally:
        _STATE.tape = prev


class Tape:
    """Records primitive ops for one forward pass; replays them backward.

    Use as a context manager. Ops executed while a tape is active and
    touching at least one grad-requiring tensor are recorded; without an
    active tape the same ops run as plain numpy (inference mode).
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable[[Array], None]]] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = _active_tape()
        _STATE.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every tensor on the path."""
        if loss.value.shape != (1, 1):
            raise DiffcoreError(f"loss must be a 1x1 scalar, got shape {loss.value.shape}")
        for out, inputs, _ in self._nodes:
            out.grad = None
            for t in inputs:
                t.grad = None
        loss.grad = np.ones((1, 1))
        for out, _, backward in reversed(self._nodes):
            if out.grad is None:
                continue
            backward(out.grad)

    def grad(self, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Array]:
        """Gradient of a scalar loss for each parameter; zeros off the path."""
        params = list(params)
        self.backward(loss)
        out: dict[Tensor, Array] = {}
        for p in params:
            out[p] = np.zeros_like(p.value) if p.grad is None else p.grad
        return out


def _accum(t: Tensor, g: Array) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable[[Array], None]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, inputs, backward))
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DiffcoreError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value)

    def backward(g: Array) -> None:
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return _record(out, (a, b), backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ W^T + b with W of shape (d_out, d_in) and b of shape (1, d_out)."""
    if x.cols != weight.cols or bias.shape != (1, weight.rows):
        raise DiffcoreError(
            f"affine shape mismatch: x{x.shape} W{weight.shape} b{bias.shape}"
        )
    out = Tensor(x.value @ weight.value.T + bias.value)

    def backward(g: Array) -> None:
        _accum(x, g @ weight.value)
        _accum(weight, g.T @ x.value)
        _accum(bias, g.sum(axis=0, keepdims=True))

    return _record(out, (x, weight, bias), backward)


def _reduce_to(shape: tuple[int, int], g: Array) -> Array:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[1] == shape[1]:
        return g.sum(axis=0, keepdims=True)
    raise DiffcoreError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    ok = a.shape == b.shape or (
        a.cols == b.cols and (a.rows == 1 or b.rows == 1)
    )
    if not ok:
        raise DiffcoreError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.value + b.value)

    def backward(g: Array) -> None:
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, _reduce_to(b.shape, g))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.value - b.value)

    def backward(g: Array) -> None:
        _accum(a, _reduce_to(a.shape, g))
        _accum(b, -_reduce_to(b.shape, g))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.value * b.value)

    def backward(g: Array) -> None:
        _accum(a, _reduce_to(a.shape, g * b.value))
        _accum(b, _reduce_to(b.shape, g * a.value))

    return _record(out, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.value * s)

    def backward(g: Array) -> None:
        _accum(a, g * s)

    return _record(out, (a,), backward)


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.value + float(s))

    def backward(g: Array) -> None:
        _accum(a, g)

    return _record(out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.value * a.value)

    def backward(g: Array) -> None:
        _accum(a, g * (2.0 * a.value))

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.value)
    out = Tensor(y)

    def backward(g: Array) -> None:
        _accum(a, g * (y * (1.0 - y)))

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    out = Tensor(y)

    def backward(g: Array) -> None:
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def backward(g: Array) -> None:
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    return _record(out, (a,), backward)


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.value))

    def backward(g: Array) -> None:
        _accum(a, -g * np.sin(a.value))

    return _record(out, (a,), backward)


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.value))

    def backward(g: Array) -> None:
        _accum(a, g * np.cos(a.value))

    return _record(out, (a,), backward)


def clip(a: Tensor, low: float, high: float) -> Tensor:
    """Clamp values to [low, high]; gradient passes only where not clipped."""
    inside = (a.value >= low) & (a.value <= high)
    out = Tensor(np.clip(a.value, low, high))

    def backward(g: Array) -> None:
        _accum(a, g * inside)

    return _record(out, (a,), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise DiffcoreError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.value for p in parts], axis=1))
    widths = [p.cols for p in parts]

    def backward(g: Array) -> None:
        start = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, start : start + w])
            start += w

    return _record(out, tuple(parts), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    if any(p.cols != cols for p in parts):
        raise DiffcoreError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([p.value for p in parts], axis=0))
    heights = [p.rows for p in parts]

    def backward(g: Array) -> None:
        start = 0
        for p, h in zip(parts, heights):
            _accum(p, g[start : start + h, :])
            start += h

    return _record(out, tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.cols):
        raise DiffcoreError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.value[:, start:stop])

    def backward(g: Array) -> None:
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        _accum(a, full)

    return _record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor([[a.value.sum()]])

    def backward(g: Array) -> None:
        _accum(a, np.full_like(a.value, g[0, 0]))

    return _record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.value.size
    out = Tensor([[a.value.mean()]])

    def backward(g: Array) -> None:
        _accum(a, np.full_like(a.value, g[0, 0] / n))

    return _record(out, (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Column-wise mean over rows, yielding (1, cols)."""
    n = a.rows
    out = Tensor(a.value.mean(axis=0, keepdims=True))

    def backward(g: Array) -> None:
        _accum(a, np.repeat(g / n, n, axis=0))

    return _record(out, (a,), backward)


def detach(a: Tensor) -> Tensor:
    """Copy of a value that blocks gradient flow (stop-gradient)."""
    return Tensor(a.value.copy(), requires_grad=False, name=a.name and a.name + ".sg")


# ---------------------------------------------------------------------------
# pointwise losses (mean-reduced to a 1x1 scalar)


def smooth_l1(residual: Tensor, beta: float = 1.0) -> Tensor:
    """Mean of: 0.5 r^2 / beta where |r| < beta, else |r| - 0.5 beta."""
    if beta <= 0:
        raise DiffcoreError("smooth_l1 requires beta > 0")
    r = residual.value
    absr = np.abs(r)
    small = absr < beta
    vals = np.where(small, 0.5 * r * r / beta, absr - 0.5 * beta)
    n = r.size
    out = Tensor([[vals.mean()]])

    def backward(g: Array) -> None:
        d = np.where(small, r / beta, np.sign(r))
        _accum(residual, g[0, 0] * d / n)

    return _record(out, (residual,), backward)


def huber(residual: Tensor, delta: float) -> Tensor:
    """Mean of: 0.5 r^2 where |r| <= delta, else delta (|r| - 0.5 delta)."""
    if delta <= 0:
        raise DiffcoreError("huber requires delta > 0")
    r = residual.value
    absr = np.abs(r)
    small = absr <= delta
    vals = np.where(small, 0.5 * r * r, delta * (absr - 0.5 * delta))
    n = r.size
    out = Tensor([[vals.mean()]])

    def backward(g: Array) -> None:
        d = np.where(small, r, delta * np.sign(r))
        _accum(residual, g[0, 0] * d / n)

    return _record(out, (residual,), backward)


def hinge_sq(residual: Tensor, delta: float) -> Tensor:
    """Mean of max(0, |r| - delta)^2; silent inside the [-delta, delta] band."""
    if delta <= 0:
        raise DiffcoreError("hinge_sq requires delta > 0")
    r = residual.value
    excess = np.maximum(0.0, np.abs(r) - delta)
    n = r.size
    out = Tensor([[(excess * excess).mean()]])

    def backward(g: Array) -> None:
        d = 2.0 * excess * np.sign(r)
        _accum(residual, g[0, 0] * d / n)

    return _record(out, (residual,), backward)


# ---------------------------------------------------------------------------
# recurrent cell


class GruWeights:
    """Gate weights for one GRU cell mapping (d_in, d_h) -> d_h.

    Each gate weight has shape (d_h, d_in + d_h) and acts on [input; h].
    """

    def __init__(self, reset_w, reset_b, update_w, update_b, cand_w, cand_b):
        self.reset_w = reset_w
        self.reset_b = reset_b
        self.update_w = update_w
        self.update_b = update_b
        self.cand_w = cand_w
        self.cand_b = cand_b

    def tensors(self) -> list[Tensor]:
        return [
            self.reset_w, self.reset_b,
            self.update_w, self.update_b,
            self.cand_w, self.cand_b,
        ]


def gru_step(h_prev: Tensor, x_in: Tensor, w: GruWeights) -> Tensor:
    """One GRU cell update.

    r = sigmoid(W_r [x; h] + b_r)
    u = sigmoid(W_u [x; h] + b_u)
    c = tanh(W_c [x; r*h] + b_c)
    h = (1 - u) * h_prev + u * c
    """
    xh = concat_cols([x_in, h_prev])
    r = sigmoid(affine(xh, w.reset_w, w.reset_b))
    u = sigmoid(affine(xh, w.update_w, w.update_b))
    xrh = concat_cols([x_in, mul(r, h_prev)])
    c = tanh(affine(xrh, w.cand_w, w.cand_b))
    keep = sub(constant(np.ones_like(u.value)), u)
    return add(mul(keep, h_prev), mul(u, c))


def dropout_mask(rng: np.random.Generator, shape: tuple[int, int], rate: float) -> Array:
    """Inverted-dropout mask; multiply activations by it during training."""
    if rate <= 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)
