"""Shared finite-difference gradient checking used across test modules."""

import numpy as np

from cmwm import diffcore as dc

FD_STEP = 1e-5
FD_TOL = 1e-4


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1.0)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def fd_grad(fn, params: list[dc.Tensor], step: float = FD_STEP) -> list[np.ndarray]:
    """Central finite differences of a scalar-valued fn over each parameter."""
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def analytic_grad(build, params: list[dc.Tensor]) -> list[np.ndarray]:
    with dc.Tape() as tape:
        loss = build()
    grads = tape.grad(loss, params)
    return [grads[p] for p in params]


def check_grads(build, params: list[dc.Tensor], tol: float = FD_TOL,
                step: float = FD_STEP) -> float:
    """Assert analytic gradients match central differences; returns worst error."""
    ana = analytic_grad(build, params)

    def value() -> float:
        return build().item()

    num = fd_grad(value, params, step=step)
    worst = 0.0
    for a, n in zip(ana, num):
        err = rel_err(a, n)
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:g}"
    return worst


def rand_param(rng: np.random.Generator, rows: int, cols: int,
               lo: float = -1.5, hi: float = 1.5) -> dc.Tensor:
    return dc.parameter(rng.uniform(lo, hi, size=(rows, cols)))
