"""Shared test utilities: finite-difference oracles and small fixtures."""
from __future__ import annotations

import numpy as np

from freetuner.numerics import Tensor, grad


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f(ndarray) -> float``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def directional_diff(f, x: np.ndarray, v: np.ndarray, h: float = 1e-5) -> float:
    return (f(x + h * v) - f(x - h * v)) / (2 * h)


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    t = Tensor(x, requires_grad=True)
    (g,) = grad(build(t), [t])
    return g


def rel_errors(a: np.ndarray, n: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor * max|n|): coordinate-wise relative error.

    The floor keeps coordinates whose true derivative is ~0 from dominating
    through round-off in the difference quotient.
    """
    a, n = np.asarray(a).ravel(), np.asarray(n).ravel()
    scale = max(np.max(np.abs(n)), 1e-12)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return np.abs(a - n) / den


def check_grad(build, x: np.ndarray, h: float = 1e-5, bulk: float = 1e-5, worst: float = 1e-3,
               frac: float = 0.99) -> np.ndarray:
    """Assert analytic and central-difference gradients agree (bulk / worst-case relative)."""
    a = analytic_grad(build, x)
    n = central_diff(lambda v: build(Tensor(v)).item(), x, h)
    err = rel_errors(a, n)
    assert np.mean(err <= bulk) >= frac, f"only {np.mean(err <= bulk):.3f} of coords within {bulk}"
    assert err.max() <= worst, f"worst relative error {err.max():.2e}"
    return err


# acceptance verdicts, printed in the terminal summary by conftest
ACCEPTANCE = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
