"""Central finite-difference gradient checks.

The oracle only ever calls the scalar function on perturbed copies of the
parameters, so it shares nothing with the tape's backward rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool


def compare(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-5, atol: float = 1e-8):
    """Max relative error over entries whose absolute error exceeds ``atol``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    abs_err = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.where(abs_err > atol, abs_err / scale, 0.0)
    max_rel = float(rel.max()) if rel.size else 0.0
    return max_rel, float(abs_err.max()) if abs_err.size else 0.0, max_rel < rtol


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-5,
    atol: float = 1e-8,
) -> list[GradCheckResult]:
    """Compare tape gradients of ``loss_fn()`` against central differences for
    every tensor in ``params``.  ``loss_fn`` must be deterministic."""
    with Tape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, set_grad=False)

    def f() -> float:
        return loss_fn().item()

    results = []
    for name, p in params.items():
        analytic = grads.get(p, np.zeros_like(p.data))
        numeric = numeric_grad(f, p.data, h)
        rel, ab, ok = compare(analytic, numeric, rtol, atol)
        results.append(GradCheckResult(name, rel, ab, ok))
    return results
