"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import record_branches


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    num_checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return bool(self.max_rel_error < tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-2,
                   abs_floor: float = 1e-5) -> float:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, maximized.

    ``floor`` is ``floor_frac`` times the largest numeric magnitude in the
    tensor, but never below ``abs_floor``. Entries tiny relative to the
    tensor's own scale are judged against that scale, and gradients that are
    identically zero (e.g. a bias feeding straight into a normalization) are
    judged against ``abs_floor`` instead of their own rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(floor_frac * np.abs(n).max(), abs_floor)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max())


def _evaluate(fn):
    with record_branches() as log:
        value = float(fn().data)
    return value, tuple(log)


def _numeric(fn, flat, k, h, base, refinements):
    """Finite-difference slope at entry ``k`` that never straddles a kink.

    Every evaluation records the relu masks / argmax choices it took. The
    central difference is used when both neighbours share the base point's
    branches; otherwise a second-order one-sided difference on a side that
    does; failing both, the step shrinks tenfold.
    """
    f0, sig0 = base
    orig = flat[k]

    def at(delta):
        flat[k] = orig + delta
        try:
            return _evaluate(fn)
        finally:
            flat[k] = orig

    for _ in range(refinements + 1):
        (fp, sp), (fm, sm) = at(h), at(-h)
        if sp == sig0 and sm == sig0:
            return (fp - fm) / (2 * h)
        for sign, f1, s1 in ((1.0, fp, sp), (-1.0, fm, sm)):
            if s1 == sig0:
                f2, s2 = at(2 * sign * h)
                if s2 == sig0:
                    return sign * (-3 * f0 + 4 * f1 - f2) / (2 * h)
        h /= 10
    return (fp - fm) / (2 * h * 10)


def check_gradients(fn, tensors, names=None, h: float = 1e-5, max_entries: int | None = None,
                    rng=None, refinements: int = 3) -> list:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    Parameters
    ----------
    fn : callable
        Rebuilds the graph from the current ``tensors`` data and returns a
        scalar Tensor. Must be deterministic.
    tensors : list of Tensor
        Leaves to check; their data should be float64.
    max_entries : int, optional
        Check only this many randomly chosen entries per tensor.
    refinements : int
        How many times a step that crosses a kink on both sides is divided by 10.
    """
    for t in tensors:
        t.grad = None
    with record_branches() as log:
        out = fn()
    out.backward()
    base = (float(out.data), tuple(log))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = rng or np.random.default_rng(0)
    results = []
    for i, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.array([_numeric(fn, flat, k, h, base, refinements) for k in idx])
        name = names[i] if names else f"input{i}"
        err = relative_error(analytic[i].reshape(-1)[idx], numeric)
        results.append(GradCheckResult(name, err, int(idx.size)))
    return results
