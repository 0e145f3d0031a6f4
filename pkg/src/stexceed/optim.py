"""Nelder-Mead over a reparameterized, unconstrained space.

Positive parameters are optimized on the log scale, angles are left free and
wrapped to ``[0, pi)`` when mapped back, everything else is used as is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

__all__ = ["Reparam", "OptimResult", "minimize_nm"]

KINDS = ("log", "raw", "angle")


@dataclass(frozen=True)
class Reparam:
    names: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ValueError(f"unknown transform kinds {bad}")

    def forward(self, values) -> np.ndarray:
        out = np.empty(len(self.names))
        for i, (v, kind) in enumerate(zip(values, self.kinds)):
            if kind == "log":
                if not v > 0:
                    raise ValueError(f"{self.names[i]} must be positive, got {v}")
                out[i] = math.log(v)
            else:
                out[i] = v
        return out

    def backward(self, eta) -> np.ndarray:
        out = np.empty(len(self.names))
        for i, (e, kind) in enumerate(zip(eta, self.kinds)):
            if kind == "log":
                out[i] = math.exp(e)
            elif kind == "angle":
                out[i] = e % math.pi
            else:
                out[i] = e
        return out

    def jacobian(self, values) -> np.ndarray:
        """d(natural)/d(eta) on the diagonal."""
        return np.array([v if kind == "log" else 1.0 for v, kind in zip(values, self.kinds)])

    def bounds(self, natural_bounds: dict | None):
        if not natural_bounds:
            return None
        out = []
        for name, kind in zip(self.names, self.kinds):
            lo, hi = natural_bounds.get(name, (None, None))
            if kind == "log":
                lo = None if lo is None or lo <= 0 else math.log(lo)
                hi = None if hi is None else math.log(hi)
            out.append((lo, hi))
        return out


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    nfev: int
    success: bool
    message: str
    trace: list = field(default_factory=list)


def minimize_nm(fun, x0, steps, bounds=None, maxfev=4000, xatol=1e-4, fatol=1e-3, restarts=1):
    """Minimize ``fun`` with Nelder-Mead, restarting from the best point.

    ``steps`` sets the size of the initial simplex along each coordinate.
    Non-finite objective values are treated as ``+inf``. Every evaluation is
    appended to the trace as ``(f, *x)``.
    """
    trace = []

    def wrapped(x):
        f = fun(x)
        if not np.isfinite(f):
            f = np.inf
        trace.append((f, *x))
        return f

    x = np.asarray(x0, dtype=float)
    steps = np.asarray(steps, dtype=float)
    if not np.isfinite(wrapped(x)):
        raise ValueError("objective is not finite at the initial point")
    nfev_total = 0
    res = None
    for attempt in range(restarts + 1):
        simplex = np.vstack([x, x + np.diag(steps)])
        if bounds is not None:
            lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
            hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
            simplex = np.clip(simplex, lo, hi)
        budget = max(maxfev - nfev_total, len(x) + 2)
        res = minimize(
            wrapped,
            x,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "initial_simplex": simplex,
                "maxfev": budget,
                "xatol": xatol,
                "fatol": fatol,
                "adaptive": len(x) > 4,
            },
        )
        nfev_total += res.nfev
        moved = np.max(np.abs(res.x - x)) if attempt else np.inf
        x = res.x
        steps = steps * 0.5
        if nfev_total >= maxfev or moved < xatol:
            break
    return OptimResult(
        x=x,
        fun=float(res.fun),
        nfev=nfev_total,
        success=bool(res.success) and nfev_total < maxfev,
        message=str(res.message),
        trace=trace,
    )
