"""Parameters, Laplace transforms and tail functionals of the Gamma-convolution model.

The latent field is ``Lambda(x) = Gamma(A_x)`` where ``Gamma`` is a Gamma
random measure whose base measure gives mass ``shape`` to every cylinder.
Exceedances are exponential with rate ``Lambda(x)`` and occur with probability
``exp(-censoring_rate * Lambda(x))``. Everything below is written for a
threshold of zero on the model scale.

Powers are evaluated as ``exp(c * log(rate / (v + rate)))`` so that large
exponents do not underflow before they are combined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import CylinderKernel, SpaceTimePoint, cylinder_intersection_volume

__all__ = [
    "ModelParams",
    "PairExponents",
    "pair_exponents",
    "overlap_fraction",
    "lp1",
    "lp1_derivative",
    "lp2",
    "lp2_partials",
    "exceedance_prob",
    "marginal_transform",
    "inverse_marginal_transform",
    "excess_rate_argument",
    "log_jacobian",
    "chi_sub",
    "chibar_sub",
    "chibar_limit",
    "gp_equivalent",
]

XI_ZERO_TOL = 1e-8


@dataclass(frozen=True)
class ModelParams:
    """Dependence and margin parameters of the hierarchical model.

    Parameters
    ----------
    kernel : CylinderKernel
        Ellipse shape, duration and velocity of the influence cylinders.
    shape, rate : float
        Gamma marginal of the latent field. With the marginal transform in use
        both are fixed to 1 for identifiability.
    censoring_rate : float
        Controls the threshold upcrossing probability ``(rate/(censoring_rate+rate))**shape``.
    gp_scale, gp_shape : float
        Generalized Pareto margins of the positive excesses after the marginal
        transform. ``gp_scale`` defaults to ``censoring_rate + 1`` which, with
        ``gp_shape = 1``, makes the transform the identity.
    """

    kernel: CylinderKernel
    shape: float = 1.0
    rate: float = 1.0
    censoring_rate: float = 9.0
    gp_scale: float | None = None
    gp_shape: float = 1.0

    def __post_init__(self):
        if self.gp_scale is None:
            object.__setattr__(self, "gp_scale", self.censoring_rate + 1.0)
        for name in ("shape", "rate", "censoring_rate", "gp_scale"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive and finite, got {val!r}")
        if not math.isfinite(self.gp_shape):
            raise ValueError("gp_shape must be finite")

    def with_kernel(self, **changes) -> "ModelParams":
        return replace(self, kernel=replace(self.kernel, **changes))

    @property
    def identity_margins(self) -> bool:
        return self.gp_shape == 1.0 and self.gp_scale == self.censoring_rate + 1.0


@dataclass(frozen=True)
class PairExponents:
    """Gamma masses of ``A_x``, ``A_x \\ A_x'``, ``A_x ∩ A_x'`` and ``A_x' \\ A_x``."""

    c0: float
    c1: float
    c2: float
    c3: float


def overlap_fraction(x1: SpaceTimePoint, x2: SpaceTimePoint, kernel: CylinderKernel) -> float:
    return cylinder_intersection_volume(x1, x2, kernel) / kernel.volume


def pair_exponents(x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams) -> PairExponents:
    c0 = p.shape
    c2 = min(c0 * overlap_fraction(x1, x2, p.kernel), c0)
    return PairExponents(c0, c0 - c2, c2, c0 - c2)


def _check_nonneg(*vals):
    for v in vals:
        if np.any(np.asarray(v) < 0):
            raise ValueError("Laplace transform arguments must be non-negative")


def _log_ratio(v, rate):
    """``log(rate / (v + rate))``."""
    return -np.log1p(np.asarray(v, dtype=float) / rate)


def lp1(v, p: ModelParams):
    """Univariate Laplace transform ``E exp(-v Lambda)``."""
    _check_nonneg(v)
    return np.exp(p.shape * _log_ratio(v, p.rate))


def lp1_derivative(v, p: ModelParams):
    _check_nonneg(v)
    v = np.asarray(v, dtype=float)
    return -p.shape / (v + p.rate) * np.exp(p.shape * _log_ratio(v, p.rate))


def _lp2_c(v1, v2, c0, c2, rate):
    c1 = c0 - c2
    return np.exp(c1 * _log_ratio(v1, rate) + c2 * _log_ratio(v1 + v2, rate) + c1 * _log_ratio(v2, rate))


def lp2(v1, v2, x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams):
    """Bivariate Laplace transform of ``(Lambda(x1), Lambda(x2))``."""
    _check_nonneg(v1, v2)
    e = pair_exponents(x1, x2, p)
    return _lp2_c(np.asarray(v1, float), np.asarray(v2, float), e.c0, e.c2, p.rate)


def _lp2_partials_c(v1, v2, c0, c2, rate):
    c1 = c3 = c0 - c2
    a1 = 1.0 / (v1 + rate)
    a2 = 1.0 / (v2 + rate)
    a12 = 1.0 / (v1 + v2 + rate)
    base = _lp2_c(v1, v2, c0, c2, rate)
    d1 = -base * (c1 * a1 + c2 * a12)
    d2 = -base * (c3 * a2 + c2 * a12)
    d12 = base * (
        c1 * c2 * a1 * a12 + c1 * c3 * a1 * a2 + c2 * (c2 + 1.0) * a12 * a12 + c2 * c3 * a12 * a2
    )
    return d1, d2, d12


def lp2_partials(v1, v2, x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams):
    """First partials and the mixed second partial of :func:`lp2`."""
    _check_nonneg(v1, v2)
    e = pair_exponents(x1, x2, p)
    return _lp2_partials_c(np.asarray(v1, float), np.asarray(v2, float), e.c0, e.c2, p.rate)


def exceedance_prob(p: ModelParams) -> float:
    """Marginal probability of a positive excess."""
    return float(lp1(p.censoring_rate, p))


def gp_equivalent(p: ModelParams) -> tuple[float, float]:
    """(scale, shape) of the GP law of positive excesses before the marginal transform."""
    return (p.censoring_rate + p.rate) / p.shape, 1.0 / p.shape


# ---------------------------------------------------------------------------
# marginal transform
# ---------------------------------------------------------------------------


def marginal_transform(y, p: ModelParams):
    """Map unit-margin excesses (GP with scale ``censoring_rate + 1`` and shape 1) to GP(gp_scale, gp_shape)."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("excesses must be non-negative")
    k1 = p.censoring_rate + 1.0
    lg = np.log1p(y / k1)
    if abs(p.gp_shape) < XI_ZERO_TOL:
        return p.gp_scale * lg
    return p.gp_scale / p.gp_shape * np.expm1(p.gp_shape * lg)


def _log1p_scaled(y, p: ModelParams):
    z = p.gp_shape * np.asarray(y, dtype=float) / p.gp_scale
    if np.any(z <= -1.0):
        raise ValueError("value outside the support of the transformed margins")
    return np.log1p(z)


def inverse_marginal_transform(y, p: ModelParams):
    """Inverse of :func:`marginal_transform`."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("excesses must be non-negative")
    k1 = p.censoring_rate + 1.0
    if abs(p.gp_shape) < XI_ZERO_TOL:
        return k1 * np.expm1(y / p.gp_scale)
    return k1 * np.expm1(_log1p_scaled(y, p) / p.gp_shape)


def excess_rate_argument(y, p: ModelParams):
    """Laplace argument ``censoring_rate + inverse_marginal_transform(y)``."""
    return p.censoring_rate + inverse_marginal_transform(y, p)


def log_jacobian(y, p: ModelParams):
    """log of the derivative of :func:`inverse_marginal_transform`."""
    k1 = p.censoring_rate + 1.0
    y = np.asarray(y, dtype=float)
    if abs(p.gp_shape) < XI_ZERO_TOL:
        return math.log(k1 / p.gp_scale) + y / p.gp_scale
    return math.log(k1 / p.gp_scale) + (1.0 / p.gp_shape - 1.0) * _log1p_scaled(y, p)


# ---------------------------------------------------------------------------
# tail dependence
# ---------------------------------------------------------------------------


def chi_sub(v, x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams):
    """``Pr(Z(x1) > v | Z(x2) > v)`` on the model scale."""
    _check_nonneg(v)
    w = np.asarray(v, dtype=float) + p.censoring_rate
    return lp2(w, w, x1, x2, p) / lp1(w, p)


def chibar_sub(v, x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams):
    """Sub-asymptotic ``chibar(v) = 2 log Pr(Z > v) / log Pr(Z1 > v, Z2 > v) - 1``."""
    _check_nonneg(v)
    e = pair_exponents(x1, x2, p)
    w = np.asarray(v, dtype=float) + p.censoring_rate
    lw = np.log1p(w / p.rate)
    l2w = np.log1p(2.0 * w / p.rate)
    return 2.0 * e.c0 * lw / (e.c1 * lw + e.c2 * l2w + e.c3 * lw) - 1.0


def chibar_limit(x1: SpaceTimePoint, x2: SpaceTimePoint, p: ModelParams) -> float:
    """Limit of :func:`chibar_sub`: intersection over union of the two cylinders."""
    e = pair_exponents(x1, x2, p)
    return e.c2 / (2.0 * e.c0 - e.c2)
