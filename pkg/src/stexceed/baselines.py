"""Censored Gaussian space-time copulas used as competitors.

Three correlation families are available:

* ``separable``: ``exp(-a(s1, s2) / spatial_range) * exp(-|t1 - t2| / temporal_range)``
* ``frozen_exponential``: ``exp(-a(s1 - v t1, s2 - v t2) / spatial_range)``
* ``frozen_spherical``: spherical correlation of the same Lagrangian distance

with ``a`` the Mahalanobis distance of the anisotropy matrix
``R(angle) diag(1, 1/axis_ratio) R(angle)'``.

The copula is linked to the same censored margins as the hierarchical model
(unit Gamma latent field, so ``Pr(Y > y) = 1 / (censoring_rate + 1 + g^{-1}(y))``)
and fitted with the same pairwise likelihood engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import log_ndtr, ndtr, ndtri

from .geometry import SpaceTimePoint
from .likelihood import ParameterRegionError, fit
from .model import ModelParams, excess_rate_argument, log_jacobian
from .panel import ExceedancePanel
from .simulate import SimulationDesign

__all__ = [
    "FAMILIES",
    "GaussCopulaParams",
    "GaussianCopulaFamily",
    "anisotropy_matrix",
    "correlation",
    "correlation_lags",
    "bvn_upper",
    "bvn_density",
    "gauss_pair_density",
    "log_gauss_pair_density",
    "fit_baseline",
    "simulate_gaussian_panel",
]

FAMILIES = ("separable", "frozen_exponential", "frozen_spherical")

# A frozen field without velocity is perfectly correlated with its own past;
# correlations are capped here so that such pairs stay finite.
RHO_MAX = 1.0 - 1e-9


@dataclass(frozen=True)
class GaussCopulaParams:
    """Correlation parameters of a censored Gaussian copula and its margins.

    ``temporal_range`` is used by the separable family only and ``velocity``
    by the frozen-field families only.
    """

    family: str = "separable"
    anisotropy_angle: float = 0.0
    axis_ratio: float = 1.0
    spatial_range: float = 1.0
    temporal_range: float = 1.0
    velocity: tuple[float, float] = (0.0, 0.0)
    censoring_rate: float = 9.0
    gp_scale: float | None = None
    gp_shape: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown copula family {self.family!r}; expected one of {FAMILIES}")
        if self.gp_scale is None:
            object.__setattr__(self, "gp_scale", self.censoring_rate + 1.0)
        for name in ("axis_ratio", "spatial_range", "temporal_range", "censoring_rate", "gp_scale"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"{name} must be positive and finite, got {val!r}")
        vel = (float(self.velocity[0]), float(self.velocity[1]))
        if not all(math.isfinite(v) for v in (*vel, self.anisotropy_angle, self.gp_shape)):
            raise ValueError("angle, velocity and gp_shape must be finite")
        object.__setattr__(self, "velocity", vel)

    @property
    def margins(self) -> ModelParams:
        """Hierarchical-model margins with the same censoring rate and GP parameters."""
        from .geometry import CylinderKernel

        return ModelParams(
            CylinderKernel(1.0, 1.0), 1.0, 1.0, self.censoring_rate, self.gp_scale, self.gp_shape
        )


def anisotropy_matrix(angle: float, axis_ratio: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return R @ np.diag([1.0, 1.0 / axis_ratio]) @ R.T


def _spherical(a):
    a = np.asarray(a, dtype=float)
    return np.where(a < 1.0, 1.0 - 1.5 * a + 0.5 * a**3, 0.0)


def correlation_lags(spatial_lag, time_lag, gp: GaussCopulaParams) -> np.ndarray:
    """Correlation between points separated by ``spatial_lag`` (..., 2) and ``time_lag``."""
    h = np.asarray(spatial_lag, dtype=float)
    k = np.asarray(time_lag, dtype=float)
    if gp.family != "separable":
        h = np.stack([h[..., 0] - gp.velocity[0] * k, h[..., 1] - gp.velocity[1] * k], axis=-1)
    om = anisotropy_matrix(gp.anisotropy_angle, gp.axis_ratio)
    q = om[0, 0] * h[..., 0] ** 2 + 2 * om[0, 1] * h[..., 0] * h[..., 1] + om[1, 1] * h[..., 1] ** 2
    a = np.sqrt(np.maximum(q, 0.0)) / gp.spatial_range
    if gp.family == "separable":
        return np.exp(-a - np.abs(k) / gp.temporal_range)
    if gp.family == "frozen_exponential":
        return np.exp(-a)
    return _spherical(a)


def correlation(x1: SpaceTimePoint, x2: SpaceTimePoint, gp: GaussCopulaParams) -> float:
    h = np.array([x2.s[0] - x1.s[0], x2.s[1] - x1.s[1]])
    return float(correlation_lags(h, x2.t - x1.t, gp))


# ---------------------------------------------------------------------------
# bivariate normal
# ---------------------------------------------------------------------------


def _half_nodes(n):
    x, w = np.polynomial.legendre.leggauss(n)
    keep = x > 0
    return x[keep], w[keep]


_GL = {n: _half_nodes(n) for n in (6, 12, 20)}


def _bvnu(h, k, r):
    """Genz's BVNU, ``Pr(X > h, Y > k)`` for standard normals with correlation ``r`` (1-d arrays)."""
    out = np.empty(r.shape)
    tp = 2.0 * math.pi
    ar = np.abs(r)
    small = ar < 0.925
    for n, sel in ((6, small & (ar < 0.3)), (12, small & (ar >= 0.3) & (ar < 0.75)), (20, small & (ar >= 0.75))):
        if not sel.any():
            continue
        xg, wg = _GL[n]
        w = np.concatenate([wg, wg])
        x = np.concatenate([1.0 - xg, 1.0 + xg])
        hh, kk = h[sel], k[sel]
        hk = (hh * kk)[:, None]
        hs = ((hh * hh + kk * kk) / 2.0)[:, None]
        asr = (np.arcsin(r[sel]) / 2.0)[:, None]
        sn = np.sin(asr * x)
        bvn = np.exp((sn * hk - hs) / (1.0 - sn * sn)) @ w
        out[sel] = bvn * asr[:, 0] / tp + ndtr(-hh) * ndtr(-kk)
    big = ~small
    if big.any():
        xg, wg = _GL[20]
        w = np.concatenate([wg, wg])
        x = np.concatenate([1.0 - xg, 1.0 + xg])
        rr, hh = r[big], h[big]
        kk = np.where(rr < 0, -k[big], k[big])
        hk = hh * kk
        bvn = np.zeros(rr.shape)
        inner = np.abs(rr) < 1
        with np.errstate(all="ignore"):
            as_ = 1.0 - rr * rr
            a = np.sqrt(as_)
            bs = (hh - kk) ** 2
            asr = -(bs / as_ + hk) / 2.0
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 80.0
            t1 = a * np.exp(asr) * (1 - c * (bs - as_) * (1 - d * bs) / 3 + c * d * as_ * as_)
            bvn = np.where(inner & (asr > -100), t1, 0.0)
            b = np.sqrt(bs)
            sp = math.sqrt(tp) * ndtr(-b / a)
            t2 = np.exp(-hk / 2) * sp * b * (1 - c * bs * (1 - d * bs) / 3)
            bvn = np.where(inner & (hk > -100), bvn - t2, bvn)
            a2 = (a / 2.0)[:, None]
            xs = (a2 * x) ** 2
            asr_v = -(bs[:, None] / xs + hk[:, None]) / 2.0
            sp = 1.0 + c[:, None] * xs * (1.0 + 5.0 * d[:, None] * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-(hk[:, None] / 2.0) * xs / (1.0 + rs) ** 2) / rs
            terms = np.where(asr_v > -100, np.exp(asr_v) * (sp - ep), 0.0)
            bvn = np.where(inner, (a2[:, 0] * (terms @ w) - bvn) / tp, 0.0)
        pos = rr > 0
        L = np.where(hh < 0, ndtr(kk) - ndtr(hh), ndtr(-hh) - ndtr(-kk))
        bvn = np.where(pos, bvn + ndtr(-np.maximum(hh, kk)), np.where(hh >= kk, -bvn, L - bvn))
        out[big] = bvn
    return np.clip(out, 0.0, 1.0)


def bvn_upper(z1, z2, rho):
    """Upper orthant probability ``Pr(G1 > z1, G2 > z2)`` of a standard bivariate normal.

    Gauss-Legendre integration of the Drezner-Wesolowsky representation
    (Genz's BVNU), accurate to about 1e-15 absolute.
    """
    z1, z2, rho = np.broadcast_arrays(np.asarray(z1, float), np.asarray(z2, float), np.asarray(rho, float))
    if np.any(np.abs(rho) > 1):
        raise ValueError("correlation must lie in [-1, 1]")
    shape = z1.shape
    h, k, r = (np.array(v, dtype=float).ravel() for v in (z1, z2, rho))
    out = np.empty(r.shape)
    inf_h, inf_k = np.isinf(h), np.isinf(k)
    finite = ~(inf_h | inf_k)
    out[~finite] = np.where(
        (h[~finite] == np.inf) | (k[~finite] == np.inf), 0.0, ndtr(-h[~finite]) * ndtr(-k[~finite])
    )
    zero = finite & (r == 0)
    out[zero] = ndtr(-h[zero]) * ndtr(-k[zero])
    rest = finite & (r != 0)
    if rest.any():
        out[rest] = _bvnu(h[rest], k[rest], r[rest])
    return out.reshape(shape) if shape else float(out[0])


def bvn_density(z1, z2, rho):
    z1, z2, rho = (np.asarray(v, dtype=float) for v in (z1, z2, rho))
    om = 1.0 - rho * rho
    q = (z1 * z1 - 2 * rho * z1 * z2 + z2 * z2) / om
    return np.exp(-0.5 * q) / (2 * math.pi * np.sqrt(om))


# ---------------------------------------------------------------------------
# censored pair density
# ---------------------------------------------------------------------------


def _censoring_level(gp: GaussCopulaParams) -> float:
    """Gaussian quantile of the non-exceedance probability ``kappa / (kappa + 1)``."""
    return float(-ndtri(1.0 / (gp.censoring_rate + 1.0)))


def _margin_terms(y, gp: GaussCopulaParams):
    """Normal scores and log marginal densities of positive excesses."""
    m = gp.margins
    v = excess_rate_argument(y, m)
    surv = 1.0 / (v + 1.0)
    z = -ndtri(surv)
    logf = log_jacobian(y, m) - 2.0 * np.log1p(v)
    return z, logf


def _log_f00(zu, rho):
    rho = np.asarray(rho, dtype=float)
    return np.log(bvn_upper(-zu, -zu, np.minimum(rho, RHO_MAX)))


def _log_f_mixed(zu, rho, z, logf):
    rho = np.minimum(rho, RHO_MAX)
    return log_ndtr((zu - rho * z) / np.sqrt(1.0 - rho * rho)) + logf


def _log_f_joint(rho, z1, z2, logf):
    rho = np.minimum(rho, RHO_MAX)
    om = 1.0 - rho * rho
    logc = -0.5 * np.log(om) - (rho * rho * (z1 * z1 + z2 * z2) - 2.0 * rho * z1 * z2) / (2.0 * om)
    return logc + logf


def log_gauss_pair_density(y1, y2, rho, gp: GaussCopulaParams):
    """Log censored density of a pair with copula correlation ``rho`` (arrays broadcast)."""
    y1, y2, rho = np.broadcast_arrays(np.asarray(y1, float), np.asarray(y2, float), np.asarray(rho, float))
    if np.any(y1 < 0) or np.any(y2 < 0):
        raise ValueError("censored excesses must be non-negative")
    zu = _censoring_level(gp)
    out = np.empty(y1.shape)
    with np.errstate(all="ignore"):
        z1, z2 = y1 == 0, y2 == 0
        m = z1 & z2
        if m.any():
            out[m] = _log_f00(zu, rho[m])
        for a, b in ((y1, y2), (y2, y1)):
            m = (a > 0) & (b == 0)
            z, lf = _margin_terms(a[m], gp)
            out[m] = _log_f_mixed(zu, rho[m], z, lf)
        m = ~z1 & ~z2
        za, la = _margin_terms(y1[m], gp)
        zb, lb = _margin_terms(y2[m], gp)
        out[m] = _log_f_joint(rho[m], za, zb, la + lb)
    if not np.all(np.isfinite(out)):
        raise ParameterRegionError("Gaussian pair density is not positive and finite")
    return out


def gauss_pair_density(y1, y2, x1: SpaceTimePoint, x2: SpaceTimePoint, gp: GaussCopulaParams) -> float:
    return float(np.exp(log_gauss_pair_density(y1, y2, correlation(x1, x2, gp), gp)))


class GaussianCopulaFamily:
    """Pair-likelihood plug-in for one correlation family."""

    kinds = {
        "anisotropy_angle": "angle", "axis_ratio": "log", "spatial_range": "log",
        "temporal_range": "log", "velocity_x": "raw", "velocity_y": "raw",
        "censoring_rate": "log", "gp_scale": "log", "gp_shape": "raw",
    }

    def __init__(self, family: str):
        if family not in FAMILIES:
            raise ValueError(f"unknown copula family {family!r}")
        self.family = family
        self.name = f"gauss_{family}"
        if family == "separable":
            self.default_free = ("anisotropy_angle", "axis_ratio", "spatial_range", "temporal_range")
        else:
            self.default_free = ("anisotropy_angle", "axis_ratio", "spatial_range", "velocity_x", "velocity_y")
        self.param_names = self.default_free + ("censoring_rate", "gp_scale", "gp_shape")

    def values(self, p: GaussCopulaParams) -> dict:
        return {
            "anisotropy_angle": p.anisotropy_angle, "axis_ratio": p.axis_ratio,
            "spatial_range": p.spatial_range, "temporal_range": p.temporal_range,
            "velocity_x": p.velocity[0], "velocity_y": p.velocity[1],
            "censoring_rate": p.censoring_rate, "gp_scale": p.gp_scale, "gp_shape": p.gp_shape,
        }

    def build(self, p: GaussCopulaParams, vals: dict) -> GaussCopulaParams:
        v = {**self.values(p), **vals}
        return replace(
            p, family=self.family, anisotropy_angle=v["anisotropy_angle"], axis_ratio=v["axis_ratio"],
            spatial_range=v["spatial_range"], temporal_range=v["temporal_range"],
            velocity=(v["velocity_x"], v["velocity_y"]), censoring_rate=v["censoring_rate"],
            gp_scale=v["gp_scale"], gp_shape=v["gp_shape"],
        )

    def step(self, name: str, p: GaussCopulaParams) -> float:
        kind = self.kinds[name]
        if kind == "log":
            return 0.25
        if kind == "angle":
            return 0.4
        if name.startswith("velocity"):
            return 0.25 * p.spatial_range
        return 0.1

    def margin_key(self, p):
        return (p.censoring_rate, p.gp_scale, p.gp_shape)

    def class_values(self, p, index) -> np.ndarray:
        return correlation_lags(index.spatial_lag, index.time_lag, p)

    def record_terms(self, p, index) -> dict:
        zm, lm = _margin_terms(index.mixed_y, p)
        z1, l1 = _margin_terms(index.joint_y1, p)
        z2, l2 = _margin_terms(index.joint_y2, p)
        return {"zm": zm, "lm": lm, "z1": z1, "z2": z2, "lj": l1 + l2, "zu": _censoring_level(p)}

    def log_f00(self, p, rho):
        return _log_f00(_censoring_level(p), rho)

    def log_f_mixed(self, p, rho, terms, sl):
        return _log_f_mixed(terms["zu"], rho, terms["zm"][sl], terms["lm"][sl])

    def log_f_joint(self, p, rho, terms, sl):
        return _log_f_joint(rho, terms["z1"][sl], terms["z2"][sl], terms["lj"][sl])

    def log_pair_density(self, y1, y2, rho, p):
        return log_gauss_pair_density(y1, y2, rho, p)

    def log_marginal(self, p, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape)
        z = y == 0
        out[z] = math.log(p.censoring_rate / (p.censoring_rate + 1.0))
        out[~z] = _margin_terms(y[~z], p)[1]
        return out


def fit_baseline(panel: ExceedancePanel, scheme, family: str, init: GaussCopulaParams | None = None, free=None, **kw):
    """Pairwise-likelihood fit of a censored Gaussian copula; same options as :func:`stexceed.likelihood.fit`."""
    fam = GaussianCopulaFamily(family)
    init = replace(init, family=family) if init is not None else GaussCopulaParams(family)
    return fit(panel, scheme, init, free=free or fam.default_free, family=fam, **kw)


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def _to_excess(g: np.ndarray, gp: GaussCopulaParams) -> np.ndarray:
    """Map standard normal values to censored excesses with the shared margins."""
    from .model import marginal_transform

    zu = _censoring_level(gp)
    surv = ndtr(-g)
    # unit-margin excess solves 1 / (kappa + 1 + y) = survival
    y = np.where(g > zu, np.maximum(1.0 / surv - 1.0 - gp.censoring_rate, 0.0), 0.0)
    m = gp.margins
    return y if m.identity_margins else marginal_transform(y, m)


def simulate_gaussian_panel(design: SimulationDesign, gp: GaussCopulaParams, memory: int = 5) -> ExceedancePanel:
    """Censored exceedances of a Gaussian copula on ``design`` (regular time grid).

    The separable family is simulated exactly as a vector autoregression.
    The frozen-field families are simulated sequentially, each time step
    conditioned on the previous ``memory`` steps only, which is an
    approximation whenever the correlation extends further back in time.
    """
    sites, times = design.sites, design.times
    S, T = sites.shape[0], times.size
    dt = float(times[1] - times[0]) if T > 1 else 1.0
    if T > 2 and not np.allclose(np.diff(times), dt):
        raise ValueError("Gaussian copula simulation needs a regular time grid")
    rng = np.random.default_rng(np.random.SeedSequence(design.seed, spawn_key=(3,)))
    lag = sites[None, :, :] - sites[:, None, :]
    g = np.empty((S, T))
    if gp.family == "separable":
        spatial = correlation_lags(lag, 0.0, gp)
        L = cholesky(spatial + 1e-12 * np.eye(S), lower=True)
        a = math.exp(-dt / gp.temporal_range)
        g[:, 0] = L @ rng.standard_normal(S)
        scale = math.sqrt(1.0 - a * a)
        for t in range(1, T):
            g[:, t] = a * g[:, t - 1] + scale * (L @ rng.standard_normal(S))
    else:
        m = max(0, min(memory, T - 1))
        n = (m + 1) * S
        # block (a, b) holds the correlation between time offsets a and b
        offs = np.repeat(np.arange(m + 1), S)
        sidx = np.tile(np.arange(S), m + 1)
        cov = correlation_lags(lag[sidx[:, None], sidx[None, :]], (offs[None, :] - offs[:, None]) * dt, gp)
        cov = cov + 1e-10 * np.eye(n)
        L0 = cholesky(cov[:S, :S], lower=True)
        g[:, 0] = L0 @ rng.standard_normal(S)
        # regression of the newest step on up to m previous ones
        plans = []
        for j in range(1, m + 1):
            past = slice((m - j) * S, m * S)
            new = slice(m * S, n)
            cf = cho_factor(cov[past, past], lower=True)
            B = cho_solve(cf, cov[past, new]).T
            cond = cov[new, new] - B @ cov[past, new]
            plans.append((B, cholesky(0.5 * (cond + cond.T) + 1e-12 * np.eye(S), lower=True)))
        for t in range(1, T):
            j = min(t, m)
            if j == 0:
                g[:, t] = L0 @ rng.standard_normal(S)
                continue
            B, Lc = plans[j - 1]
            prev = g[:, t - j : t].T.ravel()
            g[:, t] = B @ prev + Lc @ rng.standard_normal(S)
    y = _to_excess(g, gp)
    return ExceedancePanel(sites, y, times=times, meta={"seed": design.seed, "family": gp.family})
