"""Censored pairwise likelihood, its maximization, Godambe information and CLIC.

The likelihood sums log bivariate densities over pairs ``(Y(s_i, t), Y(s_j, t+k))``
with ``0 <= k <= max_lag`` and ``|s_i - s_j| <= max_distance``; contemporaneous
pairs are counted once and self pairs only at positive lags.

All pair terms are grouped by their *class* ``(i, j, k)``. The dependence
quantity (overlap mass for the hierarchical model, correlation for the
Gaussian copulas) is a function of the class only, so the doubly-censored
pairs reduce to one count per class and only pairs with at least one positive
excess are evaluated individually.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import overlap_volumes
from .model import ModelParams, excess_rate_argument, log_jacobian
from .optim import Reparam, minimize_nm
from .panel import ExceedancePanel

__all__ = [
    "PairScheme",
    "PairIndex",
    "ParameterRegionError",
    "SingularHessianError",
    "HierarchicalFamily",
    "FitResult",
    "GodambeResult",
    "log_pair_density",
    "pair_density",
    "pair_index",
    "pairwise_loglik",
    "per_time_loglik",
    "pair_contributions",
    "independence_loglik",
    "fit",
    "godambe",
    "clic",
    "clic_from_matrices",
    "default_block_length",
    "temporal_blocks",
]

log = logging.getLogger(__name__)

TIME_BLOCK = 256


class ParameterRegionError(ValueError):
    """Raised when a pair density is not a positive finite number."""


class SingularHessianError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PairScheme:
    """Cut-off weights: pairs closer than ``max_distance`` (inclusive) up to ``max_lag`` steps apart."""

    max_distance: float
    max_lag: int

    def __post_init__(self):
        if not self.max_distance >= 0:
            raise ValueError("max_distance must be non-negative")
        if int(self.max_lag) != self.max_lag or self.max_lag < 0:
            raise ValueError("max_lag must be a non-negative integer")


# ---------------------------------------------------------------------------
# pair enumeration
# ---------------------------------------------------------------------------


class PairIndex:
    """Pair classes, censored-pair counts and uncensored pair records of a panel.

    Records are stored in increasing order of the first time index so that
    contiguous slices correspond to fixed blocks of ``TIME_BLOCK`` time steps.
    """

    def __init__(self, panel: ExceedancePanel, scheme: PairScheme):
        S, T = panel.n_sites, panel.n_times
        dt = panel.time_step()
        K = int(min(scheme.max_lag, T - 1))
        sites = panel.sites
        diff = sites[None, :, :] - sites[:, None, :]
        near = np.hypot(diff[..., 0], diff[..., 1]) <= scheme.max_distance

        obs = panel.observed
        y = panel.filled(0.0)
        pos = obs & (y > 0)
        zero = obs & (y == 0)
        zf = zero.astype(float)

        lookup = np.full((K + 1, S, S), -1, dtype=np.int64)
        ci, cj, ck, n00 = [], [], [], []
        upper = np.triu(np.ones((S, S), dtype=bool), 1)
        masks = []
        n = 0
        for k in range(K + 1):
            m = near & upper if k == 0 else near.copy()
            ii, jj = np.nonzero(m)
            lookup[k, ii, jj] = np.arange(n, n + ii.size)
            n += ii.size
            ci.append(ii)
            cj.append(jj)
            ck.append(np.full(ii.size, k))
            counts = zf[:, : T - k] @ zf[:, k:].T
            n00.append(counts[ii, jj])
            masks.append(m)
        self.cls_i = np.concatenate(ci)
        self.cls_j = np.concatenate(cj)
        self.cls_k = np.concatenate(ck)
        self.n00 = np.concatenate(n00)
        self.lookup = lookup
        self.spatial_lag = sites[self.cls_j] - sites[self.cls_i]
        self.time_lag = self.cls_k * dt
        self.zero = zf
        self.masks = masks
        self.n_sites, self.n_times, self.max_lag, self.time_step = S, T, K, dt

        chunk = max(1, int(4_000_000 // max(S * S, 1)))
        mt, mc, my, jt, jc, j1, j2 = [], [], [], [], [], [], []
        for a in range(0, T, chunk):
            for k in range(K + 1):
                b = min(a + chunk, T - k)
                if b <= a:
                    continue
                cand = (
                    masks[k][:, :, None]
                    & obs[:, None, a:b]
                    & obs[None, :, a + k : b + k]
                    & (pos[:, None, a:b] | pos[None, :, a + k : b + k])
                )
                ii, jj, tt = np.nonzero(cand)
                tt = tt + a
                y1 = y[ii, tt]
                y2 = y[jj, tt + k]
                cls = lookup[k, ii, jj]
                both = (y1 > 0) & (y2 > 0)
                one = ~both
                mt.append(tt[one])
                mc.append(cls[one])
                my.append(np.maximum(y1[one], y2[one]))
                jt.append(tt[both])
                jc.append(cls[both])
                j1.append(y1[both])
                j2.append(y2[both])

        def _cat(parts, dtype):
            return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype)

        order_m = np.argsort(_cat(mt, np.int64), kind="stable")
        order_j = np.argsort(_cat(jt, np.int64), kind="stable")
        self.mixed_t = _cat(mt, np.int64)[order_m]
        self.mixed_cls = _cat(mc, np.int64)[order_m]
        self.mixed_y = _cat(my, float)[order_m]
        self.joint_t = _cat(jt, np.int64)[order_j]
        self.joint_cls = _cat(jc, np.int64)[order_j]
        self.joint_y1 = _cat(j1, float)[order_j]
        self.joint_y2 = _cat(j2, float)[order_j]

        edges = np.arange(0, T + TIME_BLOCK, TIME_BLOCK)
        self.mixed_edges = np.searchsorted(self.mixed_t, edges)
        self.joint_edges = np.searchsorted(self.joint_t, edges)
        self.n_blocks = len(edges) - 1
        self._terms_cache: dict = {}

    @property
    def n_classes(self) -> int:
        return self.cls_i.size

    @property
    def n_pairs(self) -> int:
        return int(self.n00.sum()) + self.mixed_t.size + self.joint_t.size

    def record_terms(self, family, params):
        key = (family.name, family.margin_key(params))
        terms = self._terms_cache.get(key)
        if terms is None:
            if len(self._terms_cache) > 8:
                self._terms_cache.clear()
            terms = family.record_terms(params, self)
            self._terms_cache[key] = terms
        return terms


def pair_index(panel: ExceedancePanel, scheme: PairScheme) -> PairIndex:
    """Pair index of ``panel`` under ``scheme``, built once and cached on the panel."""
    cache = panel.__dict__.setdefault("_pair_index_cache", {})
    idx = cache.get(scheme)
    if idx is None:
        idx = PairIndex(panel, scheme)
        cache[scheme] = idx
    return idx


# ---------------------------------------------------------------------------
# hierarchical pair density
# ---------------------------------------------------------------------------


def _lr(v, rate):
    return -np.log1p(v / rate)


def _mixed_terms(y, p: ModelParams):
    v = excess_rate_argument(y, p)
    b = p.rate
    vk = v + p.censoring_rate
    return {
        "L1": _lr(v, b),
        "L12": _lr(vk, b),
        "log_a1": -np.log(v + b),
        "a12_over_a1": (v + b) / (vk + b),
        "logJ": log_jacobian(y, p),
    }


def _joint_terms(y1, y2, p: ModelParams):
    v1 = excess_rate_argument(y1, p)
    v2 = excess_rate_argument(y2, p)
    b = p.rate
    a1, a2, a12 = 1.0 / (v1 + b), 1.0 / (v2 + b), 1.0 / (v1 + v2 + b)
    return {
        "L1pL2": _lr(v1, b) + _lr(v2, b),
        "L12": _lr(v1 + v2, b),
        "s1": a12 * (a1 + a2),
        "s2": a1 * a2,
        "s3": a12 * a12,
        "logJ": log_jacobian(y1, p) + log_jacobian(y2, p),
    }


def _log_f00(c0, c2, p: ModelParams):
    lk = _lr(p.censoring_rate, p.rate)
    l2k = _lr(2.0 * p.censoring_rate, p.rate)
    c1 = c0 - c2
    return np.log(1.0 - 2.0 * math.exp(c0 * lk) + np.exp(2.0 * c1 * lk + c2 * l2k))


def _log_f_mixed(c0, c2, t, p: ModelParams, sl=slice(None)):
    c1 = c0 - c2
    lk = _lr(p.censoring_rate, p.rate)
    L1, L12 = t["L1"][sl], t["L12"][sl]
    ratio = np.exp(c2 * (L12 - L1) + c1 * lk) * (c1 + c2 * t["a12_over_a1"][sl]) / c0
    return math.log(c0) + t["log_a1"][sl] + c0 * L1 + np.log1p(-ratio) + t["logJ"][sl]


def _log_f_joint(c0, c2, t, sl=slice(None)):
    c1 = c0 - c2
    bracket = c1 * (c2 * t["s1"][sl] + c1 * t["s2"][sl]) + c2 * (c2 + 1.0) * t["s3"][sl]
    return c1 * t["L1pL2"][sl] + c2 * t["L12"][sl] + np.log(bracket) + t["logJ"][sl]


def log_pair_density(y1, y2, c2, p: ModelParams):
    """Log censored bivariate density for overlap mass ``c2`` (arrays broadcast).

    Pairs with both values zero get the probability mass of the censored
    corner, pairs with one positive value the mixed density/probability term
    and pairs with two positive values the joint density.
    """
    y1, y2, c2 = np.broadcast_arrays(
        np.asarray(y1, float), np.asarray(y2, float), np.asarray(c2, float)
    )
    if np.any(y1 < 0) or np.any(y2 < 0):
        raise ValueError("censored excesses must be non-negative")
    c0 = p.shape
    out = np.empty(y1.shape)
    z1, z2 = y1 == 0, y2 == 0
    m = z1 & z2
    out[m] = _log_f00(c0, c2[m], p)
    m = ~z1 & z2
    out[m] = _log_f_mixed(c0, c2[m], _mixed_terms(y1[m], p), p)
    m = z1 & ~z2
    out[m] = _log_f_mixed(c0, c2[m], _mixed_terms(y2[m], p), p)
    m = ~z1 & ~z2
    out[m] = _log_f_joint(c0, c2[m], _joint_terms(y1[m], y2[m], p))
    if not np.all(np.isfinite(out)):
        raise ParameterRegionError("pair density is not positive and finite")
    return out


def pair_density(y1, y2, x1, x2, p: ModelParams) -> float:
    """Censored bivariate density of ``(Y(x1), Y(x2))`` at ``(y1, y2)``."""
    from .model import pair_exponents

    c2 = pair_exponents(x1, x2, p).c2
    return float(np.exp(log_pair_density(y1, y2, c2, p)))


class HierarchicalFamily:
    """Pair-likelihood plug-in for the Gamma-convolution model."""

    name = "hierarchical"
    param_names = (
        "semi_axis1", "semi_axis2", "angle", "duration", "velocity_x", "velocity_y",
        "shape", "rate", "censoring_rate", "gp_scale", "gp_shape",
    )
    kinds = {
        "semi_axis1": "log", "semi_axis2": "log", "angle": "angle", "duration": "log",
        "velocity_x": "raw", "velocity_y": "raw", "shape": "log", "rate": "log",
        "censoring_rate": "log", "gp_scale": "log", "gp_shape": "raw",
    }

    def values(self, p: ModelParams) -> dict:
        k = p.kernel
        return {
            "semi_axis1": k.semi_axis1, "semi_axis2": k.semi_axis2, "angle": k.angle,
            "duration": k.duration, "velocity_x": k.velocity[0], "velocity_y": k.velocity[1],
            "shape": p.shape, "rate": p.rate, "censoring_rate": p.censoring_rate,
            "gp_scale": p.gp_scale, "gp_shape": p.gp_shape,
        }

    def build(self, p: ModelParams, vals: dict) -> ModelParams:
        v = {**self.values(p), **vals}
        kernel = replace(
            p.kernel, semi_axis1=v["semi_axis1"], semi_axis2=v["semi_axis2"], angle=v["angle"],
            duration=v["duration"], velocity=(v["velocity_x"], v["velocity_y"]),
        )
        return ModelParams(
            kernel, shape=v["shape"], rate=v["rate"], censoring_rate=v["censoring_rate"],
            gp_scale=v["gp_scale"], gp_shape=v["gp_shape"],
        )

    def step(self, name: str, p: ModelParams) -> float:
        kind = self.kinds[name]
        if kind == "log":
            return 0.25
        if kind == "angle":
            return 0.4
        if name.startswith("velocity"):
            k = p.kernel
            return 0.5 * math.sqrt(k.semi_axis1 * k.semi_axis2) / k.duration
        return 0.1

    def kinks(self, name: str, index: PairIndex) -> np.ndarray:
        """Values of ``name`` where the pairwise log-likelihood is not differentiable.

        The overlap of two cylinders at time lag ``u`` changes slope when the
        duration crosses ``|u|``, at the same value for every pair at that lag.
        """
        if name == "duration":
            return np.unique(np.abs(index.time_lag))
        return np.empty(0)

    def margin_key(self, p: ModelParams):
        return (p.rate, p.censoring_rate, p.gp_scale, p.gp_shape)

    def class_values(self, p: ModelParams, index: PairIndex) -> np.ndarray:
        vol = overlap_volumes(index.spatial_lag, index.time_lag, p.kernel)
        return np.minimum(p.shape * vol / p.kernel.volume, p.shape)

    def record_terms(self, p: ModelParams, index: PairIndex) -> dict:
        return {
            "mixed": _mixed_terms(index.mixed_y, p),
            "joint": _joint_terms(index.joint_y1, index.joint_y2, p),
        }

    def log_f00(self, p: ModelParams, q):
        return _log_f00(p.shape, q, p)

    def log_f_mixed(self, p: ModelParams, q, terms, sl):
        return _log_f_mixed(p.shape, q, terms["mixed"], p, sl)

    def log_f_joint(self, p: ModelParams, q, terms, sl):
        return _log_f_joint(p.shape, q, terms["joint"], sl)

    def log_marginal(self, p: ModelParams, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.empty(y.shape)
        z = y == 0
        lk = _lr(p.censoring_rate, p.rate)
        out[z] = math.log(-math.expm1(p.shape * lk))
        v = excess_rate_argument(y[~z], p)
        out[~z] = math.log(p.shape) - np.log(v + p.rate) + p.shape * _lr(v, p.rate) + log_jacobian(y[~z], p)
        return out


HIERARCHICAL = HierarchicalFamily()


# ---------------------------------------------------------------------------
# likelihood evaluation
# ---------------------------------------------------------------------------


def _class_log_terms(index, family, params, independent):
    if independent:
        q = np.zeros(index.n_classes)
    else:
        q = family.class_values(params, index)
    return q, family.log_f00(params, q), index.record_terms(family, params)


def _block_sum(index, family, params, q, terms, b):
    sm = slice(index.mixed_edges[b], index.mixed_edges[b + 1])
    sj = slice(index.joint_edges[b], index.joint_edges[b + 1])
    lm = family.log_f_mixed(params, q[index.mixed_cls[sm]], terms, sm)
    lj = family.log_f_joint(params, q[index.joint_cls[sj]], terms, sj)
    return float(lm.sum()) + float(lj.sum())


def _total(index, family, params, n_threads=1, independent=False) -> float:
    with np.errstate(all="ignore"):
        q, l00, terms = _class_log_terms(index, family, params, independent)
        used = index.n00 > 0
        total = float(np.dot(index.n00[used], l00[used]))
        blocks = range(index.n_blocks)
        if n_threads > 1:
            with ThreadPoolExecutor(n_threads) as ex:
                parts = list(ex.map(lambda b: _block_sum(index, family, params, q, terms, b), blocks))
        else:
            parts = [_block_sum(index, family, params, q, terms, b) for b in blocks]
    for s in parts:
        total += s
    if not math.isfinite(total):
        raise ParameterRegionError("pairwise log-likelihood is not finite")
    return total


def pairwise_loglik(panel, scheme, params, family=None, n_threads: int = 1, independent=False) -> float:
    """Weighted censored pairwise log-likelihood.

    The doubly censored pairs are summed per class and the remaining pairs
    in blocks of ``TIME_BLOCK`` consecutive time steps. Blocks are reduced in
    a fixed order, so the result does not depend on ``n_threads``.
    """
    family = family or HIERARCHICAL
    index = pair_index(panel, scheme)
    if index.n_pairs == 0:
        raise ValueError("no pairs retained by the pair scheme")
    return _total(index, family, params, n_threads, independent)


def _per_time(index, family, params, independent=False) -> np.ndarray:
    with np.errstate(all="ignore"):
        q, l00, terms = _class_log_terms(index, family, params, independent)
        T, S = index.n_times, index.n_sites
        out = np.zeros(T)
        zt = index.zero.T
        start = 0
        for k in range(index.max_lag + 1):
            mask = index.cls_k == k
            w = np.zeros((S, S))
            w[index.cls_i[mask], index.cls_j[mask]] = np.where(index.n00[mask] > 0, l00[mask], 0.0)
            out[: T - k] += ((zt[: T - k] @ w) * zt[k:]).sum(axis=1)
            start += mask.sum()
        lm = family.log_f_mixed(params, q[index.mixed_cls], terms, slice(None))
        lj = family.log_f_joint(params, q[index.joint_cls], terms, slice(None))
        out += np.bincount(index.mixed_t, weights=lm, minlength=T)
        out += np.bincount(index.joint_t, weights=lj, minlength=T)
    if not np.all(np.isfinite(out)):
        raise ParameterRegionError("pairwise log-likelihood is not finite")
    return out


def per_time_loglik(panel, scheme, params, family=None) -> np.ndarray:
    """Contributions ``pl_t`` of the pairs whose first member is at time index ``t``."""
    family = family or HIERARCHICAL
    return _per_time(pair_index(panel, scheme), family, params)


def pair_contributions(panel, scheme, params, family=None) -> dict:
    """Every retained pair with its log contribution (small panels only).

    Returns a dict of equal-length arrays ``t, k, i, j, y1, y2, logf``.
    """
    family = family or HIERARCHICAL
    index = pair_index(panel, scheme)
    q = family.class_values(params, index)
    y = panel.filled(0.0)
    obs = panel.observed
    rows = {key: [] for key in ("t", "k", "i", "j")}
    T = panel.n_times
    for c in range(index.n_classes):
        i, j, k = index.cls_i[c], index.cls_j[c], index.cls_k[c]
        t = np.nonzero(obs[i, : T - k] & obs[j, k:])[0]
        rows["t"].append(t)
        rows["k"].append(np.full(t.size, k))
        rows["i"].append(np.full(t.size, i))
        rows["j"].append(np.full(t.size, j))
    out = {key: np.concatenate(v) if v else np.empty(0, int) for key, v in rows.items()}
    out["y1"] = y[out["i"], out["t"]]
    out["y2"] = y[out["j"], out["t"] + out["k"]]
    cls = index.lookup[out["k"], out["i"], out["j"]]
    if family is HIERARCHICAL or isinstance(family, HierarchicalFamily):
        out["logf"] = log_pair_density(out["y1"], out["y2"], q[cls], params)
    else:
        out["logf"] = family.log_pair_density(out["y1"], out["y2"], q[cls], params)
    return out


def independence_loglik(panel, params, family=None) -> float:
    """Log-likelihood of all observed values under the fitted margins and independence."""
    family = family or HIERARCHICAL
    y = panel.values[panel.observed]
    return float(family.log_marginal(params, y).sum())


# ---------------------------------------------------------------------------
# fitting and uncertainty
# ---------------------------------------------------------------------------


@dataclass
class GodambeResult:
    hessian: np.ndarray
    variability: np.ndarray
    godambe: np.ndarray
    covariance: np.ndarray
    std_errors: dict
    score: np.ndarray
    penalty: float
    names: tuple
    n_blocks: int
    block_length: int
    kink_adjusted: tuple = ()


@dataclass
class FitResult:
    """Outcome of a pairwise-likelihood fit.

    ``hessian`` and ``variability`` are the estimates of ``H`` and ``J`` on the
    optimizer's (log / raw) scale; ``std_errors`` are on the natural scale.
    ``clic_star = clic_constant * clic``.
    """

    family: str
    params: object
    free: tuple
    estimates: dict
    pl_value: float
    converged: bool
    n_evaluations: int
    message: str
    n_pairs: int
    trace: np.ndarray = field(repr=False, default=None)
    std_errors: dict | None = None
    hessian: np.ndarray | None = field(repr=False, default=None)
    variability: np.ndarray | None = field(repr=False, default=None)
    godambe: np.ndarray | None = field(repr=False, default=None)
    clic: float | None = None
    clic_star: float | None = None
    clic_constant: float | None = None
    godambe_error: str | None = None

    @property
    def theta_hat(self):
        return self.params

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        params = self.params
        if hasattr(params, "__dataclass_fields__"):
            params = _jsonable(asdict(params))
        return {
            "schema": "stexceed.fit/1",
            "family": self.family,
            "free": list(self.free),
            "estimates": self.estimates,
            "std_errors": self.std_errors,
            "params": params,
            "pl_value": self.pl_value,
            "converged": self.converged,
            "n_evaluations": self.n_evaluations,
            "message": self.message,
            "n_pairs": self.n_pairs,
            "clic": self.clic,
            "clic_star": self.clic_star,
            "clic_constant": self.clic_constant,
            "hessian": arr(self.hessian),
            "variability": arr(self.variability),
            "godambe": arr(self.godambe),
            "godambe_error": self.godambe_error,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, **kw)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


DEFAULT_FREE = ("semi_axis1", "semi_axis2", "angle", "duration", "velocity_x", "velocity_y")


def _objective(index, family, template, reparam, n_threads):
    def f(eta):
        try:
            vals = dict(zip(reparam.names, reparam.backward(eta)))
            params = family.build(template, vals)
            return -_total(index, family, params, n_threads)
        except (ValueError, OverflowError, ZeroDivisionError):
            return np.inf

    return f


def fit(
    panel: ExceedancePanel,
    scheme: PairScheme,
    init,
    bounds: dict | None = None,
    free=DEFAULT_FREE,
    family=None,
    maxfev: int = 3000,
    xatol: float = 1e-4,
    fatol: float = 1e-3,
    restarts: int = 1,
    multistart: int = 0,
    seed=None,
    compute_se: bool = False,
    n_blocks: int | None = None,
    block_length: int | None = None,
    n_threads: int = 1,
) -> FitResult:
    """Maximize the pairwise log-likelihood over the parameters named in ``free``.

    Parameters not in ``free`` stay at their value in ``init``. ``bounds``
    maps parameter names to natural-scale ``(low, high)`` limits.
    ``multistart`` extra starts are drawn around ``init`` (seeded) and the
    best local optimum is kept. With ``compute_se`` the Godambe information
    and CLIC values are filled in.
    """
    family = family or HIERARCHICAL
    free = tuple(free)
    unknown = set(free) - set(family.param_names)
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)} for {family.name}")
    index = pair_index(panel, scheme)
    if index.n_pairs == 0:
        raise ValueError("no pairs retained by the pair scheme")
    reparam = Reparam(free, tuple(family.kinds[n] for n in free))
    start_vals = family.values(init)
    eta0 = reparam.forward([start_vals[n] for n in free])
    steps = np.array([family.step(n, init) for n in free])
    objective = _objective(index, family, init, reparam, n_threads)

    starts = [eta0]
    rng = np.random.default_rng(seed)
    for _ in range(multistart):
        starts.append(eta0 + steps * rng.uniform(-1.5, 1.5, size=eta0.size))
    best = None
    for eta in starts:
        res = minimize_nm(objective, eta, steps, reparam.bounds(bounds), maxfev, xatol, fatol, restarts)
        if best is None or res.fun < best.fun:
            best = res
    if not best.success:
        log.warning("pairwise likelihood fit did not converge: %s", best.message)

    vals = dict(zip(free, reparam.backward(best.x)))
    params = family.build(init, vals)
    trace = np.array(best.trace)
    trace[:, 0] = -trace[:, 0]
    result = FitResult(
        family=family.name,
        params=params,
        free=free,
        estimates={k: float(v) for k, v in vals.items()},
        pl_value=-best.fun,
        converged=best.success,
        n_evaluations=best.nfev,
        message=best.message,
        n_pairs=index.n_pairs,
        trace=trace,
    )
    if compute_se:
        try:
            g = godambe(panel, scheme, result, n_blocks=n_blocks, block_length=block_length, family=family)
            attach_godambe(result, g, panel, scheme, family)
        except (SingularHessianError, ParameterRegionError) as err:
            result.godambe_error = str(err)
            log.warning("Godambe information unavailable: %s", err)
    return result


def attach_godambe(result: FitResult, g: GodambeResult, panel, scheme, family=None):
    family = family or HIERARCHICAL
    result.std_errors = g.std_errors
    result.hessian, result.variability, result.godambe = g.hessian, g.variability, g.godambe
    c = clic_constant(panel, scheme, result.params, family)
    result.clic, result.clic_star = clic_from_matrices(result.pl_value, g.hessian, g.variability, c)
    result.clic_constant = c
    return result


def default_block_length(n_times: int, max_lag: int) -> int:
    """Subsampling block length: 1000 of 54542 hours scaled to the series, at least two lag windows."""
    return int(min(n_times, max(2 * (max_lag + 1), round(n_times * 1000 / 54542))))


def temporal_blocks(n_times: int, n_blocks: int, block_length: int) -> np.ndarray:
    """Start indices of ``n_blocks`` overlapping blocks with a uniform stride."""
    if block_length > n_times:
        raise ValueError("block length exceeds the series length")
    if n_blocks == 1:
        return np.array([0])
    stride = max(1, math.ceil((n_times - block_length) / (n_blocks - 1)))
    starts = np.minimum(np.arange(n_blocks) * stride, n_times - block_length)
    return starts


def godambe(
    panel,
    scheme,
    fit_or_params,
    free=None,
    family=None,
    n_blocks: int | None = None,
    block_length: int | None = None,
    rel_step: float = 1e-4,
) -> GodambeResult:
    """Sensitivity ``H``, variability ``J`` and standard errors at a fitted point.

    ``H`` is minus the finite-difference Hessian of the pairwise
    log-likelihood on the optimizer scale. ``J`` is estimated by subsampling
    overlapping temporal blocks, ``J = T/B * sum_b grad pl_b grad pl_b' / d``.
    """
    family = family or HIERARCHICAL
    if isinstance(fit_or_params, FitResult):
        params = fit_or_params.params
        free = fit_or_params.free if free is None else tuple(free)
    else:
        params = fit_or_params
        free = DEFAULT_FREE if free is None else tuple(free)
    index = pair_index(panel, scheme)
    T = index.n_times
    d = block_length or default_block_length(T, index.max_lag)
    B = n_blocks or min(500, T - d + 1)
    starts = temporal_blocks(T, B, d)

    reparam = Reparam(free, tuple(family.kinds[n] for n in free))
    natural = np.array([family.values(params)[n] for n in free])
    eta = reparam.forward(natural)
    # angles are not wrapped during differencing
    eta[[k == "angle" for k in reparam.kinds]] = natural[[k == "angle" for k in reparam.kinds]]
    h = rel_step * (1.0 + np.abs(eta))
    p = len(free)

    def build(e):
        vals = {}
        for n, kind, v in zip(free, reparam.kinds, e):
            vals[n] = math.exp(v) if kind == "log" else v
        return family.build(params, vals)

    def total(e):
        return _total(index, family, build(e))

    def hessian(center):
        f0 = total(center)
        H = np.zeros((p, p))
        for i in range(p):
            e = center.copy()
            e[i] += h[i]
            fp = total(e)
            e[i] -= 2 * h[i]
            fm = total(e)
            H[i, i] = -(fp - 2 * f0 + fm) / h[i] ** 2
        for i in range(p):
            for j in range(i + 1, p):
                vals = []
                for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    e = center.copy()
                    e[i] += si * h[i]
                    e[j] += sj * h[j]
                    vals.append(total(e))
                H[i, j] = H[j, i] = -(vals[0] - vals[1] - vals[2] + vals[3]) / (4 * h[i] * h[j])
        return 0.5 * (H + H.T)

    # A kink shared by all pairs inside the stencil makes the central second
    # difference grow like 1/h. The stencil is then placed just below and just
    # above the kink and the two Hessians are averaged.
    centers, adjusted = [eta], []
    kinks = getattr(family, "kinks", None)
    for i, (name, kind) in enumerate(zip(free, reparam.kinds)):
        ks = np.asarray(kinks(name, index) if kinks else [], dtype=float)
        if kind == "log":
            ks = np.log(ks[ks > 0])
        near = ks[np.abs(ks - eta[i]) < 2 * h[i]]
        if near.size:
            adjusted.append(name)
            centers = [np.where(np.arange(p) == i, near[0] + sign * 2 * h[i], c) for c in centers for sign in (-1, 1)]
    if adjusted:
        log.info("Hessian stencil moved off likelihood kinks in %s", adjusted)
    H = np.mean([hessian(c) for c in centers], axis=0)

    grads = np.zeros((T, p))
    for i in range(p):
        e = eta.copy()
        e[i] += h[i]
        up = _per_time(index, family, build(e))
        e[i] -= 2 * h[i]
        down = _per_time(index, family, build(e))
        grads[:, i] = (up - down) / (2 * h[i])
    csum = np.vstack([np.zeros(p), np.cumsum(grads, axis=0)])
    block_scores = csum[starts + d] - csum[starts]
    J = (T / len(starts)) * (block_scores.T @ block_scores) / d

    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularHessianError(f"sensitivity matrix is singular (condition number {cond:.3g})")
    Hinv = np.linalg.inv(H)
    cov = Hinv @ J @ Hinv
    jac = reparam.jacobian(natural)
    se_nat = np.sqrt(np.maximum(np.diag(cov), 0.0)) * jac
    try:
        G = H @ np.linalg.solve(J, H)
    except np.linalg.LinAlgError:
        G = np.full_like(H, np.nan)
    return GodambeResult(
        hessian=H,
        variability=J,
        godambe=G,
        covariance=cov,
        std_errors={n: float(s) for n, s in zip(free, se_nat)},
        score=grads.sum(axis=0),
        penalty=float(np.trace(Hinv @ J)),
        names=free,
        n_blocks=len(starts),
        block_length=d,
        kink_adjusted=tuple(adjusted),
    )


def clic_constant(panel, scheme, params, family=None) -> float:
    """Rescaling that puts the pairwise log-likelihood on the scale of the independence log-likelihood.

    The constant is the ratio between the full independence log-likelihood
    and the pairwise log-likelihood of the independence model at the same
    margins, so it is common to all dependence families fitted to a panel.
    """
    family = family or HIERARCHICAL
    full = independence_loglik(panel, params, family)
    pairwise = pairwise_loglik(panel, scheme, params, family, independent=True)
    return full / pairwise


def clic_from_matrices(pl_value: float, H, J, constant: float = 1.0) -> tuple[float, float]:
    H = np.atleast_2d(np.asarray(H, dtype=float))
    J = np.atleast_2d(np.asarray(J, dtype=float))
    cond = np.linalg.cond(H)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularHessianError("sensitivity matrix is singular")
    value = -pl_value + float(np.trace(np.linalg.solve(H, J)))
    return value, constant * value


def clic(fit_result: FitResult) -> tuple[float, float]:
    """(CLIC, CLIC*) of a fit whose Godambe matrices are available."""
    if fit_result.hessian is None:
        raise ValueError("fit has no Godambe information; fit with compute_se=True")
    return clic_from_matrices(
        fit_result.pl_value, fit_result.hessian, fit_result.variability, fit_result.clic_constant or 1.0
    )
