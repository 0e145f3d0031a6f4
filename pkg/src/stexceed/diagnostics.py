"""Empirical tail dependence, stationary bootstrap bands and the chi* RMSE comparison.

Marginal thresholds are empirical type-7 quantiles (``numpy.quantile``'s
default ``linear`` method) of each site's observed values; an exceedance is a
value strictly above its threshold.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from .panel import ExceedancePanel

__all__ = [
    "ChiEstimate",
    "BootstrapScheme",
    "BootstrapBand",
    "site_thresholds",
    "chi_from_series",
    "empirical_chi",
    "chi_curve",
    "stationary_bootstrap",
    "bootstrap_indices",
    "nearest_neighbors",
    "chi_star",
    "rmse_comparison",
    "RmseResult",
    "SMOOTHING_BINS",
]

log = logging.getLogger(__name__)

SMOOTHING_BINS = 10


@dataclass
class ChiEstimate:
    lag: float
    q: float
    chi: float
    chibar: float
    n_pairs: int
    ci_lo: float = float("nan")
    ci_hi: float = float("nan")
    chibar_lo: float = float("nan")
    chibar_hi: float = float("nan")


def site_thresholds(values: np.ndarray, q: float) -> np.ndarray:
    """Per-row type-7 empirical quantiles ignoring NaN."""
    if not 0 < q < 1:
        raise ValueError("quantile order must lie in (0, 1)")
    values = np.atleast_2d(values)
    out = np.full(values.shape[0], np.nan)
    for i, row in enumerate(values):
        row = row[np.isfinite(row)]
        if row.size:
            out[i] = np.quantile(row, q)
    return out


def _chi_counts(a, b, ua, ub):
    ok = np.isfinite(a) & np.isfinite(b)
    ea = a[ok] > ua
    eb = b[ok] > ub
    return int(ok.sum()), int(eb.sum()), int((ea & eb).sum())


def _chi_values(n, n_marg, n_joint):
    if n == 0 or n_marg == 0:
        return float("nan"), float("nan")
    chi = n_joint / n_marg
    if n_joint == 0:
        return chi, -1.0
    pm = n_marg / n
    pj = n_joint / n
    chibar = 2.0 * math.log(pm) / math.log(pj) - 1.0 if pj < 1 else 1.0
    return chi, chibar


def chi_from_series(a, b, q: float) -> tuple[float, float]:
    """Plug-in ``(chi(q), chibar(q))`` of two aligned series; NaN marks missing values."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ua = site_thresholds(a[None], q)[0]
    ub = site_thresholds(b[None], q)[0]
    return _chi_values(*_chi_counts(a, b, ua, ub))


def empirical_chi(panel: ExceedancePanel, pairs, q: float, time_lag: int = 0) -> ChiEstimate:
    """Pooled ``chi(q)`` and ``chibar(q)`` over site pairs ``(i, j)`` at a time lag.

    The pair ``(i, j)`` contributes ``(Z_i(t), Z_j(t + time_lag))`` for every
    ``t`` at which both values are observed.
    """
    v = panel.values
    u = site_thresholds(v, q)
    T = panel.n_times
    k = int(time_lag)
    if not 0 <= k < T:
        raise ValueError("time lag outside the series")
    n = m = j = 0
    for a, b in pairs:
        c = _chi_counts(v[a, : T - k], v[b, k:], u[a], u[b])
        n, m, j = n + c[0], m + c[1], j + c[2]
    if n == 0:
        raise ValueError("no complete pair observations at this lag")
    chi, chibar = _chi_values(n, m, j)
    dist = float(np.mean([np.hypot(*(panel.sites[b] - panel.sites[a])) for a, b in pairs]))
    return ChiEstimate(lag=dist if k == 0 else float(k), q=q, chi=chi, chibar=chibar, n_pairs=n)


def _local_linear(x, y, at, bandwidth):
    out = np.full(len(at), np.nan)
    for i, x0 in enumerate(at):
        w = np.exp(-0.5 * ((x - x0) / bandwidth) ** 2)
        if w.sum() <= 0:
            continue
        X = np.column_stack([np.ones_like(x), x - x0])
        WX = X * w[:, None]
        try:
            beta = np.linalg.solve(X.T @ WX, WX.T @ y)
        except np.linalg.LinAlgError:
            beta = [np.average(y, weights=w)]
        out[i] = beta[0]
    return out


def chi_curve(panel: ExceedancePanel, q: float, time_lag: int = 0, n_bins: int = SMOOTHING_BINS, max_distance=None) -> pd.DataFrame:
    """Pair estimates of chi and chibar against distance, binned and smoothed.

    Pairs are grouped into ``n_bins`` equal-count distance bins. The table
    holds the bin mean of the pair estimates and a local-linear smooth
    (Gaussian kernel, bandwidth equal to the median bin width) evaluated at
    the bin mean distance.
    """
    S = panel.n_sites
    v = panel.values
    u = site_thresholds(v, q)
    T = panel.n_times
    k = int(time_lag)
    rows = []
    for a in range(S):
        for b in range(S):
            if k == 0 and b <= a:
                continue
            d = float(np.hypot(*(panel.sites[b] - panel.sites[a])))
            if max_distance is not None and d > max_distance:
                continue
            chi, chibar = _chi_values(*_chi_counts(v[a, : T - k], v[b, k:], u[a], u[b]))
            if np.isfinite(chi):
                rows.append((d, chi, chibar))
    if not rows:
        raise ValueError("no pairs with defined estimates")
    arr = np.array(rows)
    order = np.argsort(arr[:, 0], kind="stable")
    arr = arr[order]
    groups = np.array_split(np.arange(arr.shape[0]), min(n_bins, arr.shape[0]))
    centers = np.array([arr[g, 0].mean() for g in groups])
    widths = np.array([arr[g, 0].max() - arr[g, 0].min() for g in groups])
    bw = max(float(np.median(widths)), 1e-6 * max(1.0, centers.max()))
    return pd.DataFrame(
        {
            "time_lag": k,
            "distance": centers,
            "q": q,
            "n_pairs": [len(g) for g in groups],
            "chi": [arr[g, 1].mean() for g in groups],
            "chibar": [arr[g, 2].mean() for g in groups],
            "chi_smooth": _local_linear(arr[:, 0], arr[:, 1], centers, bw),
            "chibar_smooth": _local_linear(arr[:, 0], arr[:, 2], centers, bw),
            "n_bins": len(groups),
            "smoother": "local_linear_gaussian",
        }
    )


# ---------------------------------------------------------------------------
# stationary bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapScheme:
    """``n_boot`` resamples made of circular blocks with geometric lengths of mean ``mean_block``."""

    n_boot: int = 200
    mean_block: float = 480.0
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.n_boot < 1:
            raise ValueError("n_boot must be at least 1")
        if not self.mean_block >= 1:
            raise ValueError("mean_block must be at least 1")


@dataclass
class BootstrapBand:
    estimate: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    replicates: np.ndarray = field(repr=False)
    degenerate: bool = False


def bootstrap_indices(n_times: int, mean_block: float, rng: np.random.Generator) -> np.ndarray:
    """Time indices of one stationary-bootstrap resample.

    A new block starts after each step with probability ``1 / mean_block``;
    when ``mean_block >= n_times`` the resample is a single block, that is a
    circular rotation of the series.
    """
    start = rng.integers(n_times)
    if mean_block >= n_times:
        return (start + np.arange(n_times)) % n_times
    p = 1.0 / mean_block
    new_block = rng.uniform(size=n_times) < p
    new_block[0] = True
    starts = rng.integers(n_times, size=n_times)
    starts[0] = start
    block_id = np.cumsum(new_block) - 1
    block_first = np.nonzero(new_block)[0]
    offset = np.arange(n_times) - block_first[block_id]
    return (starts[block_first][block_id] + offset) % n_times


def stationary_bootstrap(panel: ExceedancePanel, scheme: BootstrapScheme, statistic, level: float = 0.95) -> BootstrapBand:
    """Percentile band of ``statistic`` under the stationary bootstrap.

    Whole time slices (all sites, with their missing flags) are resampled.
    ``statistic`` maps a panel to a float or an array and must be pure.
    """
    est = np.asarray(statistic(panel), dtype=float)
    seeds = np.random.SeedSequence(scheme.seed).spawn(scheme.n_boot)

    def one(ss):
        idx = bootstrap_indices(panel.n_times, scheme.mean_block, np.random.default_rng(ss))
        return np.asarray(statistic(panel.with_values(panel.values[:, idx], panel.missing[:, idx])), dtype=float)

    if scheme.n_threads > 1:
        with ThreadPoolExecutor(scheme.n_threads) as ex:
            reps = list(ex.map(one, seeds))
    else:
        reps = [one(s) for s in seeds]
    reps = np.array(reps)
    alpha = (1.0 - level) / 2.0
    lo = np.nanquantile(reps, alpha, axis=0)
    hi = np.nanquantile(reps, 1.0 - alpha, axis=0)
    degenerate = bool(np.all(np.nanmax(reps, axis=0) == np.nanmin(reps, axis=0)))
    if degenerate:
        log.warning("bootstrap statistic is constant across resamples")
    return BootstrapBand(est, lo, hi, reps, degenerate)


# ---------------------------------------------------------------------------
# chi* and RMSE
# ---------------------------------------------------------------------------


def nearest_neighbors(sites, k: int = 4) -> np.ndarray:
    """Indices of the ``k`` nearest other sites (Euclidean) for each site."""
    sites = np.asarray(sites, dtype=float)
    if sites.shape[0] <= k:
        raise ValueError(f"need more than {k} sites")
    _, idx = cKDTree(sites).query(sites, k=k + 1)
    out = np.empty((sites.shape[0], k), dtype=int)
    for i, row in enumerate(idx):
        row = [j for j in row if j != i][:k]
        out[i] = row
    return out


def chi_star(panel: ExceedancePanel, time_lag: int, q: float, neighbors=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-site ``Pr(all neighbours exceed at t | site exceeds at t - time_lag)``.

    Returns the estimates (NaN where the conditioning event never occurs) and
    the number of conditioning events.
    """
    nb = nearest_neighbors(panel.sites) if neighbors is None else np.asarray(neighbors)
    v = panel.values
    u = site_thresholds(v, q)
    T = panel.n_times
    h = int(time_lag)
    exc = v > u[:, None]
    obs = panel.observed
    est = np.full(panel.n_sites, np.nan)
    counts = np.zeros(panel.n_sites, dtype=int)
    for i in range(panel.n_sites):
        cond = exc[i, : T - h] & obs[i, : T - h] & obs[nb[i], h:].all(axis=0)
        n = int(cond.sum())
        counts[i] = n
        if n:
            est[i] = float((exc[nb[i], h:].all(axis=0) & cond).sum()) / n
    return est, counts


@dataclass
class RmseResult:
    per_site: dict
    total: dict
    observed: np.ndarray
    simulated: dict = field(repr=False)

    def table(self) -> pd.DataFrame:
        rows = []
        for name, vals in self.per_site.items():
            for i, r in enumerate(vals):
                rows.append({"model": name, "site": i, "rmse": r})
            rows.append({"model": name, "site": "total", "rmse": self.total[name]})
        return pd.DataFrame(rows)


def rmse_comparison(panel: ExceedancePanel, simulators: dict, n_sim: int, time_lag: int, q: float, seed: int = 0) -> RmseResult:
    """Site-wise RMSE of simulated ``chi*`` against the observed one, per model.

    ``simulators`` maps a model name to a callable ``seed -> ExceedancePanel``
    producing panels on the observation design. The total is the sum of the
    site RMSEs over sites where the observed estimate is defined.
    """
    nb = nearest_neighbors(panel.sites)
    obs_est, _ = chi_star(panel, time_lag, q, nb)
    seeds = np.random.SeedSequence(seed).generate_state(n_sim)
    per_site, total, sims = {}, {}, {}
    for name, simulate in simulators.items():
        draws = np.array([chi_star(simulate(int(s)), time_lag, q, nb)[0] for s in seeds])
        sq = (draws - obs_est[None, :]) ** 2
        n_ok = np.isfinite(sq).sum(axis=0)
        # sites where no draw defines chi* get NaN
        rmse = np.full(sq.shape[1], np.nan)
        rmse[n_ok > 0] = np.sqrt(np.nansum(sq, axis=0)[n_ok > 0] / n_ok[n_ok > 0])
        per_site[name] = rmse
        total[name] = float(np.nansum(rmse))
        sims[name] = draws
    return RmseResult(per_site, total, obs_est, sims)
