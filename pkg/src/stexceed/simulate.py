"""Simulation of the Gamma random field and of censored exceedance panels.

The Gamma random measure is approximated by a compound Poisson process of
atoms heavier than a truncation level ``epsilon``; the expected mass of the
lighter atoms is added back as a constant. Atom masses are drawn by
inverting the tail of the Gamma Lévy measure, ``E1(rate * m) / E1(rate * epsilon)``.

Random streams (layout ``"v1"``): the padded window is cut into time cells
of ``cell_duration`` hours counted from the window start, cell ``c`` draws
from ``SeedSequence(seed, spawn_key=(0, c))`` and the exceedance indicators
and exponential excesses come from ``SeedSequence(seed, spawn_key=(1,))``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import exp1

from .geometry import CylinderKernel, SpaceTimePoint
from .model import ModelParams, marginal_transform
from .panel import ExceedancePanel

__all__ = [
    "SimulationWindow",
    "GammaAtomSet",
    "SimulationDesign",
    "simulation_window",
    "simulate_gamma_measure",
    "latent_field",
    "latent_field_grid",
    "simulate_panel",
    "scenario_a",
    "scenario_b",
    "uniform_sites",
    "default_epsilon",
    "STREAM_LAYOUT",
]

STREAM_LAYOUT = "v1"
MAX_TRUNCATED_FRACTION = 0.1
DENSE_SITES = 32


@dataclass(frozen=True)
class SimulationWindow:
    """Axis-aligned box ``[lower, upper] x [t_start, t_end]``."""

    lower: tuple[float, float]
    upper: tuple[float, float]
    t_start: float
    t_end: float

    def __post_init__(self):
        if not (self.upper[0] > self.lower[0] and self.upper[1] > self.lower[1] and self.t_end > self.t_start):
            raise ValueError("simulation window must have positive extent")

    @property
    def area(self) -> float:
        return (self.upper[0] - self.lower[0]) * (self.upper[1] - self.lower[1])

    @property
    def volume(self) -> float:
        return self.area * (self.t_end - self.t_start)

    def contains(self, s, t) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        t = np.asarray(t, dtype=float)
        return (
            (s[:, 0] >= self.lower[0]) & (s[:, 0] <= self.upper[0])
            & (s[:, 1] >= self.lower[1]) & (s[:, 1] <= self.upper[1])
            & (t >= self.t_start) & (t <= self.t_end)
        )


@dataclass
class GammaAtomSet:
    """Atoms of a truncated Gamma random measure.

    ``compensation`` is the expected mass of the discarded atoms inside one
    kernel cylinder; :func:`latent_field` adds it to every value. ``design``
    is the region where cylinders are fully covered by ``window``.
    """

    locations: np.ndarray
    times: np.ndarray
    masses: np.ndarray
    window: SimulationWindow
    epsilon: float
    compensation: float
    design: SimulationWindow | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_atoms(self) -> int:
        return self.masses.size

    def total_mass(self, region: SimulationWindow | None = None, compensated: bool = True) -> float:
        """Mass of ``region`` (default: the whole window), with small-atom compensation."""
        region = region or self.window
        inside = region.contains(self.locations, self.times)
        total = float(self.masses[inside].sum())
        if compensated:
            total += self.meta["truncated_density"] * region.volume
        return total


@dataclass(frozen=True)
class SimulationDesign:
    sites: np.ndarray
    times: np.ndarray
    seed: int = 0

    def __init__(self, sites, times, seed: int = 0):
        sites = np.asarray(sites, dtype=float).reshape(-1, 2)
        times = np.asarray(times, dtype=float).ravel()
        if sites.shape[0] == 0 or times.size == 0:
            raise ValueError("design needs at least one site and one time")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("design times must be strictly increasing")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "seed", int(seed))

    def window(self) -> SimulationWindow:
        lo = self.sites.min(axis=0)
        hi = self.sites.max(axis=0)
        # a single site or a line of sites still needs a box with positive area
        hi = np.where(hi > lo, hi, lo + 1e-9)
        t1 = self.times[-1] if self.times[-1] > self.times[0] else self.times[0] + 1e-9
        return SimulationWindow(tuple(lo), tuple(hi), float(self.times[0]), float(t1))


def simulation_window(design: SimulationDesign | SimulationWindow, kernel: CylinderKernel) -> SimulationWindow:
    """Design box padded by the kernel reach in space and its duration backwards in time."""
    w = design.window() if isinstance(design, SimulationDesign) else design
    r = kernel.reach
    return SimulationWindow(
        (w.lower[0] - r, w.lower[1] - r), (w.upper[0] + r, w.upper[1] + r),
        w.t_start - kernel.duration, w.t_end,
    )


def default_epsilon(p: ModelParams) -> float:
    """Truncation level: one part in a million of the mean latent value per unit of ``shape``."""
    return 1e-6 / p.rate


def _inverse_exp1(target: np.ndarray, lower: float) -> np.ndarray:
    """Solve ``E1(z) = target`` for ``z >= lower`` by bisection on ``log z``."""
    lo = np.full(target.shape, math.log(lower))
    hi = np.full(target.shape, math.log(750.0))
    for _ in range(64):
        mid = 0.5 * (lo + hi)
        above = exp1(np.exp(mid)) > target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
    return np.exp(0.5 * (lo + hi))


def simulate_gamma_measure(
    window: SimulationWindow,
    p: ModelParams,
    epsilon: float | None = None,
    seed: int = 0,
    cell_duration: float = 100.0,
    n_threads: int = 1,
) -> GammaAtomSet:
    """Atoms of the Gamma random measure with base density ``shape / kernel volume`` and rate ``rate``.

    Raises
    ------
    ValueError
        If the expected fraction of mass carried by atoms lighter than
        ``epsilon`` exceeds 10%.
    """
    eps = default_epsilon(p) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise ValueError("truncation level must be positive")
    truncated_fraction = -math.expm1(-p.rate * eps)
    if truncated_fraction > MAX_TRUNCATED_FRACTION:
        raise ValueError(
            f"truncation level {eps} discards {truncated_fraction:.1%} of the expected mass"
        )
    density = p.shape / p.kernel.volume
    tail = float(exp1(p.rate * eps))
    n_cells = max(1, math.ceil((window.t_end - window.t_start) / cell_duration - 1e-12))

    def cell(c):
        t0 = window.t_start + c * cell_duration
        t1 = min(t0 + cell_duration, window.t_end)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, c)))
        n = rng.poisson(density * window.area * (t1 - t0) * tail)
        xy = rng.uniform(size=(n, 2))
        loc = np.column_stack([
            window.lower[0] + xy[:, 0] * (window.upper[0] - window.lower[0]),
            window.lower[1] + xy[:, 1] * (window.upper[1] - window.lower[1]),
        ])
        times = t0 + rng.uniform(size=n) * (t1 - t0)
        u = 1.0 - rng.uniform(size=n)  # in (0, 1]
        masses = _inverse_exp1(u * tail, p.rate * eps) / p.rate
        return loc, times, masses

    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as ex:
            parts = list(ex.map(cell, range(n_cells)))
    else:
        parts = [cell(c) for c in range(n_cells)]
    loc = np.concatenate([q[0] for q in parts]) if parts else np.empty((0, 2))
    times = np.concatenate([q[1] for q in parts])
    masses = np.concatenate([q[2] for q in parts])
    truncated_density = density * truncated_fraction / p.rate
    return GammaAtomSet(
        locations=loc,
        times=times,
        masses=masses,
        window=window,
        epsilon=eps,
        compensation=truncated_density * p.kernel.volume,
        meta={
            "stream_layout": STREAM_LAYOUT,
            "seed": int(seed),
            "cell_duration": float(cell_duration),
            "truncated_density": truncated_density,
        },
    )


def _covered_region(atoms: GammaAtomSet, kernel: CylinderKernel) -> SimulationWindow:
    if atoms.design is not None:
        return atoms.design
    w, r = atoms.window, kernel.reach
    # slack absorbs the rounding of (lower - reach) + reach
    tol = 1e-9 * (1.0 + r + abs(w.t_start) + abs(w.t_end))
    return SimulationWindow(
        (w.lower[0] + r - tol, w.lower[1] + r - tol), (w.upper[0] - r + tol, w.upper[1] - r + tol),
        w.t_start + kernel.duration - tol, w.t_end,
    )


def _candidates(tree, centers, radius, n_sites):
    """(atom, site) index pairs with the site within ``radius`` of the atom centre."""
    k = 4
    while True:
        dist, nb = tree.query(centers, k=min(k, n_sites), distance_upper_bound=radius * (1 + 1e-12))
        dist = dist.reshape(len(centers), -1)
        nb = nb.reshape(len(centers), -1)
        if k >= n_sites or not np.isfinite(dist[:, -1]).any():
            break
        k *= 2
    ai, col = np.nonzero(np.isfinite(dist))
    return ai, nb[ai, col]


def latent_field_grid(atoms: GammaAtomSet, sites, times, p: ModelParams, chunk: int = 2_000_000) -> np.ndarray:
    """``Lambda(s_i, t_j)`` on a site-by-time grid (``times`` increasing).

    Each atom ``(q, u)`` with mass ``m`` adds ``m`` to every grid point with
    ``0 <= t - u < duration`` whose site lies in the ellipse centred at
    ``q + velocity * (t - u)``.
    """
    sites = np.asarray(sites, dtype=float).reshape(-1, 2)
    times = np.asarray(times, dtype=float).ravel()
    k = p.kernel
    S, T = sites.shape[0], times.size
    region = _covered_region(atoms, k)
    if not (np.all(region.contains(sites, np.full(S, times[0]))) and np.all(region.contains(sites[:1], times))):
        raise ValueError("design points lie outside the region covered by the atoms")
    c, s = math.cos(k.angle), math.sin(k.angle)
    wx, wy = k.velocity
    first = np.searchsorted(times, atoms.times, side="left")
    last = np.searchsorted(times, atoms.times + k.duration, side="left")
    span = last - first
    out = np.zeros(S * T)
    tree = cKDTree(sites) if S > DENSE_SITES else None
    radius = max(k.semi_axis1, k.semi_axis2)
    # same chunking on both paths keeps the summation order, hence the result, identical
    step = max(1, chunk // 32)
    for lag in range(int(span.max()) if span.size else 0):
        sel = np.nonzero(span > lag)[0]
        for a in range(0, sel.size, step):
            idx = sel[a : a + step]
            tj = first[idx] + lag
            tau = times[tj] - atoms.times[idx]
            cx = atoms.locations[idx, 0] + wx * tau
            cy = atoms.locations[idx, 1] + wy * tau
            if tree is None:
                ai, si = np.nonzero(np.ones((idx.size, S), dtype=bool))
            else:
                ai, si = _candidates(tree, np.column_stack([cx, cy]), radius, S)
            dx = sites[si, 0] - cx[ai]
            dy = sites[si, 1] - cy[ai]
            u = (c * dx + s * dy) / k.semi_axis1
            v = (-s * dx + c * dy) / k.semi_axis2
            hit = u * u + v * v <= 1.0
            ai, si = ai[hit], si[hit]
            out += np.bincount(si * T + tj[ai], weights=atoms.masses[idx][ai], minlength=S * T)
    return out.reshape(S, T) + atoms.compensation


def latent_field(atoms: GammaAtomSet, x: SpaceTimePoint, p: ModelParams) -> float:
    """``Lambda(x)``: total mass of the atoms inside the cylinder attached to ``x``."""
    return float(latent_field_grid(atoms, [x.s], [x.t], p)[0, 0])


def simulate_panel(
    design: SimulationDesign,
    p: ModelParams,
    epsilon: float | None = None,
    cell_duration: float = 100.0,
    n_threads: int = 1,
    return_latent: bool = False,
):
    """Censored exceedances of the hierarchical model on ``design``.

    A point exceeds with probability ``exp(-censoring_rate * Lambda)``; the
    excess is exponential with rate ``Lambda`` and is then mapped to the GP
    margins of ``p``.
    """
    window = simulation_window(design, p.kernel)
    atoms = simulate_gamma_measure(window, p, epsilon, design.seed, cell_duration, n_threads)
    atoms.design = design.window()
    lam = latent_field_grid(atoms, design.sites, design.times, p)
    rng = np.random.default_rng(np.random.SeedSequence(design.seed, spawn_key=(1,)))
    u = rng.uniform(size=lam.shape)
    e = rng.standard_exponential(size=lam.shape)
    exceed = u < np.exp(-p.censoring_rate * lam)
    y = np.where(exceed, e / lam, 0.0)
    if not p.identity_margins:
        y = marginal_transform(y, p)
    panel = ExceedancePanel(
        design.sites,
        y,
        times=design.times,
        meta={
            "seed": design.seed,
            "stream_layout": STREAM_LAYOUT,
            "epsilon": atoms.epsilon,
            "n_atoms": atoms.n_atoms,
        },
    )
    if return_latent:
        return panel, lam
    return panel


# ---------------------------------------------------------------------------
# simulation scenarios
# ---------------------------------------------------------------------------


def scenario_a() -> ModelParams:
    """Isotropic static kernel: circles of radius 0.2 lasting 10 hours."""
    return ModelParams(CylinderKernel(0.2, 0.2, 0.0, 10.0, (0.0, 0.0)), 1.0, 1.0, 9.0, 10.0, 1.0)


def scenario_b(semi_axis2: float = 0.3) -> ModelParams:
    """Rotated elliptical kernel lasting 5 hours and moving with velocity (0.05, 0.10)."""
    kernel = CylinderKernel(0.2, semi_axis2, math.pi / 4, 5.0, (0.05, 0.10))
    return ModelParams(kernel, 1.0, 1.0, 9.0, 10.0, 1.0)


def uniform_sites(n: int, seed: int = 0) -> np.ndarray:
    """``n`` sites uniform on the unit square."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,))).uniform(size=(n, 2))
