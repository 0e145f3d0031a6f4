"""Station data ingestion, per-site GP margins, run configuration and orchestration.

File formats are described in ``docs/formats.md``. In short:

* coordinates file: ``station_id`` plus either ``x_km, y_km`` or ``lon, lat``
  (degrees), optional ``elevation``;
* observations file: long format ``station_id, timestamp, value`` where an
  empty value marks a missing observation. Timestamps are ISO date-times or
  plain numbers of hours.
"""

from __future__ import annotations

import json
import logging
import math
import platform
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .panel import ExceedancePanel

__all__ = [
    "IngestError",
    "StationData",
    "MarginalFit",
    "RunConfig",
    "RunError",
    "ingest",
    "export",
    "fit_gp",
    "fit_margins",
    "censoring_rate",
    "to_common_margins",
    "write_panel",
    "read_panel",
    "make_synthetic_dataset",
    "bundled_dataset",
    "run",
    "EARTH_RADIUS_KM",
]

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
FLOAT_FORMAT = "%.12g"


class IngestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


@dataclass
class StationData:
    """Aligned raw station series.

    ``values`` is S x T with NaN for missing observations; ``times`` are hours
    relative to ``origin`` (a timestamp string, or None for numeric input).
    """

    station_ids: list
    coords: np.ndarray
    times: np.ndarray
    values: np.ndarray
    elevation: np.ndarray | None = None
    origin: str | None = None
    projection: dict = field(default_factory=dict)
    report: pd.DataFrame | None = None

    @property
    def n_sites(self) -> int:
        return len(self.station_ids)

    @property
    def missing_fraction(self) -> np.ndarray:
        return np.mean(~np.isfinite(self.values), axis=1)

    def timestamps(self) -> list:
        if self.origin is None:
            return [float(t) for t in self.times]
        base = pd.Timestamp(self.origin)
        return [(base + pd.Timedelta(hours=float(t))).isoformat() for t in self.times]

    def subset(self, keep) -> "StationData":
        keep = np.asarray(keep)
        return StationData(
            [self.station_ids[i] for i in keep], self.coords[keep], self.times, self.values[keep],
            None if self.elevation is None else self.elevation[keep], self.origin,
            dict(self.projection), self.report,
        )


def _project(coords: pd.DataFrame):
    if {"x_km", "y_km"} <= set(coords.columns):
        return coords[["x_km", "y_km"]].to_numpy(float), {"kind": "none", "units": "km"}
    if {"lon", "lat"} <= set(coords.columns):
        lon = coords["lon"].to_numpy(float)
        lat = coords["lat"].to_numpy(float)
        lon0, lat0 = float(lon.mean()), float(lat.mean())
        x = EARTH_RADIUS_KM * np.radians(lon - lon0) * math.cos(math.radians(lat0))
        y = EARTH_RADIUS_KM * np.radians(lat - lat0)
        proj = {"kind": "equirectangular", "lon0": lon0, "lat0": lat0, "radius_km": EARTH_RADIUS_KM}
        return np.column_stack([x, y]), proj
    raise IngestError("coordinates file needs columns x_km, y_km or lon, lat")


def _parse_times(raw: pd.Series):
    num = pd.to_numeric(raw, errors="coerce")
    if num.notna().all():
        return raw.astype(float).to_numpy(), None
    ts = pd.to_datetime(raw, errors="coerce")
    bad = np.nonzero(ts.isna().to_numpy())[0]
    if bad.size:
        raise IngestError(f"line {bad[0] + 2}: unparseable timestamp {raw.iloc[bad[0]]!r}")
    origin = ts.min()
    hours = (ts - origin) / pd.Timedelta(hours=1)
    return hours.to_numpy(float), origin.isoformat()


def ingest(
    coords_path,
    observations_path,
    max_missing: float | None = None,
    months=None,
    regular_grid: bool = True,
) -> StationData:
    """Read the coordinates and observations files into an aligned panel.

    Parameters
    ----------
    max_missing : float, optional
        Stations whose missing fraction is not below this value are dropped.
    months : sequence of int, optional
        Observations outside these calendar months are marked missing.
    regular_grid : bool
        Fill gaps in the union of timestamps so that the time grid is regular.

    Raises
    ------
    IngestError
        On duplicated (station, timestamp) rows, timestamps that are not
        increasing within a station, or unknown station ids. Messages carry
        the line number in the observations file.
    """
    coords = pd.read_csv(coords_path, dtype={"station_id": str}, float_precision="round_trip")
    if "station_id" not in coords.columns:
        raise IngestError("coordinates file needs a station_id column")
    dup = coords["station_id"].duplicated()
    if dup.any():
        raise IngestError(f"coordinates line {int(np.argmax(dup.to_numpy())) + 2}: duplicated station id")
    xy, proj = _project(coords)
    if not np.all(np.isfinite(xy)):
        raise IngestError("station coordinates must be finite")
    ids = list(coords["station_id"])
    pos = {s: i for i, s in enumerate(ids)}

    obs = pd.read_csv(observations_path, dtype={"station_id": str, "timestamp": str}, keep_default_na=False)
    for col in ("station_id", "timestamp", "value"):
        if col not in obs.columns:
            raise IngestError(f"observations file lacks column {col!r}")
    unknown = ~obs["station_id"].isin(pos)
    if unknown.any():
        i = int(np.argmax(unknown.to_numpy()))
        raise IngestError(f"line {i + 2}: unknown station id {obs['station_id'].iloc[i]!r}")
    hours, origin = _parse_times(obs["timestamp"])
    raw = obs["value"].astype(str).str.strip()
    check = pd.to_numeric(raw.replace("", np.nan), errors="coerce").to_numpy(float)
    bad = np.nonzero(np.isnan(check) & (raw.to_numpy() != ""))[0]
    if bad.size:
        raise IngestError(f"line {bad[0] + 2}: non-numeric value {obs['value'].iloc[bad[0]]!r}")
    # pandas' fast parser is not round-trip exact; float() is
    value = raw.replace("", "nan").astype(float).to_numpy()
    neg = np.nonzero(value < 0)[0]
    if neg.size:
        raise IngestError(f"line {neg[0] + 2}: negative value")
    sid = obs["station_id"].map(pos).to_numpy()
    frame = pd.DataFrame({"sid": sid, "t": hours, "line": np.arange(len(obs)) + 2})
    dupl = frame.duplicated(["sid", "t"], keep="first")
    if dupl.any():
        line = int(frame["line"][dupl].iloc[0])
        raise IngestError(f"line {line}: duplicated station and timestamp")
    for s, grp in frame.groupby("sid", sort=False):
        d = np.diff(grp["t"].to_numpy())
        if np.any(d <= 0):
            line = int(grp["line"].iloc[int(np.argmax(d <= 0)) + 1])
            raise IngestError(f"line {line}: timestamps not increasing for station {ids[s]!r}")

    grid = np.unique(hours)
    col = np.searchsorted(grid, hours)
    if regular_grid and grid.size > 1:
        step = float(np.min(np.diff(grid)))
        pos_on_grid = (grid - grid[0]) / step
        if np.allclose(pos_on_grid, np.rint(pos_on_grid), atol=1e-6):
            n = int(np.rint(pos_on_grid[-1])) + 1
            col = np.rint((hours - grid[0]) / step).astype(int)
            grid = grid[0] + step * np.arange(n)
    values = np.full((len(ids), grid.size), np.nan)
    values[sid, col] = value
    if months is not None:
        if origin is None:
            raise IngestError("a month filter needs calendar timestamps")
        stamps = pd.Timestamp(origin) + pd.to_timedelta(grid, unit="h")
        outside = ~np.isin(stamps.month, list(months))
        values[:, outside] = np.nan
    elev = coords["elevation"].to_numpy(float) if "elevation" in coords.columns else None
    data = StationData(ids, xy, grid, values, elev, origin, proj)
    miss = data.missing_fraction
    keep = np.ones(len(ids), dtype=bool) if max_missing is None else miss < max_missing
    data.report = pd.DataFrame(
        {
            "station_id": ids,
            "n_observed": np.isfinite(values).sum(axis=1),
            "missing_fraction": miss,
            "kept": keep,
        }
    )
    if not keep.all():
        log.info("dropping %d stations with missing fraction >= %s", int((~keep).sum()), max_missing)
        report = data.report
        data = data.subset(np.nonzero(keep)[0])
        data.report = report
    return data


def export(data: StationData, coords_path, observations_path):
    """Write ``data`` in the ingestion format (inverse of :func:`ingest`)."""
    cols = {"station_id": data.station_ids}
    if data.projection.get("kind") == "equirectangular":
        p = data.projection
        cols["lon"] = p["lon0"] + np.degrees(data.coords[:, 0] / (p["radius_km"] * math.cos(math.radians(p["lat0"]))))
        cols["lat"] = p["lat0"] + np.degrees(data.coords[:, 1] / p["radius_km"])
    else:
        cols["x_km"] = data.coords[:, 0]
        cols["y_km"] = data.coords[:, 1]
    if data.elevation is not None:
        cols["elevation"] = data.elevation
    pd.DataFrame(cols).to_csv(coords_path, index=False, float_format="%.17g")
    stamps = data.timestamps()
    rows = []
    for i, s in enumerate(data.station_ids):
        for j, t in enumerate(stamps):
            v = data.values[i, j]
            rows.append((s, t, "" if not np.isfinite(v) else repr(float(v))))
    pd.DataFrame(rows, columns=["station_id", "timestamp", "value"]).to_csv(observations_path, index=False)


# ---------------------------------------------------------------------------
# marginal fits
# ---------------------------------------------------------------------------


@dataclass
class MarginalFit:
    station_id: str
    threshold: float
    threshold_order: float
    gp_shape: float
    gp_scale: float
    n_exceed: int
    n_observed: int
    converged: bool = True
    shape_se: float = float("nan")
    scale_se: float = float("nan")
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _gp_nll(y, log_scale, shape):
    scale = math.exp(log_scale)
    z = y / scale
    if abs(shape) < 1e-8:
        return y.size * log_scale + z.sum()
    w = shape * z
    if np.any(w <= -1):
        return np.inf
    return y.size * log_scale + (1.0 + 1.0 / shape) * np.log1p(w).sum()


def _gp_pwm(y):
    """Probability-weighted-moment estimates (shape, scale)."""
    ys = np.sort(y)
    n = ys.size
    a0 = ys.mean()
    a1 = np.sum((n - np.arange(1, n + 1)) / (n - 1) * ys) / n
    k = a0 / (a0 - 2 * a1) - 2.0
    scale = 2.0 * a0 * a1 / (a0 - 2 * a1)
    shape = float(np.clip(-k, -0.45, 0.9))
    if not (np.isfinite(scale) and scale > 0):
        shape, scale = 0.0, a0
    return shape, float(scale)


def fit_gp(excesses, standard_errors: bool = False):
    """Maximum-likelihood GP fit of positive excesses, started at the PWM estimates.

    Returns ``(shape, scale, converged, shape_se, scale_se)``.
    """
    from .optim import minimize_nm

    y = np.asarray(excesses, dtype=float)
    if y.size < 2 or np.any(y < 0):
        raise ValueError("need at least two non-negative excesses")
    shape0, scale0 = _gp_pwm(y)
    x0 = np.array([math.log(scale0), shape0])
    if not np.isfinite(_gp_nll(y, *x0)):
        x0 = np.array([math.log(y.mean()), 0.0])
    res = minimize_nm(lambda x: _gp_nll(y, x[0], x[1]), x0, [0.2, 0.1], xatol=1e-7, fatol=1e-9, maxfev=2000)
    log_scale, shape = res.x
    se = (float("nan"), float("nan"))
    if standard_errors:
        h = 1e-4
        H = np.zeros((2, 2))
        x = res.x
        for i in range(2):
            for j in range(2):
                e_i, e_j = np.eye(2)[i] * h, np.eye(2)[j] * h
                H[i, j] = (
                    _gp_nll(y, *(x + e_i + e_j)) - _gp_nll(y, *(x + e_i - e_j))
                    - _gp_nll(y, *(x - e_i + e_j)) + _gp_nll(y, *(x - e_i - e_j))
                ) / (4 * h * h)
        try:
            cov = np.linalg.inv(H)
            se = (math.sqrt(max(cov[1, 1], 0.0)), math.exp(log_scale) * math.sqrt(max(cov[0, 0], 0.0)))
        except np.linalg.LinAlgError:
            pass
    return float(shape), math.exp(log_scale), res.success, se[0], se[1]


def fit_margins(
    data: StationData,
    threshold_order: float = 0.99,
    convention: str = "all",
    min_exceedances: int = 30,
    standard_errors: bool = False,
) -> list[MarginalFit]:
    """GP fits above per-site empirical quantile thresholds.

    ``convention="all"`` takes the quantile of all observed hours,
    ``"wet"`` that of the strictly positive ones. Sites with fewer than
    ``min_exceedances`` excesses get an entry with ``error`` set.
    """
    if not 0 < threshold_order < 1:
        raise ValueError("threshold order must lie in (0, 1)")
    if convention not in ("all", "wet"):
        raise ValueError("convention must be 'all' or 'wet'")
    out = []
    for i, sid in enumerate(data.station_ids):
        row = data.values[i][np.isfinite(data.values[i])]
        base = row if convention == "all" else row[row > 0]
        if base.size == 0:
            out.append(MarginalFit(sid, np.nan, threshold_order, np.nan, np.nan, 0, row.size, False, error="no observations"))
            continue
        u = float(np.quantile(base, threshold_order))
        exc = row[row > u] - u
        if exc.size < min_exceedances:
            msg = f"{exc.size} excesses, fewer than {min_exceedances}"
            warnings.warn(f"station {sid}: {msg}; excluded", stacklevel=2)
            out.append(MarginalFit(sid, u, threshold_order, np.nan, np.nan, int(exc.size), row.size, False, error=msg))
            continue
        shape, scale, ok, sse, cse = fit_gp(exc, standard_errors)
        out.append(MarginalFit(sid, u, threshold_order, shape, scale, int(exc.size), row.size, ok, sse, cse))
    return out


def censoring_rate(threshold_order: float) -> float:
    """``q / (1 - q)``: the censoring rate matching an exceedance probability ``1 - q``."""
    if not 0 < threshold_order < 1:
        raise ValueError("threshold order must lie in (0, 1)")
    return threshold_order / (1.0 - threshold_order)


def _all_hour_order(data: StationData, fits, convention):
    if convention == "all":
        return fits[0].threshold_order
    # a wet-hour quantile corresponds to a smaller share of all hours
    rates = [
        f.n_exceed / f.n_observed for f in fits if f.ok and f.n_observed
    ]
    return 1.0 - float(np.mean(rates))


def to_common_margins(data: StationData, fits, threshold_order: float | None = None, convention: str = "all") -> ExceedancePanel:
    """Censored excesses on common margins, ``(k+1)[(1 + xi y / sigma)^(1/xi) - 1]``.

    Sites without a valid fit are dropped. ``k = q / (1 - q)`` with ``q`` the
    all-hour threshold order; the returned panel's ``meta`` records it.
    """
    fmap = {f.station_id: f for f in fits}
    keep = [i for i, s in enumerate(data.station_ids) if s in fmap and fmap[s].ok]
    if not keep:
        raise ValueError("no station has a valid marginal fit")
    q = threshold_order if threshold_order is not None else _all_hour_order(data, [fmap[data.station_ids[i]] for i in keep], convention)
    kappa = censoring_rate(q)
    out = np.full((len(keep), data.times.size), np.nan)
    for r, i in enumerate(keep):
        f = fmap[data.station_ids[i]]
        x = data.values[i]
        obs = np.isfinite(x)
        y = np.where(obs & (x > f.threshold), x - f.threshold, 0.0)
        if abs(f.gp_shape) < 1e-8:
            z = (kappa + 1.0) * np.expm1(y / f.gp_scale)
        else:
            z = (kappa + 1.0) * np.expm1(np.log1p(f.gp_shape * y / f.gp_scale) / f.gp_shape)
        out[r] = np.where(obs, z, np.nan)
    return ExceedancePanel(
        data.coords[keep], out, times=data.times,
        site_ids=[data.station_ids[i] for i in keep],
        meta={"censoring_rate": kappa, "threshold_order": q, "convention": convention, "origin": data.origin},
    )


# ---------------------------------------------------------------------------
# panel files
# ---------------------------------------------------------------------------


def write_panel(panel: ExceedancePanel, directory):
    """Store a transformed panel as ``sites.csv``, ``values.csv`` and ``meta.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"station_id": panel.site_ids, "x_km": panel.sites[:, 0], "y_km": panel.sites[:, 1]}).to_csv(
        d / "sites.csv", index=False, float_format="%.17g"
    )
    S, T = panel.values.shape
    vals = np.where(panel.missing, np.nan, panel.values)
    frame = pd.DataFrame(
        {
            "station_id": np.repeat(np.asarray(panel.site_ids, dtype=object), T),
            "timestamp": np.tile(panel.times, S),
            "value": vals.ravel(),
        }
    )
    frame.to_csv(d / "values.csv", index=False, float_format="%.17g", na_rep="")
    (d / "meta.json").write_text(json.dumps(_plain(panel.meta), indent=2, sort_keys=True))


def read_panel(directory) -> ExceedancePanel:
    d = Path(directory)
    data = ingest(d / "sites.csv", d / "values.csv", regular_grid=False)
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    return ExceedancePanel(data.coords, data.values, times=data.times, site_ids=data.station_ids, meta=meta)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def make_synthetic_dataset(directory, n_sites: int = 12, n_times: int = 720, seed: int = 7):
    """Raw hourly station data generated from the isotropic static scenario.

    Sites sit on the unit square (km). Exceedances above a site threshold
    have GP excesses with site-specific shape and scale; values below the
    threshold are zero (dry) or uniform on the lower 80% of that range. A few values are missing.
    """
    from .simulate import SimulationDesign, scenario_a, simulate_panel, uniform_sites

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p = scenario_a()
    sites = uniform_sites(n_sites, seed)
    panel = simulate_panel(SimulationDesign(sites, np.arange(n_times, dtype=float), seed), p)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(9,)))
    u = rng.uniform(2.0, 4.0, n_sites)
    xi = rng.uniform(0.05, 0.3, n_sites)
    sigma = rng.uniform(1.5, 3.0, n_sites)
    y = panel.values
    k1 = p.censoring_rate + 1.0
    raw_exc = sigma[:, None] / xi[:, None] * np.expm1(xi[:, None] * np.log1p(y / k1))
    below = np.where(rng.uniform(size=y.shape) < 0.6, 0.0, 0.8 * rng.uniform(size=y.shape) * u[:, None])
    raw = np.where(y > 0, u[:, None] + raw_exc, below)
    raw = np.round(raw, 3)
    raw[rng.uniform(size=y.shape) < 0.01] = np.nan
    ids = [f"ST{i:03d}" for i in range(n_sites)]
    pd.DataFrame({"station_id": ids, "x_km": sites[:, 0], "y_km": sites[:, 1]}).to_csv(
        d / "coords.csv", index=False, float_format="%.6f"
    )
    base = pd.Timestamp("2020-09-01T00:00:00")
    stamps = [(base + pd.Timedelta(hours=int(t))).isoformat() for t in range(n_times)]
    rows = [
        (s, stamps[j], "" if not np.isfinite(raw[i, j]) else f"{raw[i, j]:.3f}")
        for i, s in enumerate(ids)
        for j in range(n_times)
    ]
    pd.DataFrame(rows, columns=["station_id", "timestamp", "value"]).to_csv(d / "observations.csv", index=False)
    return d / "coords.csv", d / "observations.csv"


def bundled_dataset() -> tuple[Path, Path]:
    """Paths of the synthetic dataset shipped with the package."""
    d = Path(__file__).resolve().parent / "data"
    return d / "coords.csv", d / "observations.csv"


# ---------------------------------------------------------------------------
# run configuration and orchestration
# ---------------------------------------------------------------------------


FAMILY_CHOICES = (
    "hierarchical",
    "hierarchical_static",
    "gauss_separable",
    "gauss_frozen_exponential",
    "gauss_frozen_spherical",
)


@dataclass
class RunConfig:
    """Settings of an end-to-end analysis; written verbatim into the run manifest."""

    coords: str | None = None
    observations: str | None = None
    output_dir: str = "run"
    seed: int = 0
    threshold_order: float = 0.99
    quantile_convention: str = "all"
    min_exceedances: int = 30
    max_missing: float = 0.7
    months: list | None = None
    max_distance: float = 1.0
    max_lag: int = 15
    families: list = field(default_factory=lambda: ["hierarchical", "hierarchical_static", "gauss_separable"])
    init: dict = field(default_factory=dict)
    maxfev: int = 1500
    restarts: int = 1
    multistart: int = 0
    compute_se: bool = True
    n_blocks: int | None = None
    block_length: int | None = None
    n_threads: int = 1
    chi_quantiles: list = field(default_factory=lambda: [0.95, 0.99])
    chi_time_lags: list = field(default_factory=lambda: [0, 1, 2])
    n_boot: int = 50
    mean_block: float = 480.0
    rmse_n_sim: int = 10
    rmse_quantile: float = 0.99
    rmse_time_lag: int = 1
    snapshot_times: int = 48

    def __post_init__(self):
        if self.quantile_convention not in ("all", "wet"):
            raise ValueError("quantile_convention must be 'all' or 'wet'")
        bad = [f for f in self.families if f not in FAMILY_CHOICES]
        if bad:
            raise ValueError(f"unknown families {bad}; choose from {FAMILY_CHOICES}")
        if not 0 < self.threshold_order < 1:
            raise ValueError("threshold_order must lie in (0, 1)")

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml

            raw = yaml.safe_load(text) or {}
        else:
            raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown configuration keys {sorted(unknown)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


class RunError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _versions() -> dict:
    import scipy

    from . import __version__

    return {
        "stexceed": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def default_init(family: str, scheme, panel: ExceedancePanel, kappa: float, user: dict | None = None):
    """Starting values scaled to the pair cut-offs, overridden by ``user``."""
    from .baselines import GaussCopulaParams
    from .geometry import CylinderKernel
    from .model import ModelParams

    user = dict(user or {})
    if family.startswith("hierarchical"):
        r = user.pop("semi_axis", scheme.max_distance / 4.0)
        kernel = CylinderKernel(
            user.pop("semi_axis1", r), user.pop("semi_axis2", r), user.pop("angle", 0.0),
            user.pop("duration", max(scheme.max_lag / 2.0, 1.0)),
            (user.pop("velocity_x", 0.0), user.pop("velocity_y", 0.0)),
        )
        return ModelParams(kernel, 1.0, 1.0, kappa, kappa + 1.0, 1.0)
    fam = family[len("gauss_"):]
    vals = {"spatial_range": scheme.max_distance / 3.0, "temporal_range": max(scheme.max_lag / 3.0, 1.0)}
    if fam != "separable":
        vals["velocity"] = (scheme.max_distance / max(scheme.max_lag, 1) / 4.0, 0.0)
    vals.update({k: v for k, v in user.items() if k != "velocity"})
    if "velocity" in user:
        vals["velocity"] = tuple(user["velocity"])
    return GaussCopulaParams(fam, censoring_rate=kappa, **vals)


def fit_family(family: str, panel, scheme, config: RunConfig, kappa: float):
    from .baselines import fit_baseline
    from .likelihood import DEFAULT_FREE, fit

    init = default_init(family, scheme, panel, kappa, config.init.get(family))
    kw = dict(
        maxfev=config.maxfev, restarts=config.restarts, multistart=config.multistart,
        seed=config.seed, compute_se=config.compute_se, n_blocks=config.n_blocks,
        block_length=config.block_length, n_threads=config.n_threads,
    )
    if family == "hierarchical":
        return fit(panel, scheme, init, free=DEFAULT_FREE, **kw)
    if family == "hierarchical_static":
        return fit(panel, scheme, init, free=DEFAULT_FREE[:4], **kw)
    return fit_baseline(panel, scheme, family[len("gauss_"):], init, **kw)


def simulator_for(result, panel: ExceedancePanel):
    """Callable ``seed -> panel`` simulating the fitted model on the panel's design."""
    from .baselines import GaussCopulaParams, simulate_gaussian_panel
    from .simulate import SimulationDesign, simulate_panel

    params = result.params if hasattr(result, "params") else result

    def draw(seed):
        design = SimulationDesign(panel.sites, panel.times, seed)
        if isinstance(params, GaussCopulaParams):
            sim = simulate_gaussian_panel(design, params)
        else:
            sim = simulate_panel(design, params)
        return sim.with_values(sim.values, panel.missing)

    return draw


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def run(config: RunConfig) -> Path:
    """Run ingest, margins, transform, fit, compare, diagnose and simulate stages.

    Outputs are written to ``config.output_dir``; ``manifest.json`` lists the
    configuration, library versions and the status of every stage. A failing
    stage raises :class:`RunError` after the manifest has been written.
    """
    from .diagnostics import BootstrapScheme, chi_curve, empirical_chi, rmse_comparison, stationary_bootstrap
    from .likelihood import PairScheme

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"config": config.to_dict(), "versions": _versions(), "seed": config.seed, "stages": {}}

    def save_manifest():
        (out / "manifest.json").write_text(json.dumps(_plain(manifest), indent=2, sort_keys=True))

    state = {}

    def stage(name, fn):
        try:
            fn()
        except Exception as err:  # noqa: BLE001 - every failure is reported with its stage
            manifest["stages"][name] = {"status": "failed", "error": f"{type(err).__name__}: {err}"}
            save_manifest()
            raise RunError(name, str(err)) from err
        manifest["stages"][name] = {"status": "ok"}
        save_manifest()

    def do_ingest():
        coords, obs = (config.coords, config.observations)
        if coords is None or obs is None:
            coords, obs = bundled_dataset()
            manifest["inputs"] = "bundled synthetic dataset"
        data = ingest(coords, obs, max_missing=config.max_missing, months=config.months)
        manifest["projection"] = data.projection
        manifest["origin"] = data.origin
        _write_csv(data.report, out / "ingest_report.csv")
        state["data"] = data

    def do_margins():
        fits = fit_margins(state["data"], config.threshold_order, config.quantile_convention, config.min_exceedances)
        _write_csv(pd.DataFrame([asdict(f) for f in fits]), out / "margins.csv")
        state["fits"] = fits

    def do_transform():
        q = config.threshold_order if config.quantile_convention == "all" else None
        panel = to_common_margins(state["data"], state["fits"], q, config.quantile_convention)
        manifest["censoring_rate"] = panel.meta["censoring_rate"]
        write_panel(panel, out / "panel")
        state["panel"] = panel

    def do_fit():
        panel = state["panel"]
        scheme = PairScheme(config.max_distance, config.max_lag)
        kappa = panel.meta["censoring_rate"]
        results = {}
        (out / "fits").mkdir(exist_ok=True)
        for fam in config.families:
            res = fit_family(fam, panel, scheme, config, kappa)
            results[fam] = res
            (out / "fits" / f"{fam}.json").write_text(res.to_json())
        state["results"] = results
        state["scheme"] = scheme

    def do_compare():
        rows = []
        for fam, res in state["results"].items():
            rows.append(
                {
                    "family": fam, "n_free": len(res.free), "pl_value": res.pl_value,
                    "clic": res.clic, "clic_star": res.clic_star, "clic_constant": res.clic_constant,
                    "converged": res.converged,
                }
            )
        _write_csv(pd.DataFrame(rows), out / "clic.csv")

    def do_diagnose():
        panel = state["panel"]
        frames, rows = [], []
        pairs = [(i, j) for i in range(panel.n_sites) for j in range(panel.n_sites) if i != j]
        boot = BootstrapScheme(config.n_boot, config.mean_block, config.seed, config.n_threads)
        for q in config.chi_quantiles:
            for k in config.chi_time_lags:
                frames.append(chi_curve(panel, q, k, max_distance=config.max_distance))
                # same-site pairs at positive lags, distinct sites at lag zero
                pk = [(i, i) for i in range(panel.n_sites)] if k else [(i, j) for i, j in pairs if i < j]
                est = empirical_chi(panel, pk, q, k)

                def stat(pn, pk=pk, q=q, k=k):
                    e = empirical_chi(pn, pk, q, k)
                    return np.array([e.chi, e.chibar])

                band = stationary_bootstrap(panel, boot, stat)
                rows.append(
                    {"time_lag": k, "q": q, "chi": est.chi, "chibar": est.chibar,
                     "chi_lo": band.lo[0], "chi_hi": band.hi[0],
                     "chibar_lo": band.lo[1], "chibar_hi": band.hi[1], "site_pairs": "same" if k else "all"}
                )
        _write_csv(pd.concat(frames, ignore_index=True), out / "chi_curves.csv")
        _write_csv(pd.DataFrame(rows), out / "chi_bootstrap.csv")
        sims = {fam: simulator_for(res, panel) for fam, res in state["results"].items()}
        rm = rmse_comparison(panel, sims, config.rmse_n_sim, config.rmse_time_lag, config.rmse_quantile, config.seed)
        _write_csv(rm.table(), out / "rmse_chi_star.csv")
        manifest["diagnostics"] = {"smoothing_bins": frames[0]["n_bins"].iloc[0] if frames else None,
                                   "quantile_type": 7}

    def do_simulate():
        panel = state["panel"]
        rows = []
        n = min(config.snapshot_times, panel.n_times)
        for fam, res in state["results"].items():
            sim = simulator_for(res, panel)(config.seed)
            for i in range(panel.n_sites):
                for t in range(n):
                    rows.append((fam, panel.site_ids[i], panel.sites[i, 0], panel.sites[i, 1], panel.times[t], sim.values[i, t]))
        _write_csv(pd.DataFrame(rows, columns=["family", "station_id", "x_km", "y_km", "time", "value"]), out / "simulation_snapshots.csv")

    for name, fn in (
        ("ingest", do_ingest), ("margins", do_margins), ("transform", do_transform), ("fit", do_fit),
        ("compare", do_compare), ("diagnose", do_diagnose), ("simulate", do_simulate),
    ):
        stage(name, fn)
    return out
