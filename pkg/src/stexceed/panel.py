"""Site-by-time panels of censored excesses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["ExceedancePanel"]


@dataclass
class ExceedancePanel:
    """S x T matrix of censored excesses observed at fixed sites.

    ``values[i, t] == 0`` encodes a value below the threshold and a positive
    entry is the excess. Missing entries are flagged in ``missing``; their
    stored value is ignored (it is set to NaN on construction).
    """

    sites: np.ndarray
    values: np.ndarray
    missing: np.ndarray | None = None
    times: np.ndarray | None = None
    site_ids: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float).reshape(-1, 2)
        values = np.array(self.values, dtype=float, ndmin=2)
        if self.missing is None:
            missing = ~np.isfinite(values)
        else:
            missing = np.asarray(self.missing, dtype=bool) | ~np.isfinite(values)
        if values.shape != missing.shape:
            raise ValueError("values and missing mask must have the same shape")
        if values.shape[0] != self.sites.shape[0]:
            raise ValueError(
                f"{values.shape[0]} value rows for {self.sites.shape[0]} sites"
            )
        if not np.all(np.isfinite(self.sites)):
            raise ValueError("site coordinates must be finite")
        if np.any(values[~missing] < 0):
            raise ValueError("observed excesses must be non-negative")
        values[missing] = np.nan
        self.values = values
        self.missing = missing
        if self.times is None:
            self.times = np.arange(1, values.shape[1] + 1, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.times.shape != (values.shape[1],):
            raise ValueError("times must have one entry per column")
        if values.shape[1] > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.site_ids is None:
            self.site_ids = [str(i) for i in range(values.shape[0])]

    @property
    def n_sites(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return ~self.missing

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.missing, fill, self.values)

    def time_step(self) -> float:
        """Common spacing of the time grid; raises if the grid is irregular."""
        if self.n_times < 2:
            return 1.0
        d = np.diff(self.times)
        if not np.allclose(d, d[0], rtol=1e-9, atol=0):
            raise ValueError("pairwise likelihood needs a regular time grid")
        return float(d[0])

    def subset_times(self, idx) -> "ExceedancePanel":
        idx = np.asarray(idx)
        return ExceedancePanel(
            self.sites, self.values[:, idx], self.missing[:, idx], self.times[idx],
            list(self.site_ids), dict(self.meta),
        )

    def subset_sites(self, idx) -> "ExceedancePanel":
        idx = np.asarray(idx)
        return ExceedancePanel(
            self.sites[idx], self.values[idx], self.missing[idx], self.times,
            [self.site_ids[i] for i in idx], dict(self.meta),
        )

    def with_values(self, values, missing=None) -> "ExceedancePanel":
        return ExceedancePanel(
            self.sites, values, self.missing if missing is None else missing, self.times,
            list(self.site_ids), dict(self.meta),
        )
