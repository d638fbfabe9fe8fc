"""Hit/save classification of sampled demand paths against a supply curve."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .demand import OUProcess
from .fptd import mc_standard_error


@dataclass
class McAnalysis:
    """Per-grid-point statistics of M demand paths against supply S.

    A path is a hit path at t_j once it has reached S at some grid point up
    to t_j, otherwise a save path.  ``r`` is the largest sampled demand at
    each point, ``r_save`` the largest among save paths (NaN where there
    are none) and ``d_save = S - r_save``.  ``first_passage`` holds the first
    hitting time of each path, NaN for paths that never hit.
    """

    t: np.ndarray
    S: np.ndarray
    n_paths: int
    n_hit: np.ndarray
    r: np.ndarray
    r_save: np.ndarray
    first_passage: np.ndarray

    @property
    def n_save(self) -> np.ndarray:
        return self.n_paths - self.n_hit

    @property
    def hit_fraction(self) -> np.ndarray:
        return self.n_hit / self.n_paths

    @property
    def d_save(self) -> np.ndarray:
        return self.S - self.r_save

    @property
    def risk(self) -> float:
        return float(self.hit_fraction[-1])

    @property
    def risk_se(self) -> float:
        return mc_standard_error(self.risk, self.n_paths)

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "S", "n_hit", "n_save", "hit_fraction", "r", "r_save", "d_save"])
            for row in zip(self.t, self.S, self.n_hit, self.n_save, self.hit_fraction, self.r,
                           self.r_save, self.d_save):
                w.writerow([_cell(v) for v in row])

    def summary(self) -> dict:
        hit = self.first_passage[np.isfinite(self.first_passage)]
        return {"n_paths": self.n_paths, "risk": self.risk, "risk_se": self.risk_se,
                "min_d_save": float(np.nanmin(self.d_save)) if np.any(self.n_save) else None,
                "mean_first_passage": float(hit.mean()) if hit.size else None}


def _cell(v):
    if isinstance(v, (np.integer, int)):
        return int(v)
    return "" if math.isnan(v) else repr(float(v))


def mc_analyze(p: OUProcess, S, grid, n_paths: int, seed: int = 0,
               scheme: str = "exact", t_lo: float = -math.inf) -> McAnalysis:
    """Classify paths sampled on ``grid`` (which starts at the process origin).

    Only grid points at or after ``t_lo`` can turn a path into a hit path.
    """
    grid = np.asarray(grid, dtype=float)
    S = np.broadcast_to(np.asarray(S, dtype=float), grid.shape).copy()
    if n_paths < 1:
        raise ValueError("need at least one path")
    if abs(grid[0] - p.t0) > 1e-12 * max(1.0, abs(p.t0)):
        raise ValueError("grid must start at the process origin")
    watch = grid >= t_lo
    n = grid.size
    n_hit = np.zeros(n, dtype=np.int64)
    r = np.full(n, -np.inf)
    r_save = np.full(n, -np.inf)
    fpt = np.full(n_paths, np.nan)
    for sl, steps in p.iter_path_blocks(grid, n_paths, seed, scheme):
        hit = np.zeros(sl.stop - sl.start, dtype=bool)
        first = np.full(hit.size, np.nan)
        for j, y in enumerate(steps):
            new = ~hit & (y >= S[j]) if watch[j] else np.zeros_like(hit)
            first[new] = grid[j]
            hit |= new
            n_hit[j] += int(hit.sum())
            r[j] = max(r[j], float(y.max()))
            if not hit.all():
                r_save[j] = max(r_save[j], float(y[~hit].max()))
        fpt[sl] = first
    r_save[n_hit == n_paths] = np.nan
    return McAnalysis(t=grid, S=S, n_paths=n_paths, n_hit=n_hit, r=r, r_save=r_save,
                      first_passage=fpt)
