"""Piecewise-constant controls on a coarse grid and their map to time levels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ControlGrid:
    """Per-channel cell values on ``[t0, t0 + n_cells * cell)``.

    The value applied at simulation level ``n`` (time ``t0 + n dt``) is the one
    of the cell containing ``(t_{n-1}, t_n]``; level 0 uses the first cell.
    """

    t0: float
    cell: float
    values: dict
    lower: dict = field(default_factory=dict)
    upper: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("control cell width must be positive")
        self.values = {k: np.asarray(v, dtype=float).copy() for k, v in self.values.items()}
        sizes = {v.size for v in self.values.values()}
        if len(sizes) > 1:
            raise ValueError("all control channels need the same number of cells")
        for ch in self.values:
            self.lower.setdefault(ch, 0.0)
            self.upper.setdefault(ch, math.inf)

    @classmethod
    def constant(cls, t0, cell, n_cells, levels: dict, lower=None, upper=None) -> "ControlGrid":
        return cls(t0, cell, {k: np.full(n_cells, float(v)) for k, v in levels.items()},
                   dict(lower or {}), dict(upper or {}))

    @property
    def channels(self) -> list:
        return sorted(self.values)

    @property
    def n_cells(self) -> int:
        return next(iter(self.values.values())).size if self.values else 0

    def steps_per_cell(self, dt: float) -> int:
        r = self.cell / dt
        k = int(round(r))
        if k < 1 or abs(r - k) > 1e-9 * max(1.0, r):
            raise ValueError(f"control cell {self.cell} is not an integer multiple of dt={dt}")
        return k

    def level_cells(self, n_levels: int, dt: float) -> np.ndarray:
        spc = self.steps_per_cell(dt)
        n = np.arange(n_levels)
        cells = np.maximum(n - 1, 0) // spc
        if cells.size and cells[-1] >= self.n_cells:
            raise ValueError("control grid is shorter than the simulation horizon")
        return cells

    def at_levels(self, n_levels: int, dt: float, channels=None) -> np.ndarray:
        """Array ``(n_levels, n_channels)`` of applied values."""
        channels = self.channels if channels is None else channels
        cells = self.level_cells(n_levels, dt)
        out = np.zeros((n_levels, len(channels)))
        for i, ch in enumerate(channels):
            if ch in self.values:
                out[:, i] = self.values[ch][cells]
        return out

    def cell_times(self) -> np.ndarray:
        return self.t0 + self.cell * np.arange(self.n_cells)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.values[ch] for ch in self.channels])

    def with_vector(self, z) -> "ControlGrid":
        z = np.asarray(z, dtype=float)
        n = self.n_cells
        vals = {ch: z[i * n:(i + 1) * n] for i, ch in enumerate(self.channels)}
        return ControlGrid(self.t0, self.cell, vals, dict(self.lower), dict(self.upper))

    def bounds_vectors(self):
        n = self.n_cells
        lo = np.concatenate([np.broadcast_to(np.asarray(self.lower[ch], float), (n,))
                             for ch in self.channels])
        hi = np.concatenate([np.broadcast_to(np.asarray(self.upper[ch], float), (n,))
                             for ch in self.channels])
        return lo, hi

    def project(self) -> "ControlGrid":
        lo, hi = self.bounds_vectors()
        return self.with_vector(np.clip(self.to_vector(), lo, hi))
