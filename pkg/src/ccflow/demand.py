"""Ornstein-Uhlenbeck demand with a time-dependent mean level.

The process follows ``dY = kappa (mu(t) - Y) dt + sigma dW`` started at
``Y(t0) = y0``.  Everything the optimizer and the first-passage solver need
(moments, covariance factors, transition law, quantiles, exact paths) is
available in closed form, except the mean integral for tabulated mean levels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import integrate, special

# Paths are generated in fixed-size blocks, each with its own child seed, so
# results do not depend on how blocks are scheduled.
PATH_BLOCK = 65536


def norm_cdf(x):
    return special.ndtr(x)


def norm_sf(x):
    return special.ndtr(-np.asarray(x, dtype=float))


def norm_ppf(p):
    return special.ndtri(p)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


class DomainError(ValueError):
    """Argument outside the domain of a demand-model operation."""


@dataclass(frozen=True)
class MeanLevel:
    """Mean demand level mu(t).

    ``kind`` is one of ``constant``, ``sinusoidal`` or ``tabulated``.  The
    sinusoid is ``offset + amplitude * sin(omega * t + phase)``; tabulated
    levels interpolate linearly and clamp outside the table.
    """

    kind: str = "constant"
    level: float = 0.0
    offset: float = 0.0
    amplitude: float = 0.0
    omega: float = 0.0
    phase: float = 0.0
    times: tuple = ()
    values: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "sinusoidal", "tabulated"):
            raise ValueError(f"unknown mean level kind {self.kind!r}")
        if self.kind == "tabulated":
            t = np.asarray(self.times, dtype=float)
            if t.size < 2 or t.size != len(self.values):
                raise ValueError("tabulated mean level needs >= 2 (time, value) pairs")
            if np.any(np.diff(t) <= 0):
                raise ValueError("tabulated times must be strictly increasing")

    @classmethod
    def constant(cls, level: float) -> "MeanLevel":
        return cls(kind="constant", level=float(level))

    @classmethod
    def sinusoidal(cls, offset, amplitude, omega, phase=0.0) -> "MeanLevel":
        return cls(kind="sinusoidal", offset=float(offset), amplitude=float(amplitude),
                   omega=float(omega), phase=float(phase))

    @classmethod
    def tabulated(cls, times: Sequence[float], values: Sequence[float]) -> "MeanLevel":
        return cls(kind="tabulated", times=tuple(map(float, times)),
                   values=tuple(map(float, values)))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return np.full_like(t, self.level)
        if self.kind == "sinusoidal":
            return self.offset + self.amplitude * np.sin(self.omega * t + self.phase)
        return np.interp(t, self.times, self.values)

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "level": self.level}
        if self.kind == "sinusoidal":
            return {"kind": "sinusoidal", "offset": self.offset, "amplitude": self.amplitude,
                    "omega": self.omega, "phase": self.phase}
        return {"kind": "tabulated", "times": list(self.times), "values": list(self.values)}

    @classmethod
    def from_dict(cls, d: dict) -> "MeanLevel":
        kind = d.get("kind", "constant")
        if kind == "constant":
            return cls.constant(d["level"])
        if kind == "sinusoidal":
            return cls.sinusoidal(d.get("offset", 0.0), d["amplitude"], d["omega"],
                                  d.get("phase", 0.0))
        if kind == "tabulated":
            return cls.tabulated(d["times"], d["values"])
        raise ValueError(f"unknown mean level kind {kind!r}")


@dataclass(frozen=True)
class MomentQuadrature:
    """How the mean integral kappa * int exp(-kappa (t-s)) mu(s) ds is evaluated.

    ``auto`` uses closed forms for constant and sinusoidal levels and
    adaptive quadrature otherwise; ``adaptive`` forces quadrature.
    """

    method: str = "auto"
    atol: float = 1e-12

    def __post_init__(self):
        if self.method not in ("auto", "adaptive"):
            raise ValueError(f"unknown quadrature method {self.method!r}")
        if not self.atol > 0:
            raise ValueError("quadrature tolerance must be positive")


@dataclass(frozen=True)
class OUProcess:
    t0: float
    y0: float
    kappa: float
    sigma: float
    mean_level: MeanLevel = field(default_factory=MeanLevel)
    quadrature: MomentQuadrature = field(default_factory=MomentQuadrature)

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def stationary_variance(self) -> float:
        return self.sigma ** 2 / (2.0 * self.kappa)

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < self.t0 - 1e-12 * max(1.0, abs(self.t0))):
            raise DomainError(f"time before process start t0={self.t0}")
        return t

    def _forcing(self, s, t):
        """kappa * int_s^t exp(-kappa (t-u)) mu(u) du, elementwise."""
        k = self.kappa
        s, t = np.broadcast_arrays(np.asarray(s, float), np.asarray(t, float))
        ml = self.mean_level
        if self.quadrature.method == "auto" and ml.kind == "constant":
            return ml.level * (1.0 - np.exp(-k * (t - s)))
        if self.quadrature.method == "auto" and ml.kind == "sinusoidal":
            w, a = ml.omega, ml.amplitude
            decay = np.exp(-k * (t - s))

            def prim(x):
                return k * np.sin(w * x + ml.phase) - w * np.cos(w * x + ml.phase)

            osc = k * a / (k * k + w * w) * (prim(t) - decay * prim(s))
            return ml.offset * (1.0 - decay) + osc
        out = np.empty(t.shape)
        pts = np.asarray(ml.times) if ml.kind == "tabulated" else None
        for idx in np.ndindex(t.shape):
            lo, hi = float(s[idx]), float(t[idx])
            if hi <= lo:
                out[idx] = 0.0
                continue
            brk = None
            if pts is not None:
                inner = pts[(pts > lo) & (pts < hi)]
                brk = inner if inner.size else None
            val, _ = integrate.quad(lambda u: math.exp(-k * (hi - u)) * float(ml(u)), lo, hi,
                                    epsabs=self.quadrature.atol, epsrel=1e-13,
                                    limit=500, points=brk)
            out[idx] = k * val
        return out

    def mean(self, t):
        t = self._check(t)
        return self.y0 * np.exp(-self.kappa * (t - self.t0)) + self._forcing(self.t0, t)

    def mean_deriv(self, t):
        """Time derivative of the mean, kappa (mu(t) - m(t))."""
        return self.kappa * (self.mean_level(t) - self.mean(t))

    def variance(self, t):
        t = self._check(t)
        return self.stationary_variance * -np.expm1(-2.0 * self.kappa * (t - self.t0))

    def std(self, t):
        return np.sqrt(self.variance(t))

    def covariance(self, s, t):
        s, t = np.broadcast_arrays(self._check(s), self._check(t))
        lo, hi = np.minimum(s, t), np.maximum(s, t)
        k = self.kappa
        # factored so small s - t0 does not cancel
        return self.stationary_variance * np.exp(-k * (hi - lo)) * -np.expm1(
            -2.0 * k * (lo - self.t0))

    def cov_factors(self, t):
        """Return (h1, h2, h1', h2') with cov(Y_s, Y_t) = h1(s) h2(t) for s <= t."""
        t = self._check(t)
        k, t0 = self.kappa, self.t0
        c = self.stationary_variance
        h1 = np.exp(k * t) * -np.expm1(-2.0 * k * (t - t0))
        h2 = c * np.exp(-k * t)
        dh1 = k * np.exp(k * t) + k * np.exp(-k * (t - 2.0 * t0))
        dh2 = -0.5 * self.sigma ** 2 * np.exp(-k * t)
        return h1, h2, dh1, dh2

    def transition_moments(self, s, y, t):
        """Mean and variance of Y_t given Y_s = y."""
        s = self._check(s)
        t = np.asarray(t, dtype=float)
        if np.any(t <= s):
            raise DomainError("transition needs s < t")
        decay = np.exp(-self.kappa * (t - s))
        cmean = np.asarray(y, float) * decay + self._forcing(s, t)
        cvar = self.stationary_variance * -np.expm1(-2.0 * self.kappa * (t - s))
        return cmean, cvar

    def quantile(self, t, theta, scale: str = "stddev"):
        """Level exceeded with probability ``theta`` at time t.

        ``scale="variance"`` multiplies the normal quantile by the variance
        instead of the standard deviation, reproducing the literal form of
        the quantile constraint found in the source model description.
        """
        theta = np.asarray(theta, dtype=float)
        if np.any((theta <= 0) | (theta >= 1)):
            raise DomainError("theta must lie in (0, 1)")
        if scale not in ("stddev", "variance"):
            raise ValueError(f"unknown quantile scale {scale!r}")
        v = self.variance(t)
        spread = np.sqrt(v) if scale == "stddev" else v
        # at t0 the law is a point mass and the spread vanishes, giving y0
        return self.mean(t) + spread * norm_ppf(1.0 - theta)

    # -- path sampling ---------------------------------------------------

    def _step_coeffs(self, grid):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size < 1:
            raise DomainError("grid must be a non-empty 1-d array")
        if abs(grid[0] - self.t0) > 1e-9 * max(1.0, abs(self.t0)):
            raise DomainError("grid must start at t0")
        dts = np.diff(grid)
        if np.any(dts <= 0):
            raise DomainError("grid must be strictly increasing")
        m = self.mean(grid)
        decay = np.exp(-self.kappa * dts)
        drift = m[1:] - m[:-1] * decay
        sd = np.sqrt(self.stationary_variance * -np.expm1(-2.0 * self.kappa * dts))
        return grid, decay, drift, sd

    def _euler_coeffs(self, grid):
        grid = np.asarray(grid, dtype=float)
        self._step_coeffs(grid)
        dts = np.diff(grid)
        mu = self.mean_level(grid[:-1])
        return grid, 1.0 - self.kappa * dts, self.kappa * mu * dts, self.sigma * np.sqrt(dts)

    def iter_path_blocks(self, grid, n_paths: int, seed: int,
                         scheme: str = "exact") -> Iterator[tuple[slice, Iterator[np.ndarray]]]:
        """Yield ``(path_slice, steps)`` per block; ``steps`` yields the state per grid point.

        ``scheme="exact"`` draws from the transition law; ``scheme="euler"`` uses
        the Euler-Maruyama recursion, which is only first-order accurate in law.
        """
        if n_paths < 1:
            raise DomainError("n_paths must be >= 1")
        if scheme == "exact":
            grid, decay, drift, sd = self._step_coeffs(grid)
        elif scheme == "euler":
            grid, decay, drift, sd = self._euler_coeffs(grid)
        else:
            raise ValueError(f"unknown sampling scheme {scheme!r}")
        n_blocks = -(-n_paths // PATH_BLOCK)
        children = np.random.SeedSequence(seed).spawn(n_blocks)
        for b, child in enumerate(children):
            lo = b * PATH_BLOCK
            hi = min(n_paths, lo + PATH_BLOCK)

            def steps(child=child, size=hi - lo):
                rng = np.random.Generator(np.random.Philox(child))
                y = np.full(size, float(self.y0))
                yield y
                for k in range(decay.size):
                    y = y * decay[k] + drift[k] + sd[k] * rng.standard_normal(size)
                    yield y

            yield slice(lo, hi), steps()

    def sample_paths(self, grid, n_paths: int, seed: int = 0, scheme: str = "exact") -> np.ndarray:
        """Samples on ``grid``; shape ``(n_paths, len(grid))``."""
        grid = np.asarray(grid, dtype=float)
        out = np.empty((n_paths, grid.size))
        for sl, steps in self.iter_path_blocks(grid, n_paths, seed, scheme):
            for k, y in enumerate(steps):
                out[sl, k] = y
        return out

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {"t0": self.t0, "y0": self.y0, "kappa": self.kappa, "sigma": self.sigma,
                "mean_level": self.mean_level.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "OUProcess":
        return cls(t0=float(d.get("t0", 0.0)), y0=float(d["y0"]), kappa=float(d["kappa"]),
                   sigma=float(d["sigma"]), mean_level=MeanLevel.from_dict(d["mean_level"]))
