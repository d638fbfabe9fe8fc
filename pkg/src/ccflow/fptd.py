"""First-passage-time density of the demand process across a moving boundary.

The density solves a non-singular second-kind Volterra equation whose kernel
is built from the Gauss-Markov covariance factors of the process.  It is
discretized with repeated Simpson / three-eighths weights and marched forward
in time.  A plain Monte Carlo estimator on the discrete grid serves as the
independent cross-check.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .demand import DomainError, OUProcess, norm_pdf

log = logging.getLogger(__name__)

CDF_SLACK = 1e-3
CLAMP_FRACTION = 0.01
SINGULAR_EPS = 1e-14


class SingularKernelError(ArithmeticError):
    pass


class BoundaryError(ValueError):
    pass


@dataclass(frozen=True)
class Boundary:
    """Moving barrier S(t) with derivative S'(t).

    Either analytic (``value``/``deriv`` callables) or tabulated on a uniform
    grid; tabulated derivatives use central differences inside and one-sided
    differences at the ends.
    """

    value: Optional[Callable] = None
    deriv: Optional[Callable] = None
    grid: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    @classmethod
    def analytic(cls, value: Callable, deriv: Callable) -> "Boundary":
        return cls(value=value, deriv=deriv)

    @classmethod
    def tabulated(cls, grid, values) -> "Boundary":
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.shape != values.shape or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise BoundaryError("tabulated boundary needs matching, increasing grid")
        return cls(grid=grid, values=values)

    @classmethod
    def constant(cls, level: float) -> "Boundary":
        return cls.analytic(lambda t: np.full_like(np.asarray(t, float), level),
                            lambda t: np.zeros_like(np.asarray(t, float)))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.value is not None:
            return np.asarray(self.value(t), float), np.asarray(self.deriv(t), float)
        slope = np.gradient(self.values, self.grid, edge_order=1)
        return np.interp(t, self.grid, self.values), np.interp(t, self.grid, slope)

    def shifted(self, offset: float) -> "Boundary":
        if self.value is not None:
            return Boundary.analytic(lambda t: self.value(t) + offset, self.deriv)
        return Boundary.tabulated(self.grid, self.values + offset)


@dataclass
class FptdResult:
    t: np.ndarray           # t_1 .. t_N
    g: np.ndarray           # clamped density
    G: np.ndarray           # cumulative distribution
    n_clamped: int = 0
    cdf_overshoot: bool = False

    @property
    def risk(self) -> float:
        return float(self.G[-1])


def simpson_weights(k: int) -> np.ndarray:
    """Weights w_{k,j}, j = 1..k-1, of the repeated Simpson rule.

    Even rows use Simpson on [t_0, t_k]; odd rows use Simpson on
    [t_0, t_{k-3}] followed by the three-eighths rule on the last three
    intervals.  The node t_0 (zero density) and t_k itself carry no weight.
    """
    if k < 2:
        return np.zeros(0)
    j = np.arange(1, k)
    w = np.where(j % 2 == 1, 4.0 / 3.0, 2.0 / 3.0)
    if k % 2 == 1:
        n = (k - 1) // 2
        if n >= 2:
            w[2 * n - 3] = 17.0 / 24.0      # j = 2(n-1)
        w[2 * n - 2] = 9.0 / 8.0            # j = 2n-1
        w[2 * n - 1] = 9.0 / 8.0            # j = 2n
    return w


def _lag_tables(p: OUProcess, dt: float, n: int):
    tau = dt * np.arange(n + 1, dtype=float)
    tau[0] = np.nan
    kt = p.kappa * tau
    with np.errstate(invalid="ignore"):
        coth = 1.0 / np.tanh(kt)
        csch = 1.0 / np.sinh(kt)
        denom = 2.0 * p.stationary_variance * np.sinh(kt)
    if np.nanmin(np.abs(denom)) < SINGULAR_EPS:
        raise SingularKernelError("kernel denominator below 1e-14; time step too small")
    sd = np.sqrt(p.stationary_variance * -np.expm1(-2.0 * kt))
    return coth, csch, np.exp(-kt), sd


def psi(p: OUProcess, b: Boundary, t, s, y):
    """Volterra kernel Psi(S(t), t | y, s).

    Uses the closed forms of the covariance-factor ratios for this process:
    (h1'h2(s) - h2'h1(s)) / (h1 h2(s) - h2 h1(s)) = kappa coth(kappa (t-s)) and
    (h2'h1 - h2 h1') / (h1 h2(s) - h2 h1(s)) = -kappa / sinh(kappa (t-s)).
    The conditional-mean term is anchored at m(s).
    """
    t = np.asarray(t, float)
    s = np.asarray(s, float)
    if np.any(s < p.t0) or np.any(t <= s):
        raise DomainError("psi needs t0 <= s < t")
    kt = p.kappa * (t - s)
    if np.any(2.0 * p.stationary_variance * np.abs(np.sinh(kt)) < SINGULAR_EPS):
        raise SingularKernelError("t too close to s")
    St, dSt = b(t)
    mt, dmt = p.mean(t), p.mean_deriv(t)
    ms = p.mean(s)
    bracket = (0.5 * (dSt - dmt) - 0.5 * (St - mt) * p.kappa / np.tanh(kt)
               + 0.5 * (np.asarray(y, float) - ms) * p.kappa / np.sinh(kt))
    cmean, cvar = p.transition_moments(s, y, t)
    sd = np.sqrt(cvar)
    return bracket * norm_pdf((St - cmean) / sd) / sd


def solve_volterra(p: OUProcess, b: Boundary, dt: float, t_end: float) -> FptdResult:
    """March the discretized Volterra equation on t_k = t0 + k dt, k = 1..N."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    n = int(math.floor((t_end - p.t0) / dt + 1e-9))
    if n < 2:
        raise DomainError("need at least two time steps")
    S0, _ = b(p.t0)
    if not float(S0) > p.y0:
        raise BoundaryError(f"boundary S(t0)={float(S0):.6g} must exceed y0={p.y0:.6g}")
    t = p.t0 + dt * np.arange(n + 1, dtype=float)
    S, dS = b(t)
    m = p.mean(t)
    dm = p.mean_deriv(t)
    D = S - m
    E = 0.5 * (dS - dm)
    coth, csch, dec, sd = _lag_tables(p, dt, n)
    half_k = 0.5 * p.kappa

    # kernel from the start point: y0 = m(t0), so the third term drops out
    psi0 = np.empty(n + 1)
    psi0[0] = np.nan
    psi0[1:] = (E[1:] - half_k * D[1:] * coth[1:]) * norm_pdf(D[1:] / sd[1:]) / sd[1:]

    g = np.zeros(n + 1)
    g[1] = -2.0 * psi0[1]
    for k in range(2, n + 1):
        lag = np.arange(k - 1, 0, -1)       # k - j for j = 1..k-1
        Dj = D[1:k]
        z = (D[k] - Dj * dec[lag]) / sd[lag]
        kern = (E[k] - half_k * D[k] * coth[lag] + half_k * Dj * csch[lag]) * norm_pdf(z) / sd[lag]
        g[k] = -2.0 * psi0[k] + 2.0 * dt * np.dot(simpson_weights(k) * g[1:k], kern)

    dens = g[1:]
    neg = dens < 0
    n_clamped = int(np.count_nonzero(neg))
    dens = np.where(neg, 0.0, dens)
    if n_clamped > CLAMP_FRACTION * n:
        warnings.warn(f"{n_clamped} of {n} density values clamped at zero", RuntimeWarning,
                      stacklevel=2)
    G = np.cumsum(np.concatenate(([0.0], dens[:-1])) + dens) * (0.5 * dt)
    overshoot = bool(G[-1] > 1.0 + CDF_SLACK)
    if overshoot:
        warnings.warn(f"cdf exceeds 1 by {G[-1] - 1.0:.3g}", RuntimeWarning, stacklevel=2)
    return FptdResult(t=t[1:], g=dens, G=G, n_clamped=n_clamped, cdf_overshoot=overshoot)


def risk_level(p: OUProcess, b: Boundary, dt: float, t_end: float, theta: float):
    """Terminal crossing probability and the ``risk <= theta`` feasibility flag."""
    if not 0.0 < theta < 1.0:
        raise DomainError("theta must lie in (0, 1)")
    res = solve_volterra(p, b, dt, t_end)
    return res.risk, bool(res.risk <= theta)


def volterra_residual(p: OUProcess, b: Boundary, res: FptdResult) -> np.ndarray:
    """Residual of the continuous equation with trapezoid quadrature of the integral.

    Evaluated at interior grid points using the (unclamped-equivalent) density
    from ``res``; the quadrature rule differs from the one used to solve.
    """
    t = res.t
    dt = t[1] - t[0]
    n = t.size
    tt = np.concatenate(([p.t0], t))
    gg = np.concatenate(([0.0], res.g))
    out = np.zeros(n)
    S, _ = b(tt)
    for k in range(2, n + 1):
        rhs = -2.0 * psi(p, b, tt[k], p.t0, p.y0)
        j = np.arange(1, k)
        kern = psi(p, b, np.full(j.size, tt[k]), tt[j], S[j])
        # trapezoid; both end contributions vanish (g(t0) = 0, Psi(t|s) -> 0 as s -> t)
        rhs = rhs + 2.0 * dt * np.dot(gg[j], kern)
        out[k - 1] = gg[k] - rhs
    return out[1:]


def mc_first_passage_risk(p: OUProcess, b: Boundary, dt: float, t_end: float,
                          n_paths: int, seed: int = 0, scheme: str = "exact") -> float:
    """Fraction of sample paths exceeding S at some grid point in (t0, t_end].

    Monitoring is discrete, so coarse grids miss crossings between nodes.  The
    ``euler`` scheme replaces exact transitions by Euler-Maruyama steps, whose
    inflated one-step variance partly offsets that bias on coarse grids.
    """
    n = int(math.floor((t_end - p.t0) / dt + 1e-9))
    grid = p.t0 + dt * np.arange(n + 1, dtype=float)
    S, _ = b(grid)
    hits = 0
    for sl, steps in p.iter_path_blocks(grid, n_paths, seed, scheme):
        hit = np.zeros(sl.stop - sl.start, dtype=bool)
        for k, y in enumerate(steps):
            if k:
                hit |= y > S[k]
        hits += int(hit.sum())
    return hits / n_paths


def mc_standard_error(risk: float, n_paths: int) -> float:
    return math.sqrt(max(risk * (1.0 - risk), 1e-300) / n_paths)
