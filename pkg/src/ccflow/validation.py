"""Closed-form references for the single-edge advection model."""
from __future__ import annotations

import math

import numpy as np

from .demand import OUProcess


def exact_advection(x, t, lam: float, s: float, rho0, u):
    """Solution of rho_t + lam rho_x = s rho on x >= 0 with inflow u(t).

    Points with t <= x / lam are reached from the initial data; the rest
    from the boundary.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))
    from_ic = t <= x / lam
    out = np.empty(x.shape)
    xi, ti = x[from_ic], t[from_ic]
    out[from_ic] = np.exp(s * ti) * np.asarray(rho0(xi - lam * ti), float)
    xb, tb = x[~from_ic], t[~from_ic]
    out[~from_ic] = np.exp(s * xb / lam) * np.asarray(u(tb - xb / lam), float)
    return out if out.ndim else float(out)


def analytic_optimal_control(p: OUProcess, lam: float, theta: float, T: float, t=None,
                             s: float = 0.0, length: float = 1.0, cc_interval=None,
                             scale: str = "stddev"):
    """Optimal inflow for pure tracking with a quantile constraint.

    The supply at the outflow end is the inflow delayed by length / lam and
    scaled by exp(s length / lam); the best supply is the quantile curve
    where the constraint is active and the mean elsewhere.  Returns the
    control on ``t`` (default: 201 points of [t0, T - length / lam]).
    """
    delay = length / lam
    if not T > delay:
        raise ValueError("horizon shorter than the transport delay")
    if t is None:
        t = np.linspace(p.t0, T - delay, 201)
    t = np.asarray(t, float)
    ta = t + delay
    target = p.quantile(ta, theta, scale=scale)
    if cc_interval is not None:
        lo, hi = cc_interval
        target = np.where((ta >= lo) & (ta <= hi), target, p.mean(ta))
    return math.exp(-s * delay) * target
