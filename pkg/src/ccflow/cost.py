"""Deterministic form of the expected running cost.

For a Gaussian demand Y_t ~ N(m, v) and supply S the three expectations
reduce to closed forms in z = (S - m) / sqrt(v):

    E[(S - Y)^2]        = (S - m)^2 + v
    E[min(S - Y, 0)]    = (S - m)(1 - Phi(z)) - sqrt(v) phi(z)
    E[max(S - Y, 0)]    = (S - m) Phi(z) + sqrt(v) phi(z)

Their supply derivatives are 2(S - m), 1 - Phi(z) and Phi(z).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .demand import OUProcess, norm_cdf, norm_pdf, norm_sf

# variance below this is treated as a point mass (t = t0)
POINT_MASS_VAR = 1e-300


class DegenerateTruncation(ArithmeticError):
    pass


class EmptyHorizonError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    w_det: float = 0.0
    w_track: float = 1.0
    w_under: float = 0.0
    w_ex: float = 0.0
    c_compr: float = 1.0
    c_gas: float = 1e-4

    def __post_init__(self):
        for k in ("w_det", "w_track", "w_under", "w_ex"):
            if getattr(self, k) < 0:
                raise ValueError(f"weight {k} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostWeights":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True)
class TruncNormSpec:
    mean: float
    variance: float
    a: float = -math.inf
    b: float = math.inf

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError("need a < b")
        if not self.variance > 0:
            raise ValueError("variance must be positive")


def truncnorm_mean(spec: TruncNormSpec) -> float:
    sd = math.sqrt(spec.variance)
    za = (spec.a - spec.mean) / sd
    zb = (spec.b - spec.mean) / sd
    # upper-tail windows lose precision through Phi; use survival functions there
    if za > 0:
        mass = float(norm_sf(za) - norm_sf(zb))
    else:
        mass = float(norm_cdf(zb) - norm_cdf(za))
    if not mass > 1e-300:
        raise DegenerateTruncation(f"window [{spec.a}, {spec.b}] carries no mass")
    pa = 0.0 if math.isinf(za) else float(norm_pdf(za))
    pb = 0.0 if math.isinf(zb) else float(norm_pdf(zb))
    return spec.mean + sd * (pa - pb) / mass


def _moments(p: OUProcess, t, supply):
    t = np.asarray(t, dtype=float)
    S = np.asarray(supply, dtype=float)
    m = p.mean(t)
    v = p.variance(t)
    return np.broadcast_arrays(S - m, v)


def tracking_cost(p: OUProcess, t, supply):
    d, v = _moments(p, t, supply)
    return d * d + v


def _split(d, v):
    """(undersupply, excess, P(Y > S)) with the point-mass limit at v = 0.

    The smaller of the two parts is sd * phi(a) (1 - a Phi(-a) / phi(a)) with
    a = |z|, written through erfcx so it keeps full relative accuracy in the
    tails; the other part follows from under + excess = S - m.
    """
    sd = np.sqrt(np.maximum(v, 0.0))
    degen = v <= POINT_MASS_VAR
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(degen, 0.0, d / np.where(degen, 1.0, sd))
    up = np.where(degen, (d < 0).astype(float), norm_sf(z))
    a = np.abs(z)
    mills = 1.0 - a * math.sqrt(math.pi / 2.0) * special.erfcx(a / math.sqrt(2.0))
    tail = np.where(degen, 0.0, sd * norm_pdf(a) * np.maximum(mills, 0.0))
    under = np.where(degen, np.minimum(d, 0.0), np.where(z < 0, d - tail, -tail))
    excess = np.where(degen, np.maximum(d, 0.0), np.where(z < 0, tail, d + tail))
    return under, excess, up


def undersupply_cost(p: OUProcess, t, supply):
    """E[min(S - Y_t, 0)]; nonpositive."""
    d, v = _moments(p, t, supply)
    return _split(d, v)[0]


def excess_revenue(p: OUProcess, t, supply):
    """E[max(S - Y_t, 0)]; nonnegative."""
    d, v = _moments(p, t, supply)
    return _split(d, v)[1]


def time_weights(t, t_star: float) -> np.ndarray:
    """Composite trapezoid weights of the integral over [t_star, t[-1]].

    A t_star between nodes cuts its interval; the integrand is taken as
    linear there.
    """
    t = np.asarray(t, dtype=float)
    if t_star >= t[-1]:
        raise EmptyHorizonError(f"t* = {t_star} leaves no horizon before T = {t[-1]}")
    w = np.zeros(t.size)
    h = np.diff(t)
    full = t[:-1] >= t_star - 1e-12 * max(1.0, abs(t_star))
    w[:-1] += np.where(full, 0.5 * h, 0.0)
    w[1:] += np.where(full, 0.5 * h, 0.0)
    k = int(np.searchsorted(t, t_star, side="right"))
    if 0 < k < t.size and not full[k - 1]:
        alpha = (t_star - t[k - 1]) / h[k - 1]
        rem = t[k] - t_star
        w[k - 1] += 0.5 * rem * (1.0 - alpha)
        w[k] += 0.5 * rem * (1.0 + alpha)
    return w


@dataclass
class CostValue:
    C1: float
    C2: float
    C3: float
    R: float
    regularization: float = 0.0
    penalty: float = 0.0

    @property
    def total(self) -> float:
        return self.C1 + self.C2 + self.C3 - self.R + self.regularization + self.penalty

    def to_dict(self) -> dict:
        return {"C1": self.C1, "C2": self.C2, "C3": self.C3, "R": self.R,
                "regularization": self.regularization, "penalty": self.penalty,
                "total": self.total}


def running_cost(p: OUProcess, w: CostWeights, t, supply, u=None, u_compr=None):
    """Per-level cost components and supply/control sensitivities.

    Returns a dict with the rate arrays ``det``, ``track``, ``under``,
    ``excess`` and the derivatives ``dS``, ``du``, ``du_compr`` of the
    combined rate.
    """
    d, v = _moments(p, t, supply)
    under, excess, up = _split(d, v)
    zero = np.zeros_like(d)
    u = zero if u is None else np.asarray(u, float)
    uc = zero if u_compr is None else np.asarray(u_compr, float)
    det = w.c_compr * np.maximum(uc, 0.0) + w.c_gas * u
    return {
        "det": det, "track": d * d + v, "under": under, "excess": excess,
        "dS": w.w_track * 2.0 * d - w.w_under * up - w.w_ex * (1.0 - up),
        "du": np.full_like(d, w.w_det * w.c_gas),
        "du_compr": w.w_det * w.c_compr * (uc > 0).astype(float),
    }


def total_objective(p: OUProcess, w: CostWeights, t, supply, u=None, u_compr=None,
                    t_star: float = 0.0, regularization: float = 0.0) -> CostValue:
    """Time integral of the running cost over [t_star, T]."""
    tw = time_weights(t, t_star)
    rc = running_cost(p, w, t, supply, u, u_compr)
    return CostValue(C1=float(w.w_det * tw @ rc["det"]),
                     C2=float(w.w_track * tw @ rc["track"]),
                     C3=float(-w.w_under * tw @ rc["under"]),
                     R=float(w.w_ex * tw @ rc["excess"]),
                     regularization=float(regularization))
