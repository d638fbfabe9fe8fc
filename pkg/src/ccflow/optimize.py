"""Chance-constrained optimal supply control.

The fully discrete problem is solved directly: the box scheme is marched
forward, the gradient comes from the transposed step systems marched
backward, and constraints enter through augmented Lagrangian (PHR) terms
around a projected gradient method with Barzilai-Borwein steps.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .controls import ControlGrid
from .cost import CostValue, CostWeights, running_cost, time_weights
from .demand import OUProcess, norm_cdf, norm_pdf
from .fptd import Boundary, solve_volterra
from .network import IboxSystem, Network, StepFailure, simulate

log = logging.getLogger(__name__)

__all__ = ["ChanceConstraintSpec", "ControlGrid", "ControlProblem", "Evaluation", "OptResult",
           "OptimizerSettings", "PenaltyState", "PressureBound", "check_gradient",
           "jcc_risk", "objective_and_gradient", "optimize", "scc_bound"]


@dataclass(frozen=True)
class ChanceConstraintSpec:
    variant: str = "none"
    t_lo: float = 0.0
    t_hi: float = 0.0
    theta: float = 0.05
    fptd_dt: Optional[float] = None
    quantile_scale: str = "stddev"
    mixture_nodes: int = 32

    def __post_init__(self):
        if self.variant not in ("none", "scc", "jcc"):
            raise ValueError(f"unknown chance constraint variant {self.variant!r}")
        if self.variant != "none":
            if not self.t_lo < self.t_hi:
                raise ValueError("chance constraint interval needs t_lo < t_hi")
            if not 0.0 < self.theta < 1.0:
                raise ValueError("risk level must lie in (0, 1)")

    def active(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        eps = 1e-9 * max(1.0, abs(self.t_hi))
        return (t >= self.t_lo - eps) & (t <= self.t_hi + eps)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class PressureBound:
    """Lower bound ``p_min`` (pressure units, usually bar) at ``vertex``."""

    vertex: str
    p_min: float
    t_lo: float = -math.inf
    t_hi: float = math.inf


@dataclass(frozen=True)
class OptimizerSettings:
    max_inner: int = 500
    max_outer: int = 20
    gtol: float = 1e-6
    armijo: float = 1e-4
    max_backtracks: int = 40
    feas_tol: float = 1e-6
    jcc_tol: float = 1e-4
    rho0: float = 10.0
    rho_max: float = 1e10
    rho_jcc0: float = 10.0
    w_reg: float = 1e-5
    method: str = "pg"            # "pg", "lbfgsb" or "slsqp"
    scc_mode: str = "auto"        # "auto": control bounds when supply is a control
    jcc_warm_start: bool = True
    fd_workers: int = 1
    linear_fast_path: bool = True

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ControlProblem:
    net: Network
    x0: np.ndarray
    process: OUProcess
    weights: CostWeights
    controls: ControlGrid
    T: float
    dt: float
    t0: float = 0.0
    cc: ChanceConstraintSpec = field(default_factory=ChanceConstraintSpec)
    pressure_bounds: tuple = ()
    t_star: Optional[float] = None
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    system: Optional[IboxSystem] = field(default=None, repr=False)

    def __post_init__(self):
        if self.system is None:
            self.system = IboxSystem(self.net, self.dt)
        if sorted(self.controls.channels) != list(self.system.channels):
            raise ValueError(f"control channels {self.controls.channels} do not match the "
                             f"network's {self.system.channels}")
        if self.t_star is None:
            self.t_star = self.net.transport_delay() if self.net.is_linear else self.t0
        self.n_levels = int(round((self.T - self.t0) / self.dt)) + 1
        self.t = self.t0 + self.dt * np.arange(self.n_levels)
        self.cells = self.controls.level_cells(self.n_levels, self.dt)

    @property
    def supply_is_control(self) -> bool:
        return self.net.supply.kind == "conversion"

    def with_(self, **kw) -> "ControlProblem":
        kw.setdefault("system", self.system)
        return replace(self, **kw)


# --------------------------------------------------------------------------
# constraints


def scc_bound(p: OUProcess, spec: ChanceConstraintSpec, t) -> np.ndarray:
    """Quantile lower bound on the supply; -inf outside the active interval."""
    t = np.asarray(t, float)
    if spec.variant == "none":
        return np.full(t.shape, -np.inf)
    q = p.quantile(t, spec.theta, scale=spec.quantile_scale)
    return np.where(spec.active(t), q, -np.inf)


def _first_passage(p: OUProcess, b: Boundary, t_end: float, dt: float) -> float:
    if not float(b(p.t0)[0]) > p.y0:
        return 1.0
    n = int(math.floor((t_end - p.t0) / dt + 1e-9))
    if n < 2:
        dt = (t_end - p.t0) / 2.0
    # clamping is routine for the perturbed supplies seen by FD probes
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = solve_volterra(p, b, dt, t_end)
    if res.n_clamped:
        log.debug("%d density values clamped at zero", res.n_clamped)
    return min(1.0, res.risk)


def jcc_risk(p: OUProcess, t, S, spec: ChanceConstraintSpec) -> float:
    """Probability that demand exceeds the supply somewhere on the active interval.

    When the interval starts after the process does, the first-passage
    probability is averaged over the law of the demand at its start.
    """
    t = np.asarray(t, float)
    S = np.asarray(S, float)
    b = Boundary.tabulated(t, S)
    dt = spec.fptd_dt or float(t[1] - t[0])
    if spec.t_lo <= p.t0 + 1e-12 * max(1.0, abs(p.t0)):
        return _first_passage(p, b, spec.t_hi, dt)
    m = float(p.mean(spec.t_lo))
    sd = float(p.std(spec.t_lo))
    s_lo = float(b(spec.t_lo)[0])
    zs = (s_lo - m) / sd
    risk = float(norm_cdf(-zs))
    lo = -8.0
    if zs <= lo:
        return risk
    x, w = np.polynomial.legendre.leggauss(spec.mixture_nodes)
    z = lo + (zs - lo) * 0.5 * (x + 1.0)
    w = w * 0.5 * (zs - lo) * norm_pdf(z)
    for zi, wi in zip(z, w):
        cond = replace(p, t0=spec.t_lo, y0=m + sd * zi)
        risk += wi * _first_passage(cond, b, spec.t_hi, dt)
    return min(1.0, risk)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class PenaltyState:
    rho: float
    lam_scc: np.ndarray
    lam_p: np.ndarray                 # (bounds, levels)
    rho_jcc: float = 10.0
    lam_jcc: float = 0.0


@dataclass
class Evaluation:
    cost: CostValue
    grad: Optional[np.ndarray]
    supply: np.ndarray
    g_scc: np.ndarray
    g_p: np.ndarray
    risk: float = float("nan")
    trajectory: object = None

    @property
    def scc_violation(self) -> float:
        g = self.g_scc[np.isfinite(self.g_scc)]
        return float(max(np.max(g, initial=0.0), 0.0))

    @property
    def pressure_violation(self) -> float:
        g = self.g_p[np.isfinite(self.g_p)]
        return float(max(np.max(g, initial=0.0), 0.0))


def _phr(g, lam, rho, wq):
    """PHR term for g <= 0 with weights wq; returns (value, dvalue/dg)."""
    g = np.where(np.isfinite(g), g, -np.inf)
    a = np.maximum(0.0, lam + rho * g)
    val = float(np.sum(wq * (a * a - lam * lam)) / (2.0 * rho))
    return val, wq * a


class _Evaluator:
    def __init__(self, prob: ControlProblem, pen: Optional[PenaltyState], use_jcc: bool,
                 scc_penalty: bool, fast: bool = False):
        self.prob = prob
        # a linear network without state bounds only needs the affine supply map
        self.fast = (fast and prob.net.is_linear and not prob.pressure_bounds
                     and not prob.supply_is_control)
        self.pen = pen
        self.use_jcc = use_jcc
        self.scc_penalty = scc_penalty
        sysm = prob.system
        self.channels = list(sysm.channels)
        p = prob.process
        t = prob.t
        self.tw = time_weights(t, prob.t_star)
        bound = scc_bound(p, prob.cc, t) if prob.cc.variant == "scc" else np.full(t.size, -np.inf)
        if not prob.supply_is_control:
            # the supply cannot react before the transport delay has passed
            bound = np.where(t >= prob.t_star - 1e-9 * max(1.0, prob.t_star), bound, -np.inf)
        self.bound = bound
        self.wq = np.full(t.size, prob.dt)
        self.p_rows = []
        for pb in prob.pressure_bounds:
            col, model = _vertex_col(prob, pb.vertex)
            act = (np.arange(t.size) >= 1) & (t >= pb.t_lo) & (t <= pb.t_hi)
            self.p_rows.append((col, model, pb.p_min, act))

    def response(self):
        """Affine supply map S = s0 + G z of a linear network, built once per problem."""
        prob = self.prob
        cached = getattr(prob, "_response", None)
        if cached is not None:
            return cached
        sysm = prob.system
        nc = prob.controls.n_cells
        nz = nc * len(self.channels)
        lu = sysm.factor(prob.x0)
        idx = sysm.base(prob.net.supply_edge().name, -1) + \
            prob.net.supply_edge().model.components.index(prob.net.supply.component)
        s0 = np.zeros(prob.n_levels)
        G = np.zeros((prob.n_levels, nz))
        x = np.array(prob.x0, float)
        xs = np.zeros((sysm.n_unknowns, nz))
        s0[0] = x[idx]
        for n in range(1, prob.n_levels):
            x = -lu.solve(sysm.B @ x + sysm._affine_part(prob.t[n]))
            r = sysm.B @ xs
            for j in range(len(self.channels)):
                r[:, j * nc + prob.cells[n]] += sysm.C[:, j]
            xs = -lu.solve(r)
            s0[n] = x[idx]
            G[n] = xs[idx]
        prob._response = (s0, G)
        return prob._response

    def levels(self, z):
        grid = self.prob.controls.with_vector(z)
        return grid.at_levels(self.prob.n_levels, self.prob.dt, self.channels)

    def risk(self, z) -> float:
        prob = self.prob
        S = self._supply(z)
        return jcc_risk(prob.process, prob.t, S, prob.cc)

    def _supply(self, z, traj=None):
        prob = self.prob
        if prob.supply_is_control:
            U = self.levels(z)
            s = prob.net.supply
            return s.convert(U[:, self.channels.index(s.channel)])[0]
        if traj is None:
            traj = simulate(prob.net, prob.x0, self.levels(z), prob.T, prob.dt, prob.t0,
                            system=prob.system)
        return traj.supply()

    def __call__(self, z, need_grad=True) -> Evaluation:
        prob, pen = self.prob, self.pen
        sysm = prob.system
        net = prob.net
        p, w = prob.process, prob.weights
        t = prob.t
        U = self.levels(z)
        fast = self.fast
        need_state = ((not prob.supply_is_control) or bool(self.p_rows)) and not fast
        traj = None
        if need_state:
            traj = simulate(net, prob.x0, U, prob.T, prob.dt, prob.t0,
                            keep_factors=need_grad, system=sysm)
        sup = net.supply
        if prob.supply_is_control:
            iu = self.channels.index(sup.channel)
            S, dSdu = sup.convert(U[:, iu])
        elif fast:
            s0, Gs = self.response()
            S = s0 + Gs @ np.asarray(z, float)
        else:
            S = traj.supply()
        ch_u = self.channels.index("u") if "u" in self.channels else None
        ch_c = self.channels.index("u_compr") if "u_compr" in self.channels else None
        rc = running_cost(p, w, t, S, U[:, ch_u] if ch_u is not None else None,
                          U[:, ch_c] if ch_c is not None else None)
        tw = self.tw
        cost = CostValue(C1=float(w.w_det * tw @ rc["det"]), C2=float(w.w_track * tw @ rc["track"]),
                         C3=float(-w.w_under * tw @ rc["under"]), R=float(w.w_ex * tw @ rc["excess"]))
        dS = tw * rc["dS"]                       # d cost / d S_n
        dU = np.zeros_like(U)                    # direct d cost / d U_n
        if ch_u is not None:
            dU[:, ch_u] += tw * rc["du"]
        if ch_c is not None:
            dU[:, ch_c] += tw * rc["du_compr"]

        # regularization of control variations
        nc = prob.controls.n_cells
        Z = np.asarray(z, float).reshape(len(self.channels), nc)
        dZ = np.diff(Z, axis=1)
        wr = prob.settings.w_reg
        cost.regularization = float(wr * np.sum(dZ * dZ))
        greg = np.zeros_like(Z)
        greg[:, 1:] += 2.0 * wr * dZ
        greg[:, :-1] -= 2.0 * wr * dZ

        # chance constraint as state constraint
        g_scc = self.bound - S
        penalty = 0.0
        if pen is not None and self.scc_penalty and np.any(np.isfinite(self.bound)):
            val, dg = _phr(g_scc, pen.lam_scc, pen.rho, self.wq)
            penalty += val
            dS = dS - dg
        # pressure bounds
        dx = np.zeros_like(traj.x) if traj is not None else None
        g_p = np.full((len(self.p_rows), t.size), -np.inf)
        for i, (col, model, pmin, act) in enumerate(self.p_rows):
            pr = model.pressure(traj.x[:, col]) / net.pressure_unit
            g_p[i] = np.where(act, pmin - pr, -np.inf)
            if pen is not None:
                val, dg = _phr(g_p[i], pen.lam_p[i], pen.rho, self.wq)
                penalty += val
                dx[:, col] -= dg * model.dpressure(traj.x[:, col]) / net.pressure_unit
        if prob.supply_is_control:
            dU[:, iu] += dS * dSdu
        elif not fast:
            dx[:, traj.supply_index()] += dS

        risk = float("nan")
        gj = None
        if self.use_jcc:
            risk = jcc_risk(p, t, S, prob.cc)
            if pen is not None:
                gv = risk - prob.cc.theta
                a = max(0.0, pen.lam_jcc + pen.rho_jcc * gv)
                penalty += (a * a - pen.lam_jcc ** 2) / (2.0 * pen.rho_jcc)
                if need_grad and a > 0.0:
                    gj = a * self._risk_gradient(z, risk)
        cost.penalty = float(penalty)

        grad = None
        if need_grad:
            dUtot = dU.copy()
            if dx is not None and np.any(dx):
                lam = np.zeros(sysm.n_unknowns)
                for n in range(t.size - 1, 0, -1):
                    rhs = dx[n] + (sysm.B.T @ lam if n < t.size - 1 else 0.0)
                    lam = -traj.factors[n].solve(rhs, trans="T")
                    dUtot[n] += sysm.C.T @ lam
            G = np.zeros((len(self.channels), nc))
            for j in range(len(self.channels)):
                np.add.at(G[j], prob.cells, dUtot[:, j])
            grad = (G + greg).ravel()
            if fast:
                grad = grad + Gs.T @ dS
            if gj is not None:
                grad = grad + gj
        return Evaluation(cost, grad, S, g_scc, g_p, risk, traj)

    def _risk_gradient(self, z, r0):
        """One-sided differences of the risk over the cells the supply depends on."""
        prob = self.prob
        nc = prob.controls.n_cells
        if prob.supply_is_control:
            j = self.channels.index(prob.net.supply.channel)
            idx = list(range(j * nc, (j + 1) * nc))
        else:
            idx = list(range(len(z)))
        lo, hi = prob.controls.bounds_vectors()

        def probe(i):
            h = 1e-6 * max(1.0, abs(z[i]))
            if z[i] + h > hi[i]:
                h = -h
            zz = np.array(z, float)
            zz[i] += h
            return i, (self.risk(zz) - r0) / h

        g = np.zeros(len(z))
        workers = max(1, int(prob.settings.fd_workers))
        if workers > 1:
            with ThreadPoolExecutor(workers) as ex:
                results = list(ex.map(probe, idx))
        else:
            results = [probe(i) for i in idx]
        for i, v in results:
            g[i] = v
        return g


def _vertex_col(prob, vertex):
    net, sysm = prob.net, prob.system
    for name in net.in_edges(vertex):
        return sysm.base(name, -1), net.edge(name).model
    for name in net.out_edges(vertex):
        return sysm.base(name, 0), net.edge(name).model
    raise KeyError(vertex)


def objective_and_gradient(problem, controls=None, penalty: Optional[PenaltyState] = None,
                           with_jcc: bool = False):
    """Objective and its gradient with respect to the control cell values.

    ``problem`` may also be a scenario (anything with a ``problem()`` method).
    Without ``penalty`` only cost and regularization are differentiated.
    """
    if hasattr(problem, "problem"):
        problem = problem.problem()
    grid = problem.controls if controls is None else controls
    z = grid.to_vector() if hasattr(grid, "to_vector") else np.asarray(grid, float)
    scc_pen = problem.cc.variant == "scc" and not _scc_as_bounds(problem)
    ev = _Evaluator(problem, penalty, with_jcc and problem.cc.variant == "jcc", scc_pen)(z)
    return ev.cost, ev.grad


def check_gradient(problem: ControlProblem, z=None, penalty=None, rel_step=1e-6, cells=None):
    """Adjoint gradient next to central differences; returns (adjoint, fd).

    ``cells`` restricts the comparison to those control-vector components.
    """
    z = problem.controls.to_vector() if z is None else np.asarray(z, float)
    scc_pen = problem.cc.variant == "scc" and not _scc_as_bounds(problem)
    ev = _Evaluator(problem, penalty, False, scc_pen)
    idx = np.arange(z.size) if cells is None else np.asarray(cells, int)
    g = ev(z).grad[idx]
    fd = np.zeros(idx.size)
    for j, i in enumerate(idx):
        h = rel_step * max(1.0, abs(z[i]))
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd[j] = (ev(zp, False).cost.total - ev(zm, False).cost.total) / (2.0 * h)
    return g, fd


# --------------------------------------------------------------------------
# optimization


@dataclass
class OptResult:
    controls: ControlGrid
    cost: CostValue
    supply: np.ndarray
    t: np.ndarray
    trace: list
    converged: bool
    reason: str
    scc_violation: float = 0.0
    pressure_violation: float = 0.0
    risk: float = float("nan")
    elapsed: float = 0.0
    trajectory: object = None

    def trace_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,cost,grad_norm,scc_viol,jcc_risk,round\n")
            for r in self.trace:
                fh.write(f"{r['iter']},{r['cost']:.12g},{r['grad_norm']:.6g},"
                         f"{r['scc_viol']:.6g},{r['jcc_risk']:.6g},{r['round']}\n")

    def controls_csv(self, path):
        chans = self.controls.channels
        names = ["u"] + [c for c in chans if c != "u"] if "u" in chans else chans
        with open(path, "w") as fh:
            fh.write(",".join(["t"] + names) + "\n")
            for k, tk in enumerate(self.controls.cell_times()):
                vals = [f"{self.controls.values[c][k]:.12g}" for c in names]
                fh.write(",".join([f"{tk:.12g}"] + vals) + "\n")

    def summary(self) -> dict:
        return {"objective": self.cost.to_dict(), "converged": self.converged,
                "reason": self.reason, "scc_violation": self.scc_violation,
                "pressure_violation": self.pressure_violation,
                "jcc_risk": None if math.isnan(self.risk) else self.risk,
                "iterations": len(self.trace), "elapsed_s": self.elapsed}


def _scc_as_bounds(prob: ControlProblem) -> bool:
    return (prob.cc.variant == "scc" and prob.supply_is_control
            and prob.settings.scc_mode == "auto")


def _scc_control_bounds(prob: ControlProblem) -> ControlGrid:
    """Fold a quantile bound on a converted supply into control lower bounds per cell."""
    b = scc_bound(prob.process, prob.cc, prob.t)
    s = prob.net.supply
    need = np.where(np.isfinite(b), s.withdrawal(np.where(np.isfinite(b), b, 0.0)), -np.inf)
    lo = np.full(prob.controls.n_cells, -np.inf)
    np.maximum.at(lo, prob.cells, need)
    grid = prob.controls
    lower = dict(grid.lower)
    lower[s.channel] = np.maximum(lo, np.broadcast_to(grid.lower[s.channel], lo.shape))
    return ControlGrid(grid.t0, grid.cell, grid.values, lower, dict(grid.upper))


def _bounds(grid: ControlGrid):
    lo, hi = [], []
    n = grid.n_cells
    for ch in grid.channels:
        lo.append(np.broadcast_to(np.asarray(grid.lower[ch], float), (n,)))
        hi.append(np.broadcast_to(np.asarray(grid.upper[ch], float), (n,)))
    return np.concatenate(lo), np.concatenate(hi)


def _pg(fun, z, lo, hi, s: OptimizerSettings, trace, rnd, info):
    """Projected gradient with BB step lengths and Armijo backtracking."""
    proj = lambda v: np.clip(v, lo, hi)
    z = proj(z)
    ev = fun(z, True)
    f, g = ev.cost.total, ev.grad
    gmax = float(np.max(np.abs(g))) if g.size else 0.0
    alpha = 1.0 / max(gmax, 1e-12)
    for it in range(s.max_inner):
        pgn = float(np.max(np.abs(proj(z - g) - z), initial=0.0))
        info(trace, ev, pgn, rnd)
        if pgn <= s.gtol * (1.0 + abs(f)):
            return z, ev, True
        d = proj(z - alpha * g) - z
        slope = float(g @ d)
        if slope >= 0:
            d = proj(z - g) - z
            slope = float(g @ d)
        step = 1.0
        for _ in range(s.max_backtracks + 1):
            zn = z + step * d
            try:
                en = fun(zn, False)
            except StepFailure:
                # a trial point the state solver cannot handle counts as a rejected step
                step *= 0.5
                continue
            if en.cost.total <= f + s.armijo * step * slope:
                break
            step *= 0.5
        else:
            return z, ev, False
        en = fun(zn, True)
        sv, yv = zn - z, en.grad - g
        sy = float(sv @ yv)
        alpha = float(sv @ sv) / sy if sy > 0 else alpha * 10.0
        alpha = min(max(alpha, 1e-14), 1e14)
        z, ev, f, g = zn, en, en.cost.total, en.grad
    return z, ev, False


def _lbfgsb(fun, z, lo, hi, s: OptimizerSettings, trace, rnd, info):
    from scipy.optimize import minimize

    cache = {}

    def fg(v):
        ev = fun(v, True)
        cache["ev"] = ev
        pgn = float(np.max(np.abs(np.clip(v - ev.grad, lo, hi) - v), initial=0.0))
        info(trace, ev, pgn, rnd)
        return ev.cost.total, ev.grad

    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in zip(lo, hi)]
    res = minimize(fg, np.clip(z, lo, hi), jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": s.max_inner, "gtol": s.gtol, "ftol": 1e-15})
    ev = fun(res.x, True)
    return res.x, ev, bool(res.success)


def _state_sensitivities(prob: ControlProblem, traj, cols) -> np.ndarray:
    """d x[:, cols] / d z for all levels, by forward propagation through the factors."""
    sysm = prob.system
    nc = prob.controls.n_cells
    nch = len(sysm.channels)
    xs = np.zeros((sysm.n_unknowns, nc * nch))
    out = np.zeros((prob.n_levels, len(cols), nc * nch))
    for n in range(1, prob.n_levels):
        r = sysm.B @ xs
        for j in range(nch):
            r[:, j * nc + prob.cells[n]] += sysm.C[:, j]
        xs = -traj.factors[n].solve(r)
        out[n] = xs[cols]
    return out


def _optimize_slsqp(problem: ControlProblem, z0, lo, hi, progress, start) -> OptResult:
    """Sequential quadratic programming with explicit state constraints.

    Pressure bounds and a quantile bound on a state supply become inequality
    constraints with exact Jacobians; the joint risk is one scalar constraint
    whose gradient is finite-differenced.
    """
    from scipy.optimize import minimize

    s = problem.settings
    cc = problem.cc
    ev = _Evaluator(problem, None, False, False, fast=s.linear_fast_path)
    use_jcc = cc.variant == "jcc"
    scc_state = cc.variant == "scc" and not _scc_as_bounds(problem)
    sup_col = None
    if not problem.supply_is_control:
        e = problem.net.supply_edge()
        sup_col = problem.system.base(e.name, -1) + e.model.components.index(
            problem.net.supply.component)
    cols = [c for c, _, _, _ in ev.p_rows] + ([sup_col] if scc_state else [])
    need_state = bool(cols)
    cache = {}

    if ev.fast:
        # affine supply map: the quantile constraint is linear in z
        s0, Gs = ev.response()
        act = np.isfinite(ev.bound)
        cols, need_state = [], False
        if scc_state:
            constraints_lin = {"type": "ineq", "fun": lambda z: (s0 + Gs @ z - ev.bound)[act],
                               "jac": lambda z: Gs[act]}

    def state(z):
        key = np.asarray(z, float).tobytes()
        if cache.get("key") != key:
            traj = simulate(problem.net, problem.x0, ev.levels(z), problem.T, problem.dt,
                            problem.t0, keep_factors=True, system=problem.system)
            sens = _state_sensitivities(problem, traj, cols)
            cache.update(key=key, traj=traj, sens=sens)
        return cache["traj"], cache["sens"]

    def cons_fun(z):
        traj, _ = state(z)
        vals = []
        for col, model, pmin, act in ev.p_rows:
            pr = model.pressure(traj.x[:, col]) / problem.net.pressure_unit
            vals.append((pr - pmin)[act])
        if scc_state:
            act = np.isfinite(ev.bound)
            vals.append((traj.x[:, sup_col] - ev.bound)[act])
        return np.concatenate(vals) if vals else np.zeros(0)

    def cons_jac(z):
        traj, sens = state(z)
        rows = []
        for i, (col, model, pmin, act) in enumerate(ev.p_rows):
            dp = model.dpressure(traj.x[:, col]) / problem.net.pressure_unit
            rows.append((dp[:, None] * sens[:, i, :])[act])
        if scc_state:
            act = np.isfinite(ev.bound)
            rows.append(sens[:, -1, :][act])
        return np.vstack(rows) if rows else np.zeros((0, z0.size))

    constraints = []
    if ev.fast and scc_state:
        constraints.append(constraints_lin)
    if need_state:
        constraints.append({"type": "ineq", "fun": cons_fun, "jac": cons_jac})
    if use_jcc:
        constraints.append({"type": "ineq", "fun": lambda z: cc.theta - ev.risk(z),
                            "jac": lambda z: -ev._risk_gradient(z, ev.risk(z))})

    trace = []
    f_scale = max(1.0, abs(ev(z0, False).cost.total))

    def fg(z):
        e = ev(z, True)
        return e.cost.total / f_scale, e.grad / f_scale

    def callback(z):
        e = ev(z, False)
        g = np.concatenate([np.atleast_1d(c["fun"](z)) for c in constraints
                            if c["fun"] is not None]) if constraints else np.zeros(0)
        rec = {"iter": len(trace), "cost": e.cost.total,
               "grad_norm": float("nan"), "scc_viol": float(max(0.0, -g.min(initial=0.0))),
               "jcc_risk": ev.risk(z) if use_jcc else float("nan"), "round": 0}
        trace.append(rec)
        if progress:
            progress(rec)

    bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
              for a, b in zip(lo, hi)]
    res = minimize(fg, np.clip(z0, lo, hi), jac=True, method="SLSQP", bounds=bounds,
                   constraints=constraints, callback=callback,
                   options={"maxiter": s.max_inner, "ftol": s.gtol * 1e-3})
    z = np.clip(res.x, lo, hi)
    final = _Evaluator(problem, None, use_jcc, False)(z, False)
    viol = max(final.scc_violation if cc.variant == "scc" else 0.0, final.pressure_violation)
    jviol = max(final.risk - cc.theta, 0.0) if use_jcc else 0.0
    feasible = viol <= s.feas_tol and jviol <= s.jcc_tol
    reason = ("feasible" if feasible else "infeasible") + f" ({res.message})"
    return OptResult(controls=problem.controls.with_vector(z), cost=final.cost,
                     supply=final.supply, t=problem.t, trace=trace,
                     converged=bool(res.success) and feasible, reason=reason,
                     scc_violation=final.scc_violation if cc.variant == "scc" else 0.0,
                     pressure_violation=final.pressure_violation, risk=final.risk,
                     elapsed=time.perf_counter() - start, trajectory=final.trajectory)


def optimize(problem, progress=None) -> OptResult:
    if hasattr(problem, "problem"):
        problem = problem.problem()
    start = time.perf_counter()
    s = problem.settings
    cc = problem.cc
    grid = problem.controls.project()
    z0 = grid.to_vector()
    if cc.variant == "jcc" and s.jcc_warm_start:
        warm = optimize(problem.with_(cc=replace(cc, variant="scc")))
        z0 = warm.controls.to_vector()
        log.info("jcc warm start from scc solution, risk %.4g",
                 jcc_risk(problem.process, problem.t, warm.supply, cc))
    bgrid = _scc_control_bounds(problem) if _scc_as_bounds(problem) else grid
    lo, hi = _bounds(bgrid)
    if s.method == "slsqp":
        return _optimize_slsqp(problem, z0, lo, hi, progress, start)
    use_jcc = cc.variant == "jcc"
    scc_pen = cc.variant == "scc" and not _scc_as_bounds(problem)
    n_lev = problem.n_levels
    pen = PenaltyState(rho=s.rho0, lam_scc=np.zeros(n_lev),
                       lam_p=np.zeros((len(problem.pressure_bounds), n_lev)),
                       rho_jcc=s.rho_jcc0)
    trace = []
    counter = [0]

    def info(tr, ev, pgn, rnd):
        tr.append({"iter": counter[0], "cost": ev.cost.total, "grad_norm": pgn,
                   "scc_viol": max(ev.scc_violation, ev.pressure_violation),
                   "jcc_risk": ev.risk, "round": rnd})
        counter[0] += 1
        if progress:
            progress(tr[-1])

    inner = _lbfgsb if s.method == "lbfgsb" else _pg
    z = z0
    has_cons = scc_pen or bool(problem.pressure_bounds) or use_jcc
    converged, reason = False, "max outer rounds"
    prev_viol = math.inf
    for rnd in range(s.max_outer if has_cons else 1):
        ev_fun = _Evaluator(problem, pen, use_jcc, scc_pen, fast=s.linear_fast_path)
        z, ev, ok = inner(ev_fun, z, lo, hi, s, trace, rnd, info)
        viol = max(ev.scc_violation, ev.pressure_violation)
        jviol = max(ev.risk - cc.theta, 0.0) if use_jcc else 0.0
        feasible = viol <= s.feas_tol and jviol <= s.jcc_tol
        log.info("round %d: cost %.8g viol %.3g risk %.5g inner %s", rnd, ev.cost.total, viol,
                 ev.risk, ok)
        if feasible:
            converged, reason = ok, "feasible" if ok else "feasible, inner iteration limit"
            break
        if not has_cons:
            converged, reason = ok, "converged" if ok else "inner iteration limit"
            break
        pen.lam_scc = np.maximum(0.0, pen.lam_scc + pen.rho * np.where(
            np.isfinite(ev.g_scc), ev.g_scc, -np.inf))
        pen.lam_p = np.maximum(0.0, pen.lam_p + pen.rho * np.where(
            np.isfinite(ev.g_p), ev.g_p, -np.inf))
        if viol > 0.25 * prev_viol:
            pen.rho = min(pen.rho * 10.0, s.rho_max)
        prev_viol = viol
        if use_jcc:
            pen.lam_jcc = max(0.0, pen.lam_jcc + pen.rho_jcc * (ev.risk - cc.theta))
            if jviol > s.jcc_tol:
                pen.rho_jcc = min(pen.rho_jcc * 10.0, s.rho_max)
    final = _Evaluator(problem, None, use_jcc, False)(z, False)
    res_grid = problem.controls.with_vector(z)
    return OptResult(controls=res_grid, cost=final.cost, supply=final.supply, t=problem.t,
                     trace=trace, converged=converged, reason=reason,
                     scc_violation=final.scc_violation if cc.variant == "scc" else 0.0,
                     pressure_violation=final.pressure_violation, risk=final.risk,
                     elapsed=time.perf_counter() - start, trajectory=final.trajectory)
