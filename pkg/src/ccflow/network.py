"""Hyperbolic balance laws on directed networks with the implicit box scheme.

All edges are advanced together: one sparse system per time level holds the
box equations of every cell, the boundary conditions at the inflow and
outflow vertex, and the coupling conditions at interior vertices.  Linear
models need a single factorization per run; the gas model is solved by a
damped Newton iteration.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import networkx as nx
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAXIT = 50
NEWTON_HALVINGS = 8

_COMPONENTS = {
    "advection": ("rho",),
    "telegrapher": ("U", "I"),
    "euler": ("rho", "q"),
    "compressor": ("rho", "q"),
}


class NetworkError(ValueError):
    pass


class StepFailure(RuntimeError):
    def __init__(self, msg, level=None, residual=None):
        super().__init__(msg)
        self.level = level
        self.residual = residual


class StateError(StepFailure):
    pass


class ConversionError(ValueError):
    pass


class InverseCFLWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class EdgeModel:
    """Flux, source and pressure law of one edge type.

    ``compressor`` is an algebraic zero-length element carrying gas traces
    (density, mass flux) at its two ends.
    """

    kind: str
    lam: float = 1.0
    s: float = 0.0
    R: float = 0.0
    L: float = 1.0
    C: float = 1.0
    G: float = 0.0
    d: float = 340.0
    beta: float = 1.0
    friction: float = 0.0
    diameter: float = 1.0

    def __post_init__(self):
        if self.kind not in _COMPONENTS:
            raise NetworkError(f"unknown edge model {self.kind!r}")
        if self.kind == "advection" and self.lam == 0:
            raise NetworkError("advection speed must be nonzero")
        if self.kind == "telegrapher":
            if not (self.L > 0 and self.C > 0 and self.R >= 0 and self.G >= 0):
                raise NetworkError("telegrapher needs L, C > 0 and R, G >= 0")
        if self.kind in ("euler", "compressor"):
            if not (self.d > 0 and self.beta >= 1 and self.diameter > 0 and self.friction >= 0):
                raise NetworkError("euler needs d > 0, beta >= 1, diameter > 0, friction >= 0")

    @property
    def components(self) -> tuple:
        return _COMPONENTS[self.kind]

    @property
    def n(self) -> int:
        return len(self.components)

    @property
    def is_gas(self) -> bool:
        return self.kind in ("euler", "compressor")

    # pressure law
    def pressure(self, rho):
        return self.d ** 2 * np.power(rho, self.beta)

    def dpressure(self, rho):
        return self.beta * self.d ** 2 * np.power(rho, self.beta - 1.0)

    def flux(self, Q):
        if self.kind == "advection":
            return self.lam * Q
        if self.kind == "telegrapher":
            return np.stack([Q[:, 1] / self.C, Q[:, 0] / self.L], axis=1)
        rho, q = Q[:, 0], Q[:, 1]
        return np.stack([q, self.pressure(rho) + q * q / rho], axis=1)

    def jac_flux(self, Q):
        m = Q.shape[0]
        if self.kind == "advection":
            return np.full((m, 1, 1), self.lam)
        J = np.zeros((m, 2, 2))
        if self.kind == "telegrapher":
            J[:, 0, 1] = 1.0 / self.C
            J[:, 1, 0] = 1.0 / self.L
            return J
        rho, q = Q[:, 0], Q[:, 1]
        J[:, 0, 1] = 1.0
        J[:, 1, 0] = self.dpressure(rho) - (q / rho) ** 2
        J[:, 1, 1] = 2.0 * q / rho
        return J

    def source(self, Q):
        if self.kind == "advection":
            return self.s * Q
        if self.kind == "telegrapher":
            return np.stack([-self.G / self.C * Q[:, 0], -self.R / self.L * Q[:, 1]], axis=1)
        rho, q = Q[:, 0], Q[:, 1]
        k = self.friction / (2.0 * self.diameter)
        return np.stack([np.zeros_like(q), -k * q * np.abs(q) / rho], axis=1)

    def jac_source(self, Q):
        m = Q.shape[0]
        if self.kind == "advection":
            return np.full((m, 1, 1), self.s)
        J = np.zeros((m, 2, 2))
        if self.kind == "telegrapher":
            J[:, 0, 0] = -self.G / self.C
            J[:, 1, 1] = -self.R / self.L
            return J
        rho, q = Q[:, 0], Q[:, 1]
        k = self.friction / (2.0 * self.diameter)
        J[:, 1, 0] = k * q * np.abs(q) / rho ** 2
        J[:, 1, 1] = -2.0 * k * np.abs(q) / rho
        return J

    def max_speed(self, Q=None) -> float:
        if self.kind == "advection":
            return abs(self.lam)
        if self.kind == "telegrapher":
            return 1.0 / math.sqrt(self.L * self.C)
        if Q is None:
            return self.d
        rho, q = Q[:, 0], Q[:, 1]
        return float(np.max(np.abs(q / rho) + np.sqrt(self.dpressure(rho))))

    def quantity(self, name: str, Qnode):
        """Value and gradient (w.r.t. the node components) of a trace quantity."""
        comps = self.components
        if name in comps:
            g = np.zeros(self.n)
            i = comps.index(name)
            g[i] = 1.0
            return float(Qnode[i]), g
        if name == "p" and self.is_gas:
            g = np.zeros(2)
            g[0] = float(self.dpressure(Qnode[0]))
            return float(self.pressure(Qnode[0])), g
        if name == "flux" and self.kind == "advection":
            return float(self.lam * Qnode[0]), np.array([self.lam])
        raise NetworkError(f"quantity {name!r} not defined for {self.kind} edges")

    def to_dict(self) -> dict:
        keys = {"advection": ("lam", "s"), "telegrapher": ("R", "L", "C", "G"),
                "euler": ("d", "beta", "friction", "diameter"),
                "compressor": ("d", "beta")}[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keys}}

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeModel":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**{k: (v if k == "kind" else float(v)) for k, v in d.items()})


@dataclass(frozen=True)
class Edge:
    name: str
    tail: str
    head: str
    a: float
    b: float
    cells: int
    model: EdgeModel
    control: Optional[str] = None      # lift channel of a compressor edge

    def __post_init__(self):
        if self.model.kind == "compressor":
            if not self.control:
                raise NetworkError(f"compressor edge {self.name} needs a control channel")
            return
        if not self.b > self.a:
            raise NetworkError(f"edge {self.name}: need b > a")
        if self.cells < 1:
            raise NetworkError(f"edge {self.name}: need at least one cell")

    @property
    def n_nodes(self) -> int:
        return 2 if self.model.kind == "compressor" else self.cells + 1

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.cells if self.model.kind != "compressor" else 0.0

    @property
    def x(self) -> np.ndarray:
        if self.model.kind == "compressor":
            return np.array([self.a, self.a])
        return self.a + self.dx * np.arange(self.cells + 1)


@dataclass(frozen=True)
class BoundarySpec:
    """Boundary condition ``quantity(trace) = value + scale * control + func(t)``."""

    quantity: str
    value: float = 0.0
    control: Optional[str] = None
    scale: float = 1.0
    func: Optional[Callable] = None


@dataclass(frozen=True)
class CouplingSpec:
    """Vertex coupling.

    ``telegrapher_kirchhoff`` / ``gas_kirchhoff``: equal potentials (voltage or
    pressure) and conservation of current or mass flux.  ``gas_withdrawal``
    subtracts ``scale * control`` from the balance.  ``gas_compressor`` joins
    one incoming and one outgoing edge with equal flux and a pressure lift of
    ``control`` pressure units.  ``advection_junction`` conserves the flux and
    distributes equal densities to the outgoing edges.
    """

    kind: str
    control: Optional[str] = None
    scale: float = 1.0

    KINDS = ("telegrapher_kirchhoff", "gas_kirchhoff", "gas_compressor", "gas_withdrawal",
             "advection_junction")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise NetworkError(f"unknown coupling {self.kind!r}")
        if self.kind in ("gas_compressor", "gas_withdrawal") and not self.control:
            raise NetworkError(f"{self.kind} coupling needs a control channel")


@dataclass(frozen=True)
class SupplySpec:
    """How the supply at the demand vertex is read.

    ``trace``: component ``component`` at the end of the edge entering the
    outflow vertex.  ``conversion``: the root S of
    ``u = a0 + a1 S + a2 S^2`` for control channel ``channel``.
    """

    kind: str = "trace"
    component: str = "rho"
    channel: str = "u"
    a0: float = 0.0
    a1: float = 1.0
    a2: float = 0.0

    def __post_init__(self):
        if self.kind not in ("trace", "conversion"):
            raise NetworkError(f"unknown supply kind {self.kind!r}")

    def convert(self, u):
        """Supply S from withdrawal u, and dS/du."""
        u = np.asarray(u, dtype=float)
        du = u - self.a0
        if self.a2 == 0.0:
            if self.a1 == 0.0:
                raise ConversionError("degenerate conversion with a1 = a2 = 0")
            S = du / self.a1
            dS = np.full_like(S, 1.0 / self.a1)
        else:
            disc = self.a1 ** 2 + 4.0 * self.a2 * du
            if np.any(disc < 0):
                raise ConversionError("conversion quadratic has no real root")
            root = np.sqrt(disc)
            denom = self.a1 + root
            if np.any(denom == 0):
                raise ConversionError("conversion quadratic is degenerate")
            S = 2.0 * du / denom
            dS = 1.0 / root
        if np.any(S < -1e-12):
            raise ConversionError("conversion quadratic has no nonnegative root")
        return S, dS

    def withdrawal(self, S):
        S = np.asarray(S, dtype=float)
        return self.a0 + self.a1 * S + self.a2 * S * S


@dataclass
class Network:
    edges: tuple
    left_bc: BoundarySpec
    right_bc: Optional[BoundarySpec] = None
    couplings: dict = field(default_factory=dict)
    supply: SupplySpec = field(default_factory=SupplySpec)
    pressure_unit: float = 1e5
    reference_density: Optional[float] = None

    def __post_init__(self):
        self.edges = tuple(self.edges)
        names = [e.name for e in self.edges]
        if len(set(names)) != len(names):
            raise NetworkError("edge names must be unique")
        g = nx.MultiDiGraph()
        for e in self.edges:
            g.add_edge(e.tail, e.head, key=e.name)
        if g.number_of_nodes() == 0:
            raise NetworkError("network has no edges")
        if not nx.is_weakly_connected(g):
            raise NetworkError("network graph must be connected")
        sources = [v for v in g.nodes if g.in_degree(v) == 0]
        sinks = [v for v in g.nodes if g.out_degree(v) == 0]
        if len(sources) != 1 or len(sinks) != 1:
            raise NetworkError("need exactly one inflow and one outflow vertex")
        self._graph = g
        self.v_in, self.v_out = sources[0], sinks[0]
        if g.out_degree(self.v_in) != 1 or g.in_degree(self.v_out) != 1:
            raise NetworkError("inflow and outflow vertices must have a single edge")
        for v in self.interior_vertices:
            if v not in self.couplings:
                self.couplings[v] = CouplingSpec(self._default_coupling(v))
        unknown = set(self.couplings) - set(self.interior_vertices)
        if unknown:
            raise NetworkError(f"couplings given for non-interior vertices {sorted(unknown)}")

    def _default_coupling(self, v) -> str:
        kinds = {self.edge(n).model.kind for n in self.in_edges(v) + self.out_edges(v)}
        if kinds <= {"euler", "compressor"}:
            return "gas_kirchhoff"
        if kinds == {"telegrapher"}:
            return "telegrapher_kirchhoff"
        if kinds == {"advection"}:
            return "advection_junction"
        raise NetworkError(f"vertex {v}: mixed edge models need an explicit coupling")

    @property
    def vertices(self) -> list:
        return list(self._graph.nodes)

    @property
    def interior_vertices(self) -> list:
        return [v for v in self._graph.nodes if v not in (self.v_in, self.v_out)]

    def edge(self, name) -> Edge:
        for e in self.edges:
            if e.name == name:
                return e
        raise KeyError(name)

    def in_edges(self, v) -> list:
        return [e.name for e in self.edges if e.head == v]

    def out_edges(self, v) -> list:
        return [e.name for e in self.edges if e.tail == v]

    @property
    def is_gas(self) -> bool:
        return any(e.model.is_gas for e in self.edges)

    @property
    def is_linear(self) -> bool:
        return not self.is_gas

    @property
    def channels(self) -> list:
        ch = set()
        for bc in (self.left_bc, self.right_bc):
            if bc is not None and bc.control:
                ch.add(bc.control)
        for c in self.couplings.values():
            if c.control:
                ch.add(c.control)
        for e in self.edges:
            if e.control:
                ch.add(e.control)
        if self.supply.kind == "conversion":
            ch.add(self.supply.channel)
        return sorted(ch)

    def transport_delay(self) -> float:
        """Shortest travel time from the inflow to the outflow vertex."""
        g = nx.DiGraph()
        for e in self.edges:
            w = 0.0 if e.model.kind == "compressor" else (e.b - e.a) / e.model.max_speed()
            if g.has_edge(e.tail, e.head):
                w = min(w, g[e.tail][e.head]["w"])
            g.add_edge(e.tail, e.head, w=w)
        return float(nx.shortest_path_length(g, self.v_in, self.v_out, weight="w"))

    def supply_edge(self) -> Edge:
        return self.edge(self.in_edges(self.v_out)[0])


# --------------------------------------------------------------------------
# discrete system


@dataclass
class _Row:
    terms: list            # (column base, model, quantity, sign)
    value: float = 0.0
    control: Optional[str] = None
    coef: float = 0.0
    func: Optional[Callable] = None
    scale: float = 1.0
    label: str = ""


class _Pattern:
    """Fixed sparsity pattern; maps COO-ordered values to CSC data."""

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        key = cols * shape[0] + rows
        uniq, self.pos = np.unique(key, return_inverse=True)
        self.indices = (uniq % shape[0]).astype(np.int32)
        ucols = uniq // shape[0]
        self.indptr = np.searchsorted(ucols, np.arange(shape[1] + 1)).astype(np.int32)
        self.nnz = uniq.size
        self.shape = shape

    def matrix(self, vals) -> sp.csc_matrix:
        data = np.bincount(self.pos, weights=vals, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


class IboxSystem:
    """Residual and Jacobian of one implicit box step for a whole network.

    Unknowns are the node values of every edge, stored edge by edge and node
    by node.  Rows are the box equations of all cells followed by the
    boundary and coupling rows.  Gas rows are scaled by reference density,
    flux and pressure so that the Newton tolerance is a relative one.
    """

    def __init__(self, net: Network, dt: float, steady: bool = False,
                 rho_ref: Optional[float] = None):
        if not dt > 0:
            raise NetworkError("dt must be positive")
        self.net = net
        self.dt = float(dt)
        self.steady = steady
        self.mass = 0.0 if steady else 1.0
        self.channels = net.channels
        self.rho_ref = float(rho_ref or net.reference_density or 1.0)
        self.offsets = {}
        off = 0
        for e in net.edges:
            self.offsets[e.name] = off
            off += e.n_nodes * e.model.n
        self.n_unknowns = off
        self._build_box()
        self._build_closure()
        if self.n_rows != self.n_unknowns:
            raise NetworkError(f"closure mismatch: {self.n_rows} equations for "
                               f"{self.n_unknowns} unknowns")
        self._build_static()
        self._lu = None
        self._f0 = None

    # -- layout helpers ----------------------------------------------------

    def base(self, edge_name: str, node: int) -> int:
        e = self.net.edge(edge_name)
        if node < 0:
            node += e.n_nodes
        return self.offsets[edge_name] + node * e.model.n

    def edge_block(self, x, edge_name):
        e = self.net.edge(edge_name)
        off = self.offsets[edge_name]
        return x[..., off:off + e.n_nodes * e.model.n].reshape(x.shape[:-1] + (e.n_nodes, e.model.n))

    def _qty_scale(self, model: EdgeModel, qty: str) -> float:
        if not model.is_gas:
            return 1.0
        if qty == "p":
            return 1.0 / (model.d ** 2 * self.rho_ref ** model.beta)
        if qty == "q":
            return 1.0 / (self.rho_ref * model.d)
        return 1.0 / self.rho_ref

    # -- box rows ----------------------------------------------------------

    def _build_box(self):
        groups = {}
        row = 0
        for e in self.net.edges:
            m = e.model
            if m.kind == "compressor":
                continue
            n, N = m.n, e.cells
            off = self.offsets[e.name]
            g = groups.setdefault(m, {"nodes": [], "cl": [], "cr": [], "coef": [], "rows": [],
                                      "scale": [], "count": 0})
            first = g["count"]
            g["nodes"].append(off + np.arange(N + 1)[:, None] * n + np.arange(n)[None, :])
            g["cl"].append(first + np.arange(N))
            g["cr"].append(first + np.arange(1, N + 1))
            g["coef"].append(np.full(N, self.dt / e.dx))
            g["rows"].append(row + np.arange(N)[:, None] * n + np.arange(n)[None, :])
            if m.is_gas:
                c = 1.0 + m.d * self.dt / e.dx
                sc = np.array([1.0 / (self.rho_ref * c), 1.0 / (self.rho_ref * m.d * c)])
            else:
                sc = np.ones(n)
            g["scale"].append(np.tile(sc, (N, 1)))
            g["count"] += N + 1
            row += n * N
        self._groups = []
        for m, g in groups.items():
            self._groups.append((m, np.concatenate(g["nodes"]), np.concatenate(g["cl"]),
                                 np.concatenate(g["cr"]), np.concatenate(g["coef"]),
                                 np.concatenate(g["rows"]), np.concatenate(g["scale"])))
        self.n_box = row

    def _box_residual(self, x, x_old, out):
        dt = self.dt
        for m, nodes, cl, cr, coef, rows, scale in self._groups:
            Q = x[nodes]
            f = m.flux(Q)
            s = m.source(Q)
            r = coef[:, None] * (f[cr] - f[cl]) - 0.5 * dt * (s[cr] + s[cl])
            if self.mass:
                Qo = x_old[nodes]
                r += 0.5 * (Q[cr] + Q[cl] - Qo[cr] - Qo[cl])
            out[rows] = r * scale

    def _box_blocks(self, x):
        dt = self.dt
        for m, nodes, cl, cr, coef, rows, scale in self._groups:
            n = m.n
            Q = x[nodes]
            A = m.jac_flux(Q)
            S = 0.5 * dt * m.jac_source(Q)
            eye = 0.5 * self.mass * np.eye(n)
            Lb = eye - coef[:, None, None] * A[cl] - S[cl]
            Rb = eye + coef[:, None, None] * A[cr] - S[cr]
            yield m, nodes, cl, cr, rows, scale, Lb, Rb

    def _box_jac(self, x):
        """COO triplets of the box rows."""
        R, Cc, V = [], [], []
        for m, nodes, cl, cr, rows, scale, Lb, Rb in self._box_blocks(x):
            rr = np.broadcast_to(rows[:, :, None], Lb.shape)
            R += [rr.ravel(), rr.ravel()]
            Cc += [np.broadcast_to(nodes[cl][:, None, :], Lb.shape).ravel(),
                   np.broadcast_to(nodes[cr][:, None, :], Rb.shape).ravel()]
            V += [(Lb * scale[:, :, None]).ravel(), (Rb * scale[:, :, None]).ravel()]
        if not R:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(R), np.concatenate(Cc), np.concatenate(V)

    def _box_jac_values(self, x):
        V = []
        for m, nodes, cl, cr, rows, scale, Lb, Rb in self._box_blocks(x):
            V += [(Lb * scale[:, :, None]).ravel(), (Rb * scale[:, :, None]).ravel()]
        return np.concatenate(V) if V else np.zeros(0)

    # -- closure rows ------------------------------------------------------

    def _trace(self, edge_name, at_head: bool):
        e = self.net.edge(edge_name)
        return self.base(edge_name, -1 if at_head else 0), e.model

    def _build_closure(self):
        net = self.net
        rows = []

        def add(terms, label, value=0.0, control=None, coef=0.0, func=None):
            rows.append(_Row(terms, value, control, coef, func,
                             self._qty_scale(terms[0][1], terms[0][2]), label))

        bc = net.left_bc
        col, model = self._trace(net.out_edges(net.v_in)[0], at_head=False)
        add([(col, model, bc.quantity, 1.0)], f"bc:{net.v_in}", bc.value, bc.control, bc.scale,
            bc.func)
        if net.right_bc is not None:
            bc = net.right_bc
            col, model = self._trace(net.in_edges(net.v_out)[0], at_head=True)
            add([(col, model, bc.quantity, 1.0)], f"bc:{net.v_out}", bc.value, bc.control,
                bc.scale, bc.func)

        for e in net.edges:
            if e.model.kind != "compressor":
                continue
            ca, cb = self.base(e.name, 0), self.base(e.name, 1)
            add([(ca, e.model, "q", 1.0), (cb, e.model, "q", -1.0)], f"compressor:{e.name}:flux")
            add([(cb, e.model, "p", 1.0), (ca, e.model, "p", -1.0)], f"compressor:{e.name}:lift",
                0.0, e.control, net.pressure_unit)

        for v in net.interior_vertices:
            spec = net.couplings[v]
            ins = [self._trace(n, True) for n in net.in_edges(v)]
            outs = [self._trace(n, False) for n in net.out_edges(v)]
            k = spec.kind
            if k in ("telegrapher_kirchhoff", "gas_kirchhoff", "gas_withdrawal"):
                pot, flow = ("U", "I") if k == "telegrapher_kirchhoff" else ("p", "q")
                traces = ins + outs
                c0, m0 = traces[0]
                for ci, mi in traces[1:]:
                    add([(c0, m0, pot, 1.0), (ci, mi, pot, -1.0)], f"{v}:{pot}")
                terms = [(c, m, flow, 1.0) for c, m in ins] + [(c, m, flow, -1.0) for c, m in outs]
                if k == "gas_withdrawal":
                    add(terms, f"{v}:{flow}", 0.0, spec.control, spec.scale)
                else:
                    add(terms, f"{v}:{flow}")
            elif k == "gas_compressor":
                if len(ins) != 1 or len(outs) != 1:
                    raise NetworkError(f"compressor vertex {v} needs one incoming and one outgoing edge")
                (ci, mi), (co, mo) = ins[0], outs[0]
                add([(ci, mi, "q", 1.0), (co, mo, "q", -1.0)], f"{v}:q")
                add([(co, mo, "p", 1.0), (ci, mi, "p", -1.0)], f"{v}:lift", 0.0, spec.control,
                    spec.scale * net.pressure_unit)
            elif k == "advection_junction":
                terms = [(c, m, "flux", 1.0) for c, m in ins] + [(c, m, "flux", -1.0) for c, m in outs]
                add(terms, f"{v}:flux")
                c0, m0 = outs[0]
                for ci, mi in outs[1:]:
                    add([(c0, m0, "rho", 1.0), (ci, mi, "rho", -1.0)], f"{v}:rho")

        # split every row into a constant linear part and pressure-law terms
        lr, lc, lv, pr, pc, pv, pm = [], [], [], [], [], [], []
        probe = None
        for k, row in enumerate(rows):
            r = self.n_box + k
            for col, model, qty, sign in row.terms:
                if qty == "p" and model.is_gas:
                    pr.append(r)
                    pc.append(col)
                    pv.append(sign * row.scale)
                    pm.append((model.d ** 2, model.beta))
                    continue
                if probe is None or probe.size != model.n:
                    probe = np.ones(model.n)
                _, g = model.quantity(qty, probe)
                for a in range(model.n):
                    if g[a] != 0.0:
                        lr.append(r)
                        lc.append(col + a)
                        lv.append(sign * g[a] * row.scale)
        self._rows = rows
        self.n_rows = self.n_box + len(rows)
        self._lin = (np.asarray(lr, int), np.asarray(lc, int), np.asarray(lv, float))
        self._plaw = (np.asarray(pr, int), np.asarray(pc, int), np.asarray(pv, float),
                      np.asarray([a for a, _ in pm], float), np.asarray([b for _, b in pm], float))
        self._Lc = sp.csr_matrix((self._lin[2], (self._lin[0] - self.n_box, self._lin[1])),
                                 shape=(len(rows), self.n_unknowns))
        self._rhs_value = np.array([r.value * r.scale for r in rows])
        self._rhs_scale = np.array([r.scale for r in rows])
        self._func_rows = [(k, r) for k, r in enumerate(rows) if r.func is not None]

    def _closure_residual(self, x, ctrl, t, out):
        nb = self.n_box
        res = self._Lc @ x - self._rhs_value
        pr, pc, pv, d2, beta = self._plaw
        if pr.size:
            np.add.at(res, pr - nb, pv * d2 * np.power(x[pc], beta))
        if len(self.channels):
            res += self.C[nb:] @ np.asarray(ctrl, float)
        for k, r in self._func_rows:
            res[k] -= float(r.func(t)) * r.scale
        out[nb:] = res

    def _closure_jac(self, x):
        lr, lc, lv = self._lin
        pr, pc, pv, d2, beta = self._plaw
        dp = pv * beta * d2 * np.power(x[pc], beta - 1.0) if pr.size else np.zeros(0)
        return (np.concatenate([lr, pr]), np.concatenate([lc, pc]), np.concatenate([lv, dp]))

    def _build_static(self):
        # d F / d x_old: only the box rows see the previous level
        rows, cols, vals = [], [], []
        if self.mass:
            for m, nodes, cl, cr, coef, rws, scale in self._groups:
                for side in (cl, cr):
                    rows.append(rws.ravel())
                    cols.append(nodes[side].ravel())
                    vals.append(-0.5 * scale.ravel())
        if rows:
            rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        self.B = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_rows, self.n_unknowns))
        C = np.zeros((self.n_rows, len(self.channels)))
        for k, row in enumerate(self._rows):
            if row.control is not None:
                C[self.n_box + k, self.channels.index(row.control)] = -row.coef * row.scale
        self.C = C
        br, bc, _ = self._box_jac(np.ones(self.n_unknowns))
        cr, cc, _ = self._closure_jac(np.ones(self.n_unknowns))
        self._pattern = _Pattern(np.concatenate([br, cr]), np.concatenate([bc, cc]),
                                 (self.n_rows, self.n_unknowns))

    # -- public evaluation -------------------------------------------------

    def residual(self, x, x_old, ctrl, t) -> np.ndarray:
        out = np.empty(self.n_rows)
        self._box_residual(x, x_old, out)
        self._closure_residual(x, ctrl, t, out)
        return out

    def jacobian(self, x, ctrl=None, t=None) -> sp.csc_matrix:
        bv = self._box_jac_values(x)
        _, _, cv = self._closure_jac(x)
        return self._pattern.matrix(np.concatenate([bv, cv]))

    def closure_residuals(self, x, ctrl, t) -> dict:
        """Unscaled residual of every boundary and coupling row, by label."""
        out = np.empty(self.n_rows)
        self._closure_residual(x, ctrl, t, out)
        return {r.label: out[self.n_box + k] / r.scale for k, r in enumerate(self._rows)}

    def factor(self, x, ctrl=None, t=None):
        if self.net.is_linear:
            if self._lu is None:
                self._lu = splu(self.jacobian(x))
            return self._lu
        return splu(self.jacobian(x))

    def _check_density(self, x):
        for m, nodes, *_ in self._groups:
            if m.is_gas and np.any(x[nodes[:, 0]] <= 0):
                return False
        return True

    def _affine_part(self, t):
        """Residual at x = x_old = 0 and zero controls (linear models only)."""
        if self._f0 is None or self._func_rows:
            z = np.zeros(self.n_unknowns)
            self._f0 = self.residual(z, z, np.zeros(len(self.channels)), t)
        return self._f0

    def solve(self, x_old, ctrl, t, guess=None, level=None, final_factor=True):
        """Solve one level; returns (x, iterations, factorization).

        With ``final_factor`` the factorization is taken at the converged
        state, as the adjoint needs; otherwise it is the last Newton one.
        """
        ctrl = np.asarray(ctrl, dtype=float)
        if self.net.is_linear:
            # F = J x + B x_old + C u + f0(t) with constant J, B, C
            lu = self.factor(x_old)
            rhs = self.B @ x_old + self.C @ ctrl + self._affine_part(t)
            return -lu.solve(rhs), 1, lu
        x = np.array(x_old if guess is None else guess, dtype=float)
        F = self.residual(x, x_old, ctrl, t)
        nrm = float(np.max(np.abs(F)))
        it = 0
        lu = None
        while True:
            if nrm <= NEWTON_TOL and it > 0:
                if final_factor:
                    lu = self.factor(x)
                return x, it, lu
            lu = self.factor(x)
            if it >= NEWTON_MAXIT:
                raise StepFailure(f"Newton did not converge at level {level}: residual {nrm:.3e}",
                                  level, nrm)
            dx = lu.solve(-F)
            alpha = 1.0
            accepted = False
            for _ in range(NEWTON_HALVINGS + 1):
                xn = x + alpha * dx
                if self._check_density(xn):
                    Fn = self.residual(xn, x_old, ctrl, t)
                    nn = float(np.max(np.abs(Fn)))
                    accepted = True
                    if nn < nrm or nn <= NEWTON_TOL:
                        break
                alpha *= 0.5
            if not accepted:
                raise StateError(f"density lost positivity at level {level}", level, nrm)
            x, F, nrm = xn, Fn, nn
            it += 1


# --------------------------------------------------------------------------
# states and trajectories


@dataclass
class GridState:
    system: IboxSystem
    x: np.ndarray
    t: float

    def edge(self, name) -> np.ndarray:
        return self.system.edge_block(self.x, name)


def initial_state(system: IboxSystem, ic: dict) -> np.ndarray:
    """Pointwise sampling of the initial data.

    ``ic`` maps edge names to a callable of x returning the component values,
    or to a constant sequence of component values.
    """
    x = np.zeros(system.n_unknowns)
    for e in system.net.edges:
        spec = ic.get(e.name, ic.get("*"))
        if spec is None:
            raise NetworkError(f"no initial data for edge {e.name}")
        xs = e.x
        if callable(spec):
            vals = np.asarray([np.atleast_1d(spec(xi)) for xi in xs], float)
        else:
            vals = np.tile(np.atleast_1d(np.asarray(spec, float)), (xs.size, 1))
        if vals.shape != (e.n_nodes, e.model.n):
            raise NetworkError(f"initial data for {e.name} has shape {vals.shape}")
        off = system.offsets[e.name]
        x[off:off + vals.size] = vals.ravel()
    return x


def steady_state(net: Network, ctrl: dict, guess: np.ndarray, dt: float = 1.0,
                 rho_ref: Optional[float] = None) -> np.ndarray:
    """Stationary solution for constant controls (time terms dropped)."""
    sysm = IboxSystem(net, dt, steady=True, rho_ref=rho_ref)
    cv = np.array([float(ctrl.get(ch, 0.0)) for ch in sysm.channels])
    try:
        x, _, _ = sysm.solve(guess, cv, 0.0, guess=guess, level="steady")
        return x
    except StepFailure:
        log.info("direct steady solve failed, falling back to pseudo-time stepping")
    dyn = IboxSystem(net, dt * 10.0, rho_ref=rho_ref)
    x = np.array(guess, float)
    for _ in range(200):
        xn, _, _ = dyn.solve(x, cv, 0.0, level="pseudo")
        if np.max(np.abs(xn - x)) <= 1e-12 * max(1.0, np.max(np.abs(x))):
            break
        x = xn
    x, _, _ = sysm.solve(x, cv, 0.0, guess=x, level="steady")
    return x


@dataclass
class Trajectory:
    system: IboxSystem
    t: np.ndarray
    x: np.ndarray                 # (levels, unknowns)
    controls: np.ndarray          # (levels, channels)
    newton_iters: np.ndarray
    factors: list = field(default_factory=list, repr=False)

    @property
    def net(self) -> Network:
        return self.system.net

    def edge_values(self, name) -> np.ndarray:
        return self.system.edge_block(self.x, name)

    def control(self, channel) -> np.ndarray:
        return self.controls[:, self.system.channels.index(channel)]

    def supply_index(self) -> int:
        e = self.net.supply_edge()
        comp = e.model.components.index(self.net.supply.component)
        return self.system.base(e.name, -1) + comp

    def supply(self) -> np.ndarray:
        s = self.net.supply
        if s.kind == "trace":
            return self.x[:, self.supply_index()].copy()
        return s.convert(self.control(s.channel))[0]

    def vertex_trace(self, vertex):
        """Column base and model of one trace adjacent to ``vertex``."""
        net = self.net
        for name in net.in_edges(vertex):
            return self.system.base(name, -1), net.edge(name).model
        for name in net.out_edges(vertex):
            return self.system.base(name, 0), net.edge(name).model
        raise NetworkError(f"unknown vertex {vertex!r}")

    def pressure(self, vertex) -> np.ndarray:
        col, model = self.vertex_trace(vertex)
        if not model.is_gas:
            raise NetworkError(f"vertex {vertex} is not adjacent to a gas edge")
        return model.pressure(self.x[:, col])

    def closure_residuals(self) -> dict:
        out = {}
        for n in range(1, self.t.size):
            for k, v in self.system.closure_residuals(self.x[n], self.controls[n], self.t[n]).items():
                out[k] = max(out.get(k, 0.0), abs(v))
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["edge", "x", "t", "comp1", "comp2"])
            for e in self.net.edges:
                vals = self.edge_values(e.name)
                for n, tn in enumerate(self.t):
                    for j, xj in enumerate(e.x):
                        row = [e.name, f"{xj:.12g}", f"{tn:.12g}", f"{vals[n, j, 0]:.12g}"]
                        row.append(f"{vals[n, j, 1]:.12g}" if e.model.n > 1 else "")
                        w.writerow(row)

    def summary(self) -> dict:
        net = self.net
        out = {"t": self.t.tolist(), "supply": self.supply().tolist(), "vertices": {}}
        for v in net.vertices:
            col, model = self.vertex_trace(v)
            rec = {}
            if model.is_gas:
                rec["pressure_bar"] = (model.pressure(self.x[:, col]) / net.pressure_unit).tolist()
                flows = [self.x[:, self.system.base(n, -1) + 1] for n in net.in_edges(v)]
                if not flows:
                    flows = [self.x[:, self.system.base(n, 0) + 1] for n in net.out_edges(v)]
                rec["flow"] = np.sum(flows, axis=0).tolist()
            else:
                for i, c in enumerate(model.components):
                    rec[c] = self.x[:, col + i].tolist()
            out["vertices"][v] = rec
        return out

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh)


def check_inverse_cfl(net: Network, dt: float, x=None, system=None) -> list:
    """Edges where max|speed| dt / dx < 1; a warning is emitted for each."""
    bad = []
    for e in net.edges:
        if e.model.kind == "compressor":
            continue
        Q = system.edge_block(x, e.name) if (x is not None and system is not None) else None
        nu = e.model.max_speed(Q) * dt / e.dx
        if nu < 1.0 - 1e-9:
            bad.append((e.name, nu))
            warnings.warn(f"edge {e.name}: inverse CFL number {nu:.3g} < 1", InverseCFLWarning,
                          stacklevel=3)
    return bad


def ibox_step(system: IboxSystem, state: GridState, controls: dict) -> GridState:
    """Advance ``state`` by one time step with the given control values."""
    cv = np.array([float(controls.get(ch, 0.0)) for ch in system.channels])
    t = state.t + system.dt
    x, _, _ = system.solve(state.x, cv, t)
    if not system._check_density(x):
        raise StateError("density lost positivity", None, None)
    return GridState(system, x, t)


def simulate(net: Network, x0: np.ndarray, controls, T: float, dt: float, t0: float = 0.0,
             keep_factors: bool = False, system: Optional[IboxSystem] = None) -> Trajectory:
    """Run the box scheme from ``x0`` over ``[t0, T]``.

    ``controls`` is a ControlGrid or an array ``(levels, channels)`` of
    per-level values in the order of ``system.channels``.
    """
    system = system or IboxSystem(net, dt)
    n_steps = int(round((T - t0) / dt))
    if n_steps < 1 or abs(t0 + n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise NetworkError(f"horizon {T - t0} is not a multiple of dt={dt}")
    t = t0 + dt * np.arange(n_steps + 1)
    if hasattr(controls, "at_levels"):
        U = controls.at_levels(n_steps + 1, dt, system.channels)
    else:
        U = np.asarray(controls, float).reshape(n_steps + 1, len(system.channels))
    check_inverse_cfl(net, dt, x0, system)
    X = np.empty((n_steps + 1, system.n_unknowns))
    X[0] = x0
    iters = np.zeros(n_steps + 1, dtype=int)
    factors = [None] if keep_factors else []
    for n in range(1, n_steps + 1):
        try:
            X[n], iters[n], lu = system.solve(X[n - 1], U[n], t[n], level=n,
                                              final_factor=keep_factors)
        except StepFailure as exc:
            exc.level = n
            raise
        if net.is_gas and not system._check_density(X[n]):
            raise StateError(f"density lost positivity at level {n}", n)
        if keep_factors:
            factors.append(lu)
    return Trajectory(system, t, X, U, iters, factors)
