"""Scenario files: a YAML tree with unit-annotated quantities.

Numbers may be written as plain values, arithmetic expressions such as
``pi/7200``, or a value followed by a unit (``6 h``, ``10 km``, ``49 bar``).
Everything is normalized on load to the scenario's base units: the
simulation time unit declared under ``units.time``, metres and pascal.
Dumping writes the normalized tree, so load -> dump -> load is exact.
"""
from __future__ import annotations

import ast
import copy
import math
import operator
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .controls import ControlGrid
from .cost import CostWeights
from .demand import MeanLevel, OUProcess
from .network import (BoundarySpec, CouplingSpec, Edge, EdgeModel, IboxSystem, Network,
                      NetworkError, SupplySpec, initial_state, steady_state)
from .optimize import ChanceConstraintSpec, ControlProblem, OptimizerSettings, PressureBound

BUNDLED = ("tele", "gtp_s", "gtp_l", "advect_validate", "fptd_benchmark")

TIME_UNITS = {"s": 1.0, "min": 60.0, "h": 3600.0, "d": 86400.0}
LENGTH_UNITS = {"m": 1.0, "km": 1000.0}
PRESSURE_UNITS = {"Pa": 1.0, "kPa": 1e3, "bar": 1e5, "MPa": 1e6}

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg,
        ast.UAdd: operator.pos}
_NAMES = {"pi": math.pi, "e": math.e, "inf": math.inf}


class ScenarioError(ValueError):
    def __init__(self, msg, path="", line=None):
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {msg}")
        self.path = path
        self.line = line


def _arith(node):
    if isinstance(node, ast.Expression):
        return _arith(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id in _NAMES:
        return _NAMES[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.left), _arith(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
        return _OPS[type(node.op)](_arith(node.operand))
    raise ValueError("unsupported expression")


class _Reader:
    """Walks the raw tree and converts quantities, remembering field paths."""

    def __init__(self, raw: dict, lines: dict, time_unit: str):
        self.raw = raw
        self.lines = lines
        self.time_unit = time_unit

    def fail(self, path, msg):
        raise ScenarioError(msg, path, self.lines.get(path))

    def number(self, v, path, dim=None):
        if isinstance(v, bool):
            self.fail(path, "expected a number")
        if isinstance(v, (int, float)):
            return float(v)
        if not isinstance(v, str):
            self.fail(path, f"expected a number, got {type(v).__name__}")
        parts = v.strip().rsplit(None, 1)
        scale = 1.0
        if len(parts) == 2 and not any(c in parts[1] for c in "0123456789+-*/()."):
            expr, unit = parts
            scale = self.unit_scale(unit, path, dim)
        else:
            expr = v
        try:
            return _arith(ast.parse(expr.strip(), mode="eval")) * scale
        except (SyntaxError, ValueError, ZeroDivisionError):
            self.fail(path, f"cannot read {v!r} as a number")

    def unit_scale(self, unit, path, dim):
        tables = {"time": TIME_UNITS, "length": LENGTH_UNITS, "pressure": PRESSURE_UNITS}
        if dim is None:
            self.fail(path, f"unexpected unit {unit!r} on a dimensionless field")
        table = tables[dim]
        if unit not in table:
            self.fail(path, f"unknown {dim} unit {unit!r}")
        if dim == "time":
            if self.time_unit not in TIME_UNITS:
                self.fail(path, f"time unit {unit!r} needs units.time to be a clock unit")
            return table[unit] / TIME_UNITS[self.time_unit]
        return table[unit]

    def integer(self, v, path):
        if isinstance(v, bool) or not isinstance(v, int):
            self.fail(path, "expected an integer")
        return int(v)

    def section(self, d, path, required=(), optional=()):
        if d is None:
            d = {}
        if not isinstance(d, dict):
            self.fail(path, "expected a mapping")
        for k in required:
            if k not in d:
                self.fail(f"{path}.{k}" if path else k, "missing required field")
        extra = set(d) - set(required) - set(optional)
        if extra:
            self.fail(path, f"unknown fields {sorted(extra)}")
        return d


def _line_map(text: str) -> dict:
    """Field path -> 1-based line number from the YAML node tree."""
    out = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if node is None:
            return
        out.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, f"{path}[{i}]")

    walk(root, "")
    return out


# --------------------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    description: str
    units: dict
    time: dict
    network: dict
    initial: dict
    demand: dict
    costs: dict
    chance_constraint: dict
    controls: dict
    optimizer: dict = field(default_factory=dict)
    pressure_bounds: list = field(default_factory=list)
    t_star: Optional[float] = None
    seed: int = 0
    fptd: dict = field(default_factory=dict)
    validate: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, lines: Optional[dict] = None) -> "Scenario":
        raw = copy.deepcopy(raw)
        lines = lines or {}
        R = _Reader(raw, lines, "1")
        top = R.section(raw, "", required=("name", "time", "network", "demand"),
                        optional=("description", "units", "initial", "costs", "chance_constraint",
                                  "controls", "optimizer", "pressure_bounds", "t_star", "seed",
                                  "fptd", "validate", "mc"))
        units = R.section(top.get("units"), "units", optional=("time", "pressure", "length"))
        R.time_unit = str(units.get("time", "1"))
        units = {"time": R.time_unit, "length": "m", "pressure": "Pa"}

        tm = R.section(top["time"], "time", required=("T", "dt"), optional=("t0",))
        time_ = {"t0": R.number(tm.get("t0", 0.0), "time.t0", "time"),
                 "T": R.number(tm["T"], "time.T", "time"),
                 "dt": R.number(tm["dt"], "time.dt", "time")}
        if not time_["T"] > time_["t0"]:
            R.fail("time.T", "horizon must end after it starts")
        if not time_["dt"] > 0:
            R.fail("time.dt", "must be positive")

        network = cls._read_network(R, top["network"])
        demand = cls._read_demand(R, top["demand"])
        initial = cls._read_initial(R, top.get("initial"), network)
        costs = R.section(top.get("costs"), "costs", optional=CostWeights.__dataclass_fields__)
        costs = {k: R.number(v, f"costs.{k}") for k, v in costs.items()}
        try:
            CostWeights(**costs)
        except ValueError as exc:
            R.fail("costs", str(exc))
        cc = cls._read_cc(R, top.get("chance_constraint"))
        controls = cls._read_controls(R, top.get("controls"), time_)
        opt = R.section(top.get("optimizer"), "optimizer",
                        optional=OptimizerSettings.__dataclass_fields__)
        optd = {}
        for k, v in opt.items():
            default = OptimizerSettings.__dataclass_fields__[k].default
            if isinstance(default, bool):
                optd[k] = bool(v)
            elif isinstance(default, int):
                optd[k] = R.integer(v, f"optimizer.{k}")
            elif isinstance(default, str):
                optd[k] = str(v)
            else:
                optd[k] = R.number(v, f"optimizer.{k}")
        pbs = []
        for i, pb in enumerate(top.get("pressure_bounds") or []):
            path = f"pressure_bounds[{i}]"
            pb = R.section(pb, path, required=("vertex", "p_min"), optional=("t_lo", "t_hi"))
            pbs.append({"vertex": str(pb["vertex"]),
                        "p_min": R.number(pb["p_min"], f"{path}.p_min", "pressure"),
                        "t_lo": R.number(pb.get("t_lo", "-inf"), f"{path}.t_lo", "time"),
                        "t_hi": R.number(pb.get("t_hi", "inf"), f"{path}.t_hi", "time")})
        t_star = top.get("t_star")
        t_star = None if t_star is None else R.number(t_star, "t_star", "time")
        seed = R.integer(top.get("seed", 0), "seed")
        fp = R.section(top.get("fptd"), "fptd", optional=("dt", "t_end", "boundary", "mc_paths",
                                                          "mc_scheme"))
        fptd = {}
        if "dt" in fp:
            dts = fp["dt"] if isinstance(fp["dt"], list) else [fp["dt"]]
            fptd["dt"] = [R.number(v, f"fptd.dt[{i}]", "time") for i, v in enumerate(dts)]
        if "t_end" in fp:
            fptd["t_end"] = R.number(fp["t_end"], "fptd.t_end", "time")
        if "boundary" in fp:
            b = R.section(fp["boundary"], "fptd.boundary", required=("kind",),
                          optional=("offset", "slope", "level"))
            if b["kind"] not in ("mean_offset", "constant", "supply"):
                R.fail("fptd.boundary.kind", f"unknown boundary kind {b['kind']!r}")
            fptd["boundary"] = {"kind": b["kind"], **{k: R.number(v, f"fptd.boundary.{k}")
                                                      for k, v in b.items() if k != "kind"}}
        if "mc_paths" in fp:
            fptd["mc_paths"] = R.integer(fp["mc_paths"], "fptd.mc_paths")
        if "mc_scheme" in fp:
            if fp["mc_scheme"] not in ("exact", "euler"):
                R.fail("fptd.mc_scheme", "must be exact or euler")
            fptd["mc_scheme"] = str(fp["mc_scheme"])
        val = R.section(top.get("validate"), "validate",
                        optional=("kind", "threshold", "refinements", "cc_interval"))
        validate = {}
        if "kind" in val:
            if val["kind"] not in ("advection_oracle", "generic"):
                R.fail("validate.kind", f"unknown validation {val['kind']!r}")
            validate["kind"] = val["kind"]
        if "threshold" in val:
            validate["threshold"] = R.number(val["threshold"], "validate.threshold")
        if "refinements" in val:
            validate["refinements"] = R.integer(val["refinements"], "validate.refinements")
        if "cc_interval" in val:
            ci = val["cc_interval"]
            if not isinstance(ci, list) or len(ci) != 2:
                R.fail("validate.cc_interval", "expected [t_lo, t_hi]")
            validate["cc_interval"] = [R.number(v, f"validate.cc_interval[{i}]", "time")
                                       for i, v in enumerate(ci)]
        mc = R.section(top.get("mc"), "mc", optional=("paths", "dt"))
        mcd = {}
        if "paths" in mc:
            mcd["paths"] = R.integer(mc["paths"], "mc.paths")
        if "dt" in mc:
            mcd["dt"] = R.number(mc["dt"], "mc.dt", "time")
        scn = cls(name=str(top["name"]), description=str(top.get("description", "")),
                  units=units, time=time_, network=network, initial=initial, demand=demand,
                  costs=costs, chance_constraint=cc, controls=controls, optimizer=optd,
                  pressure_bounds=pbs, t_star=t_star, seed=seed, fptd=fptd, validate=validate,
                  mc=mcd)
        try:
            net = scn.build_network()
        except NetworkError as exc:
            R.fail("network", str(exc))
        for i, pb in enumerate(pbs):
            if pb["vertex"] not in net.vertices:
                R.fail(f"pressure_bounds[{i}].vertex", f"unknown vertex {pb['vertex']!r}")
        missing = set(net.channels) - set(scn.controls.get("initial", {})) - {"u", "u_compr"}
        if missing:
            R.fail("controls.initial", f"no initial value for channels {sorted(missing)}")
        return scn

    @staticmethod
    def _read_network(R, raw):
        net = R.section(raw, "network", required=("edges", "left_bc"),
                        optional=("models", "right_bc", "couplings", "supply", "pressure_unit",
                                  "reference_pressure"))
        out = {"pressure_unit": R.number(net.get("pressure_unit", "1 bar"),
                                         "network.pressure_unit", "pressure")}
        if "reference_pressure" in net:
            out["reference_pressure"] = R.number(net["reference_pressure"],
                                                 "network.reference_pressure", "pressure")
        models = {}
        for name, m in (net.get("models") or {}).items():
            path = f"network.models.{name}"
            m = R.section(m, path, required=("kind",),
                          optional=("lambda", "lam", "s", "R", "L", "C", "G", "d", "beta",
                                    "friction", "diameter"))
            md = {"kind": str(m["kind"])}
            for k, v in m.items():
                if k == "kind":
                    continue
                key = "lam" if k == "lambda" else k
                dim = "length" if k == "diameter" else None
                md[key] = R.number(v, f"{path}.{k}", dim)
            try:
                EdgeModel.from_dict(md)
            except (ValueError, TypeError) as exc:
                R.fail(path, str(exc))
            models[str(name)] = md
        out["models"] = models
        edges = []
        if not isinstance(net["edges"], list) or not net["edges"]:
            R.fail("network.edges", "expected a non-empty list")
        for i, e in enumerate(net["edges"]):
            path = f"network.edges[{i}]"
            e = R.section(e, path, required=("name", "tail", "head", "model"),
                          optional=("a", "b", "cells", "control"))
            if str(e["model"]) not in models:
                R.fail(f"{path}.model", f"unknown model {e['model']!r}")
            ed = {"name": str(e["name"]), "tail": str(e["tail"]), "head": str(e["head"]),
                  "model": str(e["model"]),
                  "a": R.number(e.get("a", 0.0), f"{path}.a", "length"),
                  "b": R.number(e.get("b", 0.0), f"{path}.b", "length"),
                  "cells": R.integer(e.get("cells", 0), f"{path}.cells")}
            if "control" in e:
                ed["control"] = str(e["control"])
            edges.append(ed)
        out["edges"] = edges
        for side in ("left_bc", "right_bc"):
            if net.get(side) is None:
                continue
            path = f"network.{side}"
            bc = R.section(net[side], path, required=("quantity",),
                           optional=("value", "control", "scale"))
            q = str(bc["quantity"])
            bd = {"quantity": q,
                  "value": R.number(bc.get("value", 0.0), f"{path}.value",
                                    "pressure" if q == "p" else None),
                  "scale": R.number(bc.get("scale", 1.0), f"{path}.scale")}
            if "control" in bc:
                bd["control"] = str(bc["control"])
            out[side] = bd
        cps = {}
        for v, c in (net.get("couplings") or {}).items():
            path = f"network.couplings.{v}"
            c = R.section(c, path, required=("kind",), optional=("control", "scale"))
            cd = {"kind": str(c["kind"]), "scale": R.number(c.get("scale", 1.0), f"{path}.scale")}
            if "control" in c:
                cd["control"] = str(c["control"])
            cps[str(v)] = cd
        out["couplings"] = cps
        sup = R.section(net.get("supply"), "network.supply",
                        optional=("kind", "component", "channel", "a0", "a1", "a2"))
        sd = {"kind": str(sup.get("kind", "trace")), "component": str(sup.get("component", "rho")),
              "channel": str(sup.get("channel", "u"))}
        for k, dflt in (("a0", 0.0), ("a1", 1.0), ("a2", 0.0)):
            sd[k] = R.number(sup.get(k, dflt), f"network.supply.{k}")
        out["supply"] = sd
        return out

    @staticmethod
    def _read_demand(R, raw):
        d = R.section(raw, "demand", required=("y0", "kappa", "sigma", "mean_level"),
                      optional=("t0", "time_unit"))
        unit = str(d.get("time_unit", R.time_unit))
        if unit != R.time_unit and (unit not in TIME_UNITS or R.time_unit not in TIME_UNITS):
            R.fail("demand.time_unit", f"cannot convert {unit!r} to {R.time_unit!r}")
        ml = R.section(d["mean_level"], "demand.mean_level", required=("kind",),
                       optional=("level", "offset", "amplitude", "omega", "phase", "times",
                                 "values"))
        mld = {"kind": str(ml["kind"])}
        for k in ("level", "offset", "amplitude", "omega", "phase"):
            if k in ml:
                mld[k] = R.number(ml[k], f"demand.mean_level.{k}")
        for k in ("times", "values"):
            if k in ml:
                if not isinstance(ml[k], list):
                    R.fail(f"demand.mean_level.{k}", "expected a list")
                mld[k] = [R.number(v, f"demand.mean_level.{k}[{i}]") for i, v in enumerate(ml[k])]
        try:
            MeanLevel.from_dict(mld)
        except (ValueError, TypeError) as exc:
            R.fail("demand.mean_level", str(exc))
        out = {"time_unit": unit, "t0": R.number(d.get("t0", 0.0), "demand.t0"),
               "y0": R.number(d["y0"], "demand.y0"), "kappa": R.number(d["kappa"], "demand.kappa"),
               "sigma": R.number(d["sigma"], "demand.sigma"), "mean_level": mld}
        if not out["kappa"] > 0 or not out["sigma"] > 0:
            R.fail("demand", "kappa and sigma must be positive")
        return out

    @staticmethod
    def _read_initial(R, raw, network):
        ini = R.section(raw, "initial", optional=("kind", "values", "controls"))
        kind = str(ini.get("kind", "values"))
        if kind not in ("values", "steady"):
            R.fail("initial.kind", "must be values or steady")
        out = {"kind": kind}
        vals = {}
        for e, v in (ini.get("values") or {}).items():
            path = f"initial.values.{e}"
            v = v if isinstance(v, list) else [v]
            vals[str(e)] = [R.number(x, f"{path}[{i}]") for i, x in enumerate(v)]
        if kind == "values" and not vals:
            R.fail("initial.values", "missing initial values")
        out["values"] = vals
        out["controls"] = {str(k): R.number(v, f"initial.controls.{k}")
                           for k, v in (ini.get("controls") or {}).items()}
        return out

    @staticmethod
    def _read_cc(R, raw):
        c = R.section(raw, "chance_constraint",
                      optional=("variant", "interval", "theta", "fptd_dt", "quantile_scale",
                                "mixture_nodes"))
        out = {"variant": str(c.get("variant", "none"))}
        if out["variant"] not in ("none", "scc", "jcc"):
            R.fail("chance_constraint.variant", f"unknown variant {out['variant']!r}")
        if out["variant"] != "none":
            iv = c.get("interval")
            if not isinstance(iv, list) or len(iv) != 2:
                R.fail("chance_constraint.interval", "expected [t_lo, t_hi]")
            out["interval"] = [R.number(v, f"chance_constraint.interval[{i}]", "time")
                               for i, v in enumerate(iv)]
            out["theta"] = R.number(c.get("theta", 0.05), "chance_constraint.theta")
            if not 0 < out["theta"] < 1:
                R.fail("chance_constraint.theta", "must lie in (0, 1)")
            if not out["interval"][0] < out["interval"][1]:
                R.fail("chance_constraint.interval", "needs t_lo < t_hi")
        if "fptd_dt" in c:
            out["fptd_dt"] = R.number(c["fptd_dt"], "chance_constraint.fptd_dt", "time")
        scale = str(c.get("quantile_scale", "stddev"))
        if scale not in ("stddev", "variance"):
            R.fail("chance_constraint.quantile_scale", "must be stddev or variance")
        out["quantile_scale"] = scale
        if "mixture_nodes" in c:
            out["mixture_nodes"] = R.integer(c["mixture_nodes"], "chance_constraint.mixture_nodes")
        return out

    @staticmethod
    def _read_controls(R, raw, time_):
        c = R.section(raw, "controls", optional=("cell", "initial", "lower", "upper"))
        out = {"cell": R.number(c.get("cell", time_["dt"]), "controls.cell", "time")}
        for k in ("initial", "lower", "upper"):
            sec = R.section(c.get(k), f"controls.{k}", optional=tuple(c.get(k) or ()))
            out[k] = {str(ch): R.number(v, f"controls.{k}.{ch}") for ch, v in sec.items()}
        r = out["cell"] / time_["dt"]
        if not out["cell"] > 0 or abs(r - round(r)) > 1e-9 * max(1.0, r) or round(r) < 1:
            R.fail("controls.cell", "control cell must be a positive multiple of time.dt")
        return out

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {"name": self.name, "description": self.description, "units": dict(self.units),
             "time": dict(self.time), "network": copy.deepcopy(self.network),
             "initial": copy.deepcopy(self.initial), "demand": copy.deepcopy(self.demand),
             "costs": dict(self.costs), "chance_constraint": copy.deepcopy(self.chance_constraint),
             "controls": copy.deepcopy(self.controls), "optimizer": dict(self.optimizer),
             "pressure_bounds": copy.deepcopy(self.pressure_bounds), "seed": self.seed}
        # normalized pressures are pascal; say so explicitly on dump
        d["network"]["pressure_unit"] = f"{self.network['pressure_unit']!r} Pa"
        if "reference_pressure" in self.network:
            d["network"]["reference_pressure"] = f"{self.network['reference_pressure']!r} Pa"
        for side in ("left_bc", "right_bc"):
            bc = d["network"].get(side)
            if bc and bc["quantity"] == "p":
                bc["value"] = f"{bc['value']!r} Pa"
        for e in d["network"]["edges"]:
            e["a"], e["b"] = f"{e['a']!r} m", f"{e['b']!r} m"
        for m in d["network"]["models"].values():
            if "diameter" in m:
                m["diameter"] = f"{m['diameter']!r} m"
        for pb in d["pressure_bounds"]:
            pb["p_min"] = f"{pb['p_min']!r} Pa"
            for k in ("t_lo", "t_hi"):
                pb[k] = _num_out(pb[k])
        if self.t_star is not None:
            d["t_star"] = self.t_star
        for k in ("fptd", "validate", "mc"):
            if getattr(self, k):
                d[k] = copy.deepcopy(getattr(self, k))
        d["units"] = {"time": self.units["time"]}
        return _plain(d)

    def dump(self, path=None) -> str:
        text = yaml.safe_dump(self.to_dict(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    # -- model objects -------------------------------------------------------

    @property
    def time_scale(self) -> float:
        """Simulation time units per demand time unit."""
        du, su = self.demand["time_unit"], self.units["time"]
        if du == su:
            return 1.0
        return TIME_UNITS[du] / TIME_UNITS[su]

    def process(self) -> OUProcess:
        d = self.demand
        ts = self.time_scale
        ml = dict(d["mean_level"])
        if "omega" in ml:
            ml["omega"] = ml["omega"] / ts
        if "times" in ml:
            ml["times"] = [t * ts for t in ml["times"]]
        return OUProcess(t0=d["t0"] * ts, y0=d["y0"], kappa=d["kappa"] / ts,
                         sigma=d["sigma"] / math.sqrt(ts), mean_level=MeanLevel.from_dict(ml))

    def build_network(self, refine: int = 0) -> Network:
        n = self.network
        k = 2 ** int(refine)
        models = {name: EdgeModel.from_dict(m) for name, m in n["models"].items()}
        edges = [Edge(e["name"], e["tail"], e["head"], e["a"], e["b"], e["cells"] * k,
                      models[e["model"]], e.get("control")) for e in n["edges"]]

        def bc(d):
            if d is None:
                return None
            return BoundarySpec(d["quantity"], d["value"], d.get("control"), d["scale"])

        couplings = {v: CouplingSpec(c["kind"], c.get("control"), c["scale"])
                     for v, c in n["couplings"].items()}
        s = n["supply"]
        supply = SupplySpec(s["kind"], s["component"], s["channel"], s["a0"], s["a1"], s["a2"])
        ref = None
        if "reference_pressure" in n:
            gas = [m for m in models.values() if m.is_gas]
            if gas:
                ref = n["reference_pressure"] / gas[0].d ** 2
        return Network(edges, bc(n["left_bc"]), bc(n.get("right_bc")), couplings, supply,
                       pressure_unit=n["pressure_unit"], reference_density=ref)

    def dt(self, refine: int = 0) -> float:
        return self.time["dt"] / 2 ** int(refine)

    def cc_spec(self, interval=None) -> ChanceConstraintSpec:
        c = self.chance_constraint
        if c["variant"] == "none":
            return ChanceConstraintSpec()
        lo, hi = interval or c["interval"]
        return ChanceConstraintSpec(c["variant"], lo, hi, c["theta"], c.get("fptd_dt"),
                                    c["quantile_scale"], c.get("mixture_nodes", 32))

    def initial_controls(self, net: Network, p: Optional[OUProcess] = None) -> dict:
        p = p or self.process()
        init = dict(self.controls["initial"])
        s = net.supply
        for ch in net.channels:
            if ch in init:
                continue
            if s.kind == "conversion" and ch == s.channel:
                init[ch] = float(s.withdrawal(p.y0))
            elif s.kind == "trace" and ch == "u":
                init[ch] = float(p.mean(p.t0))
            else:
                init[ch] = 0.0
        return init

    def initial_state(self, net: Network, system: IboxSystem) -> np.ndarray:
        ini = self.initial
        if ini["kind"] == "values":
            return initial_state(system, {k: v for k, v in ini["values"].items()})
        ctrl = dict(self.initial_controls(net))
        ctrl.update(ini["controls"])
        ref = net.reference_density or 1.0
        q0 = net.right_bc.value if (net.right_bc and net.right_bc.quantity == "q") else 0.0
        guess = initial_state(system, {"*": [ref, q0] if net.is_gas else [1.0, 0.0]}
                              if not ini["values"] else ini["values"])
        return steady_state(net, ctrl, guess, rho_ref=net.reference_density)

    def control_grid(self, net: Network, refine: int = 0) -> ControlGrid:
        dt = self.dt(refine)
        cell = self.controls["cell"]
        if abs(cell - self.time["dt"]) <= 1e-12 * max(1.0, cell):
            cell = dt
        span = self.time["T"] - self.time["t0"]
        n = int(math.ceil(span / cell - 1e-9))
        init = self.initial_controls(net)
        lower = {ch: self.controls["lower"].get(ch, 0.0) for ch in net.channels}
        upper = {ch: self.controls["upper"].get(ch, math.inf) for ch in net.channels}
        return ControlGrid.constant(self.time["t0"], cell, n, {ch: init[ch] for ch in net.channels},
                                    lower, upper)

    def problem(self, refine: int = 0, cc_interval=None, variant: Optional[str] = None,
                **settings) -> ControlProblem:
        net = self.build_network(refine)
        dt = self.dt(refine)
        system = IboxSystem(net, dt)
        x0 = self.initial_state(net, system)
        opt = OptimizerSettings(**{**self.optimizer, **settings})
        cc = self.cc_spec(cc_interval)
        if variant is not None:
            cc = replace(cc, variant=variant)
        pbs = tuple(PressureBound(pb["vertex"], pb["p_min"] / net.pressure_unit, pb["t_lo"],
                                  pb["t_hi"]) for pb in self.pressure_bounds)
        return ControlProblem(net=net, x0=x0, process=self.process(),
                              weights=CostWeights(**self.costs),
                              controls=self.control_grid(net, refine), T=self.time["T"], dt=dt,
                              t0=self.time["t0"], cc=cc, pressure_bounds=pbs, t_star=self.t_star,
                              settings=opt, system=system)


def _num_out(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float):
        return _num_out(obj)
    return obj


def load_scenario(source) -> Scenario:
    """Load a scenario from a path, a YAML string, or a bundled name."""
    if isinstance(source, Scenario):
        return source
    text = None
    if isinstance(source, str) and ("\n" in source or ":" in source):
        text = source
    elif isinstance(source, (str, Path)):
        p = Path(source)
        if str(source) in BUNDLED:
            text = resources.files("ccflow.scenarios").joinpath(f"{source}.yaml").read_text()
        elif p.suffix in (".yaml", ".yml") or p.exists():
            if not p.exists():
                raise ScenarioError(f"scenario file {p} not found")
            text = p.read_text()
        else:
            text = str(source)
    if text is None:
        raise ScenarioError(f"cannot load scenario from {source!r}")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}",
                            line=mark.line + 1 if mark else None) from None
    if not isinstance(raw, dict):
        raise ScenarioError("scenario must be a mapping")
    return Scenario.from_dict(raw, _line_map(text))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("ccflow.scenarios").joinpath(f"{name}.yaml")))
