"""Command line entry point: ``ccflow <command> --scenario <file>``.

Exit status is 0 on success, 2 when a validation check fails (or the
scenario file does not parse) and 1 on runtime errors, including an
optimization that ends infeasible.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .controls import ControlGrid
from .cost import total_objective
from .fptd import Boundary, mc_first_passage_risk, mc_standard_error, solve_volterra
from .montecarlo import mc_analyze
from .network import simulate
from .optimize import check_gradient, jcc_risk, optimize, scc_bound
from .scenario import Scenario, ScenarioError, load_scenario
from .validation import analytic_optimal_control, exact_advection

log = logging.getLogger("ccflow")

COMMANDS = ("simulate", "optimize", "fptd", "validate", "mc-analyze")


class ValidationFailed(Exception):
    pass


def _write_json(path: Path, obj) -> None:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        raise TypeError(type(o).__name__)

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return None
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    path.write_text(json.dumps(clean(obj), indent=2, default=default))


def _supply_csv(path: Path, prob, supply) -> None:
    m = prob.process.mean(prob.t)
    b = scc_bound(prob.process, prob.cc, prob.t) if prob.cc.variant != "none" else None
    with open(path, "w") as fh:
        fh.write("t,S,mean" + (",bound" if b is not None else "") + "\n")
        for k, tk in enumerate(prob.t):
            row = [f"{tk:.12g}", f"{supply[k]:.12g}", f"{m[k]:.12g}"]
            if b is not None:
                row.append(f"{b[k]:.12g}" if np.isfinite(b[k]) else "")
            fh.write(",".join(row) + "\n")


def _read_controls(path: Path, grid: ControlGrid) -> ControlGrid:
    data = np.genfromtxt(path, delimiter=",", names=True)
    vals = {ch: np.atleast_1d(data[ch]).astype(float) for ch in grid.channels}
    if any(v.size != grid.n_cells for v in vals.values()):
        raise ValueError(f"{path} does not match the scenario's control grid")
    return ControlGrid(grid.t0, grid.cell, vals, dict(grid.lower), dict(grid.upper))


# -- commands -----------------------------------------------------------------


def cmd_simulate(scn: Scenario, out: Path, args) -> dict:
    prob = scn.problem(args.refine)
    t0 = time.perf_counter()
    traj = simulate(prob.net, prob.x0, prob.controls, prob.T, prob.dt, prob.t0,
                    system=prob.system)
    elapsed = time.perf_counter() - t0
    traj.to_csv(out / "trajectory.csv")
    supply = traj.supply()
    _supply_csv(out / "supply.csv", prob, supply)
    u = traj.control(prob.net.supply.channel) if prob.supply_is_control else None
    uc = traj.control("u_compr") if "u_compr" in prob.net.channels else None
    cost = total_objective(prob.process, prob.weights, prob.t, supply, u, uc, prob.t_star)
    summary = {"command": "simulate", "scenario": scn.name, "objective": cost.to_dict(),
               "closure_residuals": traj.closure_residuals(), "timings": {"simulate_s": elapsed},
               "trajectory": traj.summary()}
    print(f"simulated {prob.n_levels - 1} steps in {elapsed:.2f} s, "
          f"objective {cost.total:.8g}")
    return summary


def _report_infeasible(prob, res) -> list:
    s = prob.settings
    msgs = []
    if res.scc_violation > s.feas_tol:
        msgs.append(f"single chance constraint on [{prob.cc.t_lo}, {prob.cc.t_hi}] violated "
                    f"by {res.scc_violation:.3g}")
    if res.pressure_violation > s.feas_tol:
        names = ", ".join(f"{pb.vertex} >= {pb.p_min}" for pb in prob.pressure_bounds)
        msgs.append(f"pressure bound ({names}) violated by {res.pressure_violation:.3g}")
    if prob.cc.variant == "jcc" and res.risk > prob.cc.theta + s.jcc_tol:
        msgs.append(f"joint chance constraint: risk {res.risk:.5f} > theta {prob.cc.theta}")
    return msgs


def _run_optimize(scn: Scenario, out: Path, args):
    prob = scn.problem(args.refine)
    res = optimize(prob)
    res.controls_csv(out / "controls.csv")
    res.trace_csv(out / "trace.csv")
    _supply_csv(out / "supply.csv", prob, res.supply)
    if res.trajectory is not None:
        res.trajectory.to_csv(out / "trajectory.csv")
    return prob, res


def cmd_optimize(scn: Scenario, out: Path, args) -> dict:
    prob, res = _run_optimize(scn, out, args)
    problems = _report_infeasible(prob, res)
    summary = {"command": "optimize", "scenario": scn.name, **res.summary(),
               "feasible": not problems, "violations": problems,
               "timings": {"optimize_s": res.elapsed}}
    print(f"optimize: {res.reason}; objective {res.cost.total:.8g} after "
          f"{len(res.trace)} iterations ({res.elapsed:.1f} s)")
    if prob.cc.variant == "jcc":
        print(f"joint risk {res.risk:.5f} (theta {prob.cc.theta})")
    if problems:
        _write_json(out / "summary.json", summary)
        raise RuntimeError("optimization ended infeasible: " + "; ".join(problems))
    return summary


def _fptd_boundary(scn: Scenario, p, t_end, args, out):
    spec = scn.fptd.get("boundary", {"kind": "supply"})
    kind = spec["kind"]
    if kind == "constant":
        return Boundary.constant(spec["level"])
    if kind == "mean_offset":
        off, slope = spec.get("offset", 0.0), spec.get("slope", 0.0)
        span = t_end - p.t0
        return Boundary.analytic(lambda t: p.mean(t) + off + slope * (t - p.t0) / span,
                                 lambda t: p.mean_deriv(t) + slope / span)
    prob = scn.problem(args.refine)
    grid = prob.controls
    saved = out / "controls.csv"
    if saved.exists():
        grid = _read_controls(saved, grid)
    traj = simulate(prob.net, prob.x0, grid, prob.T, prob.dt, prob.t0, system=prob.system)
    return Boundary.tabulated(prob.t, traj.supply())


def cmd_fptd(scn: Scenario, out: Path, args) -> dict:
    p = scn.process()
    dts = scn.fptd.get("dt") or [scn.chance_constraint.get("fptd_dt", scn.time["dt"])]
    dts = [dt / 2 ** args.refine for dt in dts]
    t_end = scn.fptd.get("t_end", scn.time["T"])
    b = _fptd_boundary(scn, p, t_end, args, out)
    rows = []
    for dt in dts:
        t0 = time.perf_counter()
        res = solve_volterra(p, b, dt, t_end)
        el = time.perf_counter() - t0
        name = f"fptd_dt{dt:g}.csv"
        with open(out / name, "w") as fh:
            fh.write("t,g,G\n")
            for tk, gk, Gk in zip(res.t, res.g, res.G):
                fh.write(f"{tk:.12g},{gk:.12g},{Gk:.12g}\n")
        rows.append({"dt": dt, "risk": res.risk, "n_clamped": res.n_clamped,
                     "cdf_overshoot": res.cdf_overshoot, "elapsed_s": el, "file": name})
        print(f"dt={dt:g}: risk {res.risk:.4f} ({el:.2f} s)")
    summary = {"command": "fptd", "scenario": scn.name, "t_end": t_end, "results": rows}
    n_mc = scn.fptd.get("mc_paths")
    if n_mc:
        dt = min(dts)
        t0 = time.perf_counter()
        r = mc_first_passage_risk(p, b, dt, t_end, n_mc, args.seed,
                                  scn.fptd.get("mc_scheme", "exact"))
        el = time.perf_counter() - t0
        summary["monte_carlo"] = {"dt": dt, "paths": n_mc, "risk": r,
                                  "se": mc_standard_error(r, n_mc), "elapsed_s": el}
        print(f"monte carlo dt={dt:g}, {n_mc} paths: risk {r:.4f} ({el:.1f} s)")
    return summary


def _advection_oracle(scn: Scenario, args) -> list:
    """Closed-form checks for a single advection edge."""
    v = scn.validate
    k_max = v.get("refinements", 2)
    thr = v.get("threshold", 0.02)
    icc = v.get("cc_interval")
    checks = []
    dists, errs = [], []
    for k in range(args.refine, args.refine + k_max + 1):
        prob = scn.problem(k, cc_interval=icc)
        edge = prob.net.edges[0]
        lam, s = edge.model.lam, edge.model.s
        length = edge.b - edge.a
        res = optimize(prob)
        u = res.controls.values[prob.net.left_bc.control]
        tl = res.controls.cell_times() + prob.dt
        keep = tl <= prob.T - length / lam + 1e-12
        ustar = analytic_optimal_control(prob.process, lam, prob.cc.theta, prob.T, tl[keep], s=s,
                                         length=length, cc_interval=(prob.cc.t_lo, prob.cc.t_hi),
                                         scale=prob.cc.quantile_scale)
        h = res.controls.cell
        dist = math.sqrt(h * np.sum((u[keep] - ustar) ** 2))
        norm = math.sqrt(h * np.sum(ustar ** 2))
        dists.append(dist / norm)
        # plain simulation against the exact solution with a smooth inflow
        ini = scn.initial["values"][edge.name][0]
        inflow = lambda t, p=prob.process: p.mean(t)
        U = inflow(prob.t)[:, None]
        traj = simulate(prob.net, prob.x0, U, prob.T, prob.dt, prob.t0, system=prob.system)
        xs = edge.x - edge.a
        ex = exact_advection(xs[None, :], prob.t[:, None], lam, s, lambda x: np.full_like(x, ini),
                             inflow)
        num = traj.edge_values(edge.name)[:, :, 0]
        errs.append(math.sqrt(prob.dt * edge.dx * np.sum((num - ex) ** 2)))
        print(f"refine {k}: control distance {dists[-1]:.4%}, state L2 error {errs[-1]:.4g}")
    dec = all(b < a for a, b in zip(dists, dists[1:]))
    checks.append(("control distance decreases under refinement", dec,
                   ", ".join(f"{d:.4%}" for d in dists)))
    checks.append((f"finest control distance below {100 * thr:g}%", dists[-1] < thr,
                   f"{dists[-1]:.4%}"))
    checks.append(("state error against exact advection decreases",
                   all(b < a for a, b in zip(errs, errs[1:])),
                   ", ".join(f"{e:.4g}" for e in errs)))
    return checks


def _generic_checks(scn: Scenario, args) -> list:
    prob = scn.problem(args.refine)
    traj = simulate(prob.net, prob.x0, prob.controls, prob.T, prob.dt, prob.t0,
                    system=prob.system)
    res = traj.closure_residuals()
    worst = max(res.values(), default=0.0)
    checks = [("coupling and boundary residuals", worst <= 1e-8, f"max {worst:.3g}")]
    z = prob.controls.to_vector()
    rng = np.random.default_rng(args.seed)
    idx = np.sort(rng.choice(z.size, size=min(z.size, 6), replace=False))
    g, fd = check_gradient(prob, z, None, cells=idx)
    err = float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-300))
    tol = 1e-5 if prob.net.is_linear else 1e-4
    checks.append(("adjoint gradient against central differences", err < tol,
                   f"relative error {err:.3g} on {idx.size} components"))
    return checks


def cmd_validate(scn: Scenario, out: Path, args) -> dict:
    kind = scn.validate.get("kind", "generic")
    t0 = time.perf_counter()
    checks = _advection_oracle(scn, args) if kind == "advection_oracle" else _generic_checks(scn, args)
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    summary = {"command": "validate", "scenario": scn.name, "kind": kind,
               "checks": [{"name": n, "passed": bool(ok), "detail": d} for n, ok, d in checks],
               "passed": all(ok for _, ok, _ in checks),
               "timings": {"validate_s": time.perf_counter() - t0}}
    if not summary["passed"]:
        _write_json(out / "summary.json", summary)
        raise ValidationFailed("validation failed")
    return summary


def cmd_mc_analyze(scn: Scenario, out: Path, args) -> dict:
    prob = scn.problem(args.refine)
    saved = out / "controls.csv"
    if saved.exists():
        grid = _read_controls(saved, prob.controls)
        traj = simulate(prob.net, prob.x0, grid, prob.T, prob.dt, prob.t0, system=prob.system)
        supply = traj.supply()
        source = str(saved)
    else:
        prob, res = _run_optimize(scn, out, args)
        supply = res.supply
        source = "optimize"
    p = prob.process
    cc = prob.cc
    t_lo, t_hi = (cc.t_lo, cc.t_hi) if cc.variant != "none" else (prob.t0, prob.T)
    dt = scn.mc.get("dt", prob.dt)
    n = int(math.floor((t_hi - p.t0) / dt + 1e-9))
    grid = p.t0 + dt * np.arange(n + 1)
    S = np.interp(grid, prob.t, supply)
    paths = scn.mc.get("paths", 1000)
    t0 = time.perf_counter()
    ana = mc_analyze(p, S, grid, paths, args.seed, t_lo=t_lo)
    el = time.perf_counter() - t0
    ana.to_csv(out / "mc_analysis.csv")
    fp = ana.first_passage
    with open(out / "first_passage.csv", "w") as fh:
        fh.write("path,t_hit\n")
        for i in np.flatnonzero(np.isfinite(fp)):
            fh.write(f"{i},{fp[i]:.12g}\n")
    spec = cc if cc.variant != "none" else None
    fptd_risk = jcc_risk(p, prob.t, supply, spec) if spec is not None else None
    summary = {"command": "mc-analyze", "scenario": scn.name, "supply_from": source,
               **ana.summary(), "fptd_risk": fptd_risk, "timings": {"mc_s": el}}
    print(f"{paths} paths: hit fraction {ana.risk:.4f} +- {ana.risk_se:.4f}"
          + (f", fptd risk {fptd_risk:.4f}" if fptd_risk is not None else ""))
    return summary


HANDLERS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "fptd": cmd_fptd,
            "validate": cmd_validate, "mc-analyze": cmd_mc_analyze}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccflow", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--scenario", required=True,
                    help="scenario YAML file or bundled name (tele, gtp_s, gtp_l, "
                         "advect_validate, fptd_benchmark)")
    ap.add_argument("--out", default="out", help="output directory (default: ./out)")
    ap.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    ap.add_argument("--refine", type=int, default=0,
                    help="halve dx and dt this many times")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scn = load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    if args.refine < 0:
        print("--refine must be nonnegative", file=sys.stderr)
        return 2
    if args.seed is None:
        args.seed = scn.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        summary = HANDLERS[args.command](scn, out, args)
    except ValidationFailed as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported, mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    summary["seed"] = args.seed
    summary["refine"] = args.refine
    summary.setdefault("timings", {})["total_s"] = time.perf_counter() - t0
    _write_json(out / "summary.json", summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
