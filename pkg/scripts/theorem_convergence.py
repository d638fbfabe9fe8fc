"""Optimal advection inflow against the closed-form SCC control under refinement."""
import math

import numpy as np

from ccflow.optimize import optimize
from ccflow.scenario import load_scenario
from ccflow.validation import analytic_optimal_control

from _common import parser, prepare, write_csv


def main():
    ap = parser(__doc__, "theorem")
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--theta", type=float, default=0.05)
    args = ap.parse_args()
    out = prepare(args.out)
    scn = load_scenario("advect_validate")
    rows = []
    for k in range(args.levels):
        prob = scn.problem(k, cc_interval=(0.0, 1.0))
        res = optimize(prob)
        e = prob.net.edges[0]
        delay = (e.b - e.a) / e.model.lam
        u = res.controls.values["u"]
        tc = res.controls.cell_times() + prob.dt
        keep = tc <= prob.T - delay + 1e-12
        ustar = analytic_optimal_control(prob.process, e.model.lam, args.theta, prob.T,
                                         tc[keep], s=e.model.s, length=e.b - e.a)
        h = res.controls.cell
        dist = math.sqrt(h * np.sum((u[keep] - ustar) ** 2))
        rel = dist / math.sqrt(h * np.sum(u[keep] ** 2))
        rows.append([k, prob.dt, dist, rel])
        write_csv(out / f"control_level{k}.csv", ["t", "u", "u_analytic"],
                  zip(tc[keep], u[keep], ustar))
        print(f"level {k}: dt={prob.dt:g}, L2 distance {dist:.4g} ({rel:.2%})")
    write_csv(out / "distance.csv", ["level", "dt", "l2", "relative"], rows)


if __name__ == "__main__":
    main()
