"""First-passage risk of the four-hour benchmark for several step sizes.

Solves the Volterra equation at each step size, then estimates the same risk
by Monte Carlo with exact transition sampling and with an Euler scheme.
"""
import time

from ccflow.fptd import mc_first_passage_risk, solve_volterra
from ccflow.scenario import load_scenario

from _common import binomial_se, mean_offset_boundary, parser, prepare, write_csv, write_json


def main():
    ap = parser(__doc__, "fptd_benchmark")
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = prepare(args.out)
    scn = load_scenario("fptd_benchmark")
    p = scn.process()
    t_end = scn.fptd["t_end"]
    spec = scn.fptd["boundary"]
    b = mean_offset_boundary(p, spec["offset"], spec["slope"], t_end)
    rows = []
    for dt in scn.fptd["dt"]:
        t0 = time.perf_counter()
        risk = solve_volterra(p, b, dt, t_end).risk
        el = time.perf_counter() - t0
        rows.append(["volterra", dt, "", risk, "", el])
        print(f"volterra dt={dt:g}: {risk:.4f} ({el:.2f} s)")
    for scheme, dt in (("exact", 480.0), ("euler", 480.0), ("exact", 60.0), ("exact", 1.0)):
        t0 = time.perf_counter()
        r = mc_first_passage_risk(p, b, dt, t_end, args.paths, seed=args.seed, scheme=scheme)
        el = time.perf_counter() - t0
        rows.append([f"mc-{scheme}", dt, args.paths, r, binomial_se(r, args.paths), el])
        print(f"mc {scheme} dt={dt:g}: {r:.4f} +- {binomial_se(r, args.paths):.4f} ({el:.1f} s)")
    write_csv(out / "risk.csv", ["method", "dt", "paths", "risk", "se", "elapsed_s"], rows)
    write_json(out / "summary.json", {"seed": args.seed, "rows": rows})


if __name__ == "__main__":
    main()
