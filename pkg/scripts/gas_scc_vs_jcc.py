"""Long gas scenario: SCC-optimal and JCC-optimal supplies, checked by Monte Carlo."""

from ccflow.montecarlo import mc_analyze
from ccflow.optimize import optimize
from ccflow.scenario import load_scenario

from _common import parser, prepare, write_csv, write_json

def main():
    ap = parser(__doc__, "gas")
    ap.add_argument("--paths", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = prepare(args.out)
    scn = load_scenario("gtp_l")
    runs = {}
    for variant in ("scc", "jcc"):
        prob = scn.problem(variant=variant)
        res = optimize(prob)
        mc = mc_analyze(prob.process, res.supply, prob.t, args.paths, args.seed,
                        t_lo=prob.cc.t_lo)
        runs[variant] = (prob, res, mc)
        write_json(out / f"{variant}_summary.json", {**res.summary(), "mc": mc.summary()})
        print(f"{variant}: cost {res.cost.total:.6g}, MC risk {mc.risk:.4f} "
              f"+- {mc.risk_se:.4f} ({res.elapsed:.0f} s)")
    prob = runs["scc"][0]
    on = prob.cc.active(prob.t)
    write_csv(out / "supply.csv", ["t", "scc", "jcc", "mean", "active"],
              zip(prob.t, runs["scc"][1].supply, runs["jcc"][1].supply,
                  prob.process.mean(prob.t), on.astype(int)))
    diff = runs["jcc"][1].supply[on] - runs["scc"][1].supply[on]
    print(f"JCC - SCC on I_CC: min {diff.min():.4f}, max {diff.max():.4f}; "
          f"JCC risk {runs['jcc'][1].risk:.5f}")

if __name__ == "__main__":
    main()
