"""SCC-optimal supply of the telegrapher scenario next to the bound and the mean."""
from ccflow.optimize import optimize, scc_bound
from ccflow.scenario import load_scenario

from _common import parser, prepare, write_csv, write_json


def main():
    ap = parser(__doc__, "tele")
    args = ap.parse_args()
    out = prepare(args.out)
    prob = load_scenario("tele").problem()
    res = optimize(prob)
    t = prob.t
    b = scc_bound(prob.process, prob.cc, t)
    m = prob.process.mean(t)
    on = prob.cc.active(t)
    write_csv(out / "supply.csv", ["t", "supply", "bound", "mean", "active"],
              zip(t, res.supply, b, m, on.astype(int)))
    res.controls_csv(out / "controls.csv")
    gap = res.supply[on] - b[on]
    pre = (t >= prob.t_star) & (t < prob.cc.t_lo)
    summary = {**res.summary(), "min_gap": float(gap.min()), "max_gap": float(gap.max()),
               "pre_activation_rel_dev": float(abs((res.supply[pre] - m[pre]) / m[pre]).max())}
    write_json(out / "summary.json", summary)
    print(f"cost {res.cost.total:.6g}; gap on I_CC in [{gap.min():.2e}, {gap.max():.2e}]; "
          f"max relative deviation from mean before activation "
          f"{summary['pre_activation_rel_dev']:.1%}")


if __name__ == "__main__":
    main()
