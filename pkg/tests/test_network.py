import math
import warnings

import numpy as np
import pytest

from ccflow.network import (BoundarySpec, ConversionError, CouplingSpec, Edge, EdgeModel,
                            GridState, IboxSystem, InverseCFLWarning, Network, NetworkError,
                            StepFailure, SupplySpec, ibox_step, initial_state, simulate)
from ccflow.scenario import load_scenario
from ccflow.validation import exact_advection


def advection_net(lam=4.0, s=0.0, cells=20, length=1.0):
    m = EdgeModel("advection", lam=lam, s=s)
    return Network([Edge("e", "vin", "vd", 0.0, length, cells, m)],
                   BoundarySpec("rho", control="u"))


def tele_diamond(R=0.0, G=0.0, cells=10):
    m = EdgeModel("telegrapher", R=R, L=0.5, C=0.125, G=G)
    edges = [Edge("a", "vin", "v1", 0, 1, cells, m), Edge("b", "v1", "v2", 0, 1, cells, m),
             Edge("c", "v1", "v2", 0, 2, 2 * cells, m), Edge("d", "v2", "vd", 0, 1, cells, m)]
    return Network(edges, BoundarySpec("I", control="u"), BoundarySpec("U", 1.0),
                   supply=SupplySpec("trace", "I"))


def gas_pipe(friction=0.0):
    m = EdgeModel("euler", d=340.0, friction=friction, diameter=0.5)
    return Network([Edge("p", "vin", "vd", 0.0, 1e4, 10, m)],
                   BoundarySpec("p", 49e5), BoundarySpec("q", 150.0),
                   supply=SupplySpec("conversion"), reference_density=49e5 / 340 ** 2)


def step_many(sysm, x0, ctrl, n):
    st = GridState(sysm, x0, 0.0)
    for _ in range(n):
        st = ibox_step(sysm, st, ctrl)
    return st


def test_constant_advection_state_is_fixed_point():
    sysm = IboxSystem(advection_net(), 0.05)
    x0 = initial_state(sysm, {"e": [2.5]})
    st = step_many(sysm, x0, {"u": 2.5}, 20)
    assert np.max(np.abs(st.x - x0)) <= 1e-12


def test_constant_telegrapher_state_is_fixed_point():
    sysm = IboxSystem(tele_diamond(), 0.025)
    ic = {"a": [1.0, 0.6], "b": [1.0, 0.4], "c": [1.0, 0.2], "d": [1.0, 0.6]}
    x0 = initial_state(sysm, ic)
    st = step_many(sysm, x0, {"u": 0.6}, 40)
    assert np.max(np.abs(st.x - x0)) <= 1e-12


def test_constant_gas_state_is_fixed_point():
    net = gas_pipe()
    sysm = IboxSystem(net, 60.0)
    x0 = initial_state(sysm, {"p": [49e5 / 340 ** 2, 150.0]})
    st = step_many(sysm, x0, {}, 10)
    assert np.max(np.abs(st.x - x0) / np.maximum(1.0, np.abs(x0))) <= 1e-12


def test_zero_everything_gives_zero_trajectory():
    net = tele_diamond(R=0.01, G=0.01)
    net = Network(net.edges, net.left_bc, BoundarySpec("U", 0.0), supply=net.supply)
    sysm = IboxSystem(net, 0.025)
    x0 = np.zeros(sysm.n_unknowns)
    tr = simulate(net, x0, np.zeros((41, 1)), 1.0, 0.025, system=sysm)
    assert np.all(tr.x == 0.0)


def advection_error(cells, lam=4.0, s=-1.0, T=1.0):
    net = advection_net(lam, s, cells)
    dt = 1.0 / cells / lam
    n = int(round(T / dt))
    t = dt * np.arange(n + 1)
    u = np.sin(10 * t)[:, None]
    sysm = IboxSystem(net, dt)
    x0 = initial_state(sysm, {"e": lambda x: [math.sin(x)]})
    tr = simulate(net, x0, u, T, dt, system=sysm)
    x = net.edges[0].x
    ex = exact_advection(x[None, :], t[:, None], lam, s, np.sin, lambda r: np.sin(10 * r))
    num = tr.edge_values("e")[:, :, 0]
    return math.sqrt(dt * net.edges[0].dx * np.sum((num - ex) ** 2))


def test_advection_converges_to_exact_solution():
    errs = [advection_error(c) for c in (20, 40, 80, 160)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    # first order: halving the grid roughly halves the error
    assert errs[-2] / errs[-1] > 1.6


def test_advection_supply_is_delayed_inflow():
    lam, s, b = 4.0, -0.5, 1.0
    cells = 400
    net = advection_net(lam, s, cells, b)
    dt = b / cells / lam
    t = dt * np.arange(int(round(1.0 / dt)) + 1)
    inflow = lambda r: 1 + 0.5 * np.sin(3 * r)
    sysm = IboxSystem(net, dt)
    x0 = initial_state(sysm, {"e": [1.0]})
    tr = simulate(net, x0, inflow(t)[:, None], 1.0, dt, system=sysm)
    late = t > b / lam + 0.05
    expected = math.exp(s * b / lam) * inflow(t[late] - b / lam)
    assert np.max(np.abs(tr.supply()[late] - expected)) < 5e-3


def test_advection_mass_balance():
    net = advection_net(2.0, 0.0, 30)
    dt = 1.0 / 60
    sysm = IboxSystem(net, dt)
    x0 = initial_state(sysm, {"e": lambda x: [1 + x * x]})
    t = dt * np.arange(61)
    tr = simulate(net, x0, (2 + np.cos(4 * t))[:, None], 1.0, dt, system=sysm)
    Q = tr.edge_values("e")[:, :, 0]
    dx = net.edges[0].dx
    mass = dx * np.sum(0.5 * (Q[:, 1:] + Q[:, :-1]), axis=1)
    flux = 2.0 * (Q[1:, -1] - Q[1:, 0])
    assert np.max(np.abs(np.diff(mass) + dt * flux)) <= 1e-10 * np.max(np.abs(mass))


def test_lossless_pulse_arrival_time():
    m = EdgeModel("telegrapher", L=0.5, C=0.125)
    net = Network([Edge("e", "vin", "vd", 0, 1, 400, m)], BoundarySpec("I", control="u"),
                  BoundarySpec("U", 0.0), supply=SupplySpec("trace", "I"))
    dt = 1.0 / 1600
    sysm = IboxSystem(net, dt)
    n = 800
    tr = simulate(net, np.zeros(sysm.n_unknowns), np.ones((n + 1, 1)), n * dt, dt, system=sysm)
    I_end = tr.supply()
    # a short circuit reflects the unit current wave with doubled current
    arrive = tr.t[np.argmax(I_end >= 1.0)]
    assert abs(arrive - 0.25) <= dt + 1e-12
    assert I_end[-1] == pytest.approx(2.0, abs=0.05)


def tele_traces(tr, net, sysm):
    out = {}
    for v in net.interior_vertices:
        ins = [tr.x[:, sysm.base(e, -1):sysm.base(e, -1) + 2] for e in net.in_edges(v)]
        outs = [tr.x[:, sysm.base(e, 0):sysm.base(e, 0) + 2] for e in net.out_edges(v)]
        out[v] = (ins, outs)
    return out


def test_bundled_telegrapher_runs_clean_with_couplings():
    prob = load_scenario("tele").problem()
    with warnings.catch_warnings():
        warnings.simplefilter("error", InverseCFLWarning)
        tr = simulate(prob.net, prob.x0, prob.controls, prob.T, prob.dt, system=prob.system)
    assert tr.t[-1] == pytest.approx(4.0)
    for v, (ins, outs) in tele_traces(tr, prob.net, prob.system).items():
        U = [q[:, 0] for q in ins + outs]
        for a in U[1:]:
            assert np.max(np.abs(a - U[0])) <= 1e-12
        bal = sum(q[:, 1] for q in ins) - sum(q[:, 1] for q in outs)
        assert np.max(np.abs(bal)) <= 1e-12


def gas_run():
    scn = load_scenario("gtp_s")
    prob = scn.problem()
    U = prob.controls.at_levels(prob.n_levels, prob.dt, prob.system.channels)
    t = prob.t
    ch = list(prob.system.channels)
    U[:, ch.index("u")] = 0.8 + 0.2 * np.sin(t / 7200.0)
    U[:, ch.index("u_compr")] = np.where(t > 3 * 3600, 2.0, 0.0)
    tr = simulate(prob.net, prob.x0, U, prob.T, prob.dt, system=prob.system)
    return prob, tr, U


def test_gas_coupling_conditions_hold_every_step():
    prob, tr, U = gas_run()
    net, sysm = prob.net, prob.system
    bar = net.pressure_unit
    ch = list(sysm.channels)

    def end(e, k):
        return tr.x[:, sysm.base(e, k):sysm.base(e, k) + 2]

    def p(e, k):
        return net.edge(e).model.pressure(end(e, k)[:, 0])

    q_scale, p_scale = 150.0, 49e5
    # plain junctions: equal pressure, conserved flux
    assert np.max(np.abs(p("e2", 0) - p("e3", 0))) <= 1e-9 * p_scale
    assert np.max(np.abs(p("e4", -1) - p("e5", -1))) <= 1e-9 * p_scale
    assert np.max(np.abs(p("e4", -1) - p("e6", 0))) <= 1e-9 * p_scale
    assert np.max(np.abs(end("e1", -1)[:, 1] - end("e2", 0)[:, 1] - end("e3", 0)[:, 1])) \
        <= 1e-9 * q_scale
    assert np.max(np.abs(end("e4", -1)[:, 1] + end("e5", -1)[:, 1] - end("e6", 0)[:, 1])) \
        <= 1e-9 * q_scale
    # withdrawal and compressor
    w = 300.0 * U[:, ch.index("u")]
    assert np.max(np.abs(end("e2", -1)[1:, 1] - w[1:] - end("e4", 0)[1:, 1])) <= 1e-9 * q_scale
    lift = (p("e1", -1) - p("e1", 0)) / bar
    assert np.max(np.abs(lift[1:] - U[1:, ch.index("u_compr")])) <= 1e-9 * 49
    assert np.max(np.abs(end("e1", 0)[:, 1] - end("e1", -1)[:, 1])) <= 1e-9 * q_scale
    assert np.max(np.abs(p("e0", -1) - p("e1", 0))) <= 1e-9 * p_scale
    # boundary data
    assert np.max(np.abs(p("e0", 0)[1:] - 49e5)) <= 1e-9 * p_scale
    assert np.max(np.abs(end("e6", -1)[1:, 1] - 150.0)) <= 1e-9 * q_scale


def test_compressor_raises_downstream_pressure():
    prob, tr, _ = gas_run()
    p5 = tr.pressure("v5") / prob.net.pressure_unit
    before = p5[prob.t <= 3 * 3600].min()
    assert p5[-1] > before


def test_deterministic_replay():
    _, a, _ = gas_run()
    _, b, _ = gas_run()
    assert np.array_equal(a.x, b.x)


def test_pressure_law():
    m = EdgeModel("euler", d=340.0, beta=1.0)
    assert float(m.pressure(1.0)) == pytest.approx(115600.0)


def test_pressure_at_non_gas_vertex_rejected():
    prob = load_scenario("tele").problem()
    tr = simulate(prob.net, prob.x0, prob.controls, 0.1, prob.dt, system=prob.system)
    with pytest.raises(NetworkError):
        tr.pressure("v1")


def test_conversion_roots():
    s, _ = SupplySpec("conversion", a0=0, a1=1, a2=0).convert(np.array([0.3, 1.7]))
    assert np.allclose(s, [0.3, 1.7])
    s, _ = SupplySpec("conversion", a0=0, a1=1, a2=1).convert(2.0)
    assert float(s) == pytest.approx(1.0)
    with pytest.raises(ConversionError):
        SupplySpec("conversion", a0=1, a1=0, a2=1).convert(0.5)


def test_density_collapse_is_a_step_failure():
    scn = load_scenario("gtp_s")
    prob = scn.problem()
    U = prob.controls.at_levels(prob.n_levels, prob.dt, prob.system.channels)
    U[:, list(prob.system.channels).index("u")] = 50.0
    with pytest.raises(StepFailure):
        simulate(prob.net, prob.x0, U, prob.T, prob.dt, system=prob.system)


def test_inverse_cfl_diagnostic():
    net = advection_net(4.0, 0.0, 10)
    sysm = IboxSystem(net, 0.01)
    with pytest.warns(InverseCFLWarning):
        simulate(net, initial_state(sysm, {"e": [1.0]}), np.ones((11, 1)), 0.1, 0.01,
                 system=sysm)


@pytest.mark.parametrize("edges", [
    [("a", "x", "y"), ("b", "z", "y")],                  # two sources
    [("a", "x", "y"), ("b", "p", "q")],                  # disconnected
    [("a", "x", "y"), ("a", "y", "z")],                  # duplicate name
])
def test_bad_topologies_rejected(edges):
    m = EdgeModel("advection", lam=1.0)
    with pytest.raises(NetworkError):
        Network([Edge(n, a, b, 0, 1, 4, m) for n, a, b in edges], BoundarySpec("rho"))


@pytest.mark.parametrize("kw", [dict(kind="advection", lam=0.0),
                                dict(kind="telegrapher", L=0.0),
                                dict(kind="telegrapher", R=-1.0),
                                dict(kind="euler", beta=0.5),
                                dict(kind="plasma")])
def test_bad_edge_models_rejected(kw):
    with pytest.raises(NetworkError):
        EdgeModel(**kw)


def test_compressor_coupling_needs_control():
    with pytest.raises(NetworkError):
        CouplingSpec("gas_compressor")
