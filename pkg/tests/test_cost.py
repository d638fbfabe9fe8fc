import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccflow.cost import (CostWeights, DegenerateTruncation, EmptyHorizonError, TruncNormSpec,
                         excess_revenue, time_weights, total_objective, tracking_cost,
                         truncnorm_mean, undersupply_cost)
from ccflow.demand import MeanLevel, OUProcess

from conftest import tele_process

TELE = tele_process()

supplies = st.floats(-1.0, 4.0)
tpos = st.floats(0.02, 4.0)


def test_truncnorm_untruncated_and_symmetric():
    assert truncnorm_mean(TruncNormSpec(1.3, 0.4)) == pytest.approx(1.3, abs=1e-15)
    assert truncnorm_mean(TruncNormSpec(1.3, 0.4, 0.8, 1.8)) == pytest.approx(1.3, abs=1e-14)


def test_truncnorm_half_normal(rng):
    val = truncnorm_mean(TruncNormSpec(0.0, 1.0, 0.0))
    assert val == pytest.approx(2 / math.sqrt(2 * math.pi), abs=1e-15)
    assert val == pytest.approx(0.7979, abs=1e-4)
    x = np.abs(rng.standard_normal(10 ** 7))
    assert abs(x.mean() - val) <= 4 * x.std() / math.sqrt(x.size)


def test_truncnorm_far_tail_and_degenerate():
    assert truncnorm_mean(TruncNormSpec(0.0, 1.0, 30.0)) == pytest.approx(30.033, abs=1e-3)
    with pytest.raises(DegenerateTruncation):
        truncnorm_mean(TruncNormSpec(0.0, 1.0, 60.0, 61.0))
    with pytest.raises(ValueError):
        TruncNormSpec(0.0, 1.0, 1.0, 0.5)


def expanded_tracking(p, t, S):
    """Second moment of Y_t - S written out term by term."""
    e = p.y0 * math.exp(-p.kappa * (t - p.t0))
    forcing = float(p.mean(t)) - e
    v = float(p.variance(t))
    return e * e + 2 * e * forcing + forcing ** 2 + v - 2 * S * (e + forcing) + S * S


@given(tpos, supplies)
def test_tracking_equals_expanded_form(t, S):
    assert float(tracking_cost(TELE, t, S)) == pytest.approx(expanded_tracking(TELE, t, S),
                                                             rel=1e-12, abs=1e-12)


def test_tracking_centered(tele):
    t = np.linspace(0.1, 4, 9)
    assert np.allclose(tracking_cost(tele, t, tele.mean(t)), tele.variance(t), rtol=1e-14)
    quiet = OUProcess(0.0, 1.0, 3.0, 1e-300, tele.mean_level)
    assert np.allclose(tracking_cost(quiet, t, quiet.mean(t)), 0.0, atol=1e-28)


def test_tracking_convex_parabola(tele):
    S = np.linspace(-1, 3, 101)
    c = tracking_cost(tele, 1.1, S)
    assert np.all(np.diff(c, 2) > 0)
    fine = np.linspace(-1, 3, 200001)
    cf = tracking_cost(tele, 1.1, fine)
    assert fine[np.argmin(cf)] == pytest.approx(float(tele.mean(1.1)), abs=2e-5)
    assert cf.min() == pytest.approx(float(tele.variance(1.1)), rel=1e-8)


def literal_under(p, t, S):
    """S (1 - F) - (m + f/(1 - F) sd)(1 - F) with F, f at the standardized S."""
    m, sd = float(p.mean(t)), math.sqrt(float(p.variance(t)))
    z = (S - m) / sd
    F = 0.5 * math.erfc(-z / math.sqrt(2))
    f = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    return S * (1 - F) - (m + f / (1 - F) * sd) * (1 - F)


def literal_excess(p, t, S):
    m, sd = float(p.mean(t)), math.sqrt(float(p.variance(t)))
    z = (S - m) / sd
    F = 0.5 * math.erfc(-z / math.sqrt(2))
    f = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    return S * F - (m - f / F * sd) * F


@given(tpos, st.floats(-6.0, 6.0))
def test_truncated_forms_match_literal(t, k):
    S = float(TELE.mean(t)) + k * float(TELE.std(t))
    assert float(undersupply_cost(TELE, t, S)) == pytest.approx(literal_under(TELE, t, S),
                                                                abs=1e-12)
    assert float(excess_revenue(TELE, t, S)) == pytest.approx(literal_excess(TELE, t, S),
                                                              abs=1e-12)


@given(tpos, supplies)
def test_excess_plus_under_is_gap(t, S):
    lhs = float(excess_revenue(TELE, t, S) + undersupply_cost(TELE, t, S))
    assert lhs == pytest.approx(S - float(TELE.mean(t)), abs=1e-10, rel=1e-10)


def test_signs_and_monotonicity(tele):
    S = np.linspace(-2, 5, 400)
    u, e = undersupply_cost(tele, 2.0, S), excess_revenue(tele, 2.0, S)
    assert np.all(u <= 0) and np.all(e >= 0)
    assert np.all(np.diff(u) >= 0) and np.all(np.diff(e) >= 0)


def test_tails_and_half_normal_identity(tele):
    t = 2.0
    m, sd = float(tele.mean(t)), float(tele.std(t))
    assert abs(float(undersupply_cost(tele, t, m + 11 * sd))) < 1e-12
    assert abs(float(excess_revenue(tele, t, m - 11 * sd))) < 1e-12
    assert float(undersupply_cost(tele, t, m)) == pytest.approx(
        -math.sqrt(float(tele.variance(t)) / (2 * math.pi)), rel=1e-13)


def test_point_mass_at_origin(tele):
    assert float(undersupply_cost(tele, 0.0, 0.7)) == pytest.approx(-0.3)
    assert float(undersupply_cost(tele, 0.0, 1.4)) == 0.0
    assert float(excess_revenue(tele, 0.0, 1.4)) == pytest.approx(0.4)


def test_reformulations_against_monte_carlo(tele, rng):
    n = 10 ** 6
    for t, off in [(0.3, 0.0), (1.2, 0.08), (2.5, -0.05)]:
        y = tele.sample_paths([0.0, t], n, seed=int(10 * t))[:, 1]
        S = float(tele.mean(t)) + off
        for fn, sample in ((tracking_cost, (S - y) ** 2),
                           (undersupply_cost, np.minimum(S - y, 0)),
                           (excess_revenue, np.maximum(S - y, 0))):
            se = sample.std() / math.sqrt(n)
            assert abs(float(fn(tele, t, S)) - sample.mean()) <= 4 * se


def test_time_weights_trapezoid():
    t = np.linspace(0, 4, 161)
    w = time_weights(t, 1.0)
    assert w.sum() == pytest.approx(3.0, abs=1e-12)
    assert np.dot(w, t) == pytest.approx((16 - 1) / 2, abs=1e-12)
    # t_star between grid points
    w = time_weights(t, 1.01)
    assert w.sum() == pytest.approx(2.99, abs=1e-12)
    assert np.dot(w, t) == pytest.approx((16 - 1.01 ** 2) / 2, abs=1e-12)
    with pytest.raises(EmptyHorizonError):
        time_weights(t, 4.0)


def test_objective_zero_weights(tele):
    t = np.linspace(0, 4, 81)
    w = CostWeights(0, 0, 0, 0)
    assert total_objective(tele, w, t, np.ones_like(t), t_star=0.5).total == 0.0


def test_objective_pure_tracking_integrates_variance(tele):
    t = np.linspace(0, 4, 40001)
    ts = 1.25
    val = total_objective(tele, CostWeights(), t, tele.mean(t), t_star=ts).total
    k, c = tele.kappa, tele.stationary_variance
    exact = c * ((4 - ts) + (math.exp(-2 * k * 4) - math.exp(-2 * k * ts)) / (2 * k))
    assert val == pytest.approx(exact, rel=1e-8)


def test_gas_weights_applied():
    p = OUProcess(0.0, 0.8, 1 / 3600, 0.003, MeanLevel.sinusoidal(0.7, 0.3, math.pi / 7200))
    w = CostWeights(w_det=1e-4, w_track=0.0, w_under=1e-4, w_ex=1e-6)
    t = np.linspace(0, 14400, 241)
    S = np.full_like(t, 0.8)
    u = S.copy()
    c = total_objective(p, w, t, S, u=u, u_compr=np.full_like(t, 2.0))
    assert c.C1 == pytest.approx(1e-4 * (1.0 * 2.0 + 1e-4 * 0.8) * 14400, rel=1e-12)
    assert c.C2 == 0.0
    assert c.C3 == pytest.approx(-1e-4 * np.dot(time_weights(t, 0.0),
                                                undersupply_cost(p, t, S)), rel=1e-12)
    assert c.R == pytest.approx(1e-6 * np.dot(time_weights(t, 0.0),
                                              excess_revenue(p, t, S)), rel=1e-12)
    assert c.total == pytest.approx(c.C1 + c.C3 - c.R)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        CostWeights(w_under=-1.0)
