import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specshare import its as its_mod
from specshare import netmodel
from specshare.baselines import (NpfInfeasibleError, OracleError,
                                 PunishForgivePolicy, optimal_schedule_oracle,
                                 round_robin_closed_form, round_robin_metrics,
                                 stationary_solve, symmetric_stationary_power)
from specshare.its import its_solve, obedient_constants
from specshare.ldf import run_ldf
from specshare.netmodel import SensingModel
from specshare.policy import RoundRobinPolicy, discounted_metrics, evaluate
from specshare.rng import UserStreams

from conftest import make_net, symmetric_net


# ------------------------------------------------------------- stationary

def test_stationary_symmetric_closed_form():
    net = symmetric_net(2, alpha=0.5)
    sol = stationary_solve(net)
    assert sol.feasible
    assert abs(sol.powers[0] - 0.1) < 1e-12 and abs(sol.powers[1] - 0.1) < 1e-12
    assert symmetric_stationary_power(1.0, 0.5, 0.05) == pytest.approx(0.1)


def test_stationary_infeasible_at_unit_cross():
    for alpha in (1.0, 1.3):
        assert not stationary_solve(symmetric_net(2, alpha=alpha)).feasible
    assert math.isinf(symmetric_stationary_power(1.0, 1.0, 0.05))


def test_stationary_feasible_just_below_threshold():
    sol = stationary_solve(symmetric_net(2, alpha=0.995))
    assert sol.feasible
    assert sol.powers[0] == pytest.approx(0.05 / 0.005, rel=1e-10)


def test_stationary_single_user():
    net = make_net([[2.0]], min_rates=1.5)
    sol = stationary_solve(net)
    assert sol.powers[0] == pytest.approx((2 ** 1.5 - 1) * 0.05 / 2.0, rel=1e-12)


@given(alpha=st.floats(0.05, 0.8), r=st.floats(0.2, 1.2), seed=st.integers(0, 99))
@settings(max_examples=25, deadline=None)
def test_stationary_fixed_point_binds(alpha, r, seed):
    rng = np.random.default_rng(seed)
    k = 3
    g = alpha * rng.uniform(0.2, 1.0, size=(k, k))
    np.fill_diagonal(g, rng.uniform(0.8, 2.0, size=k))
    net = make_net(g, min_rates=r, pmax=1e6)
    sol = stationary_solve(net)
    if sol.feasible:
        rates = netmodel.all_rates(net, sol.powers)
        assert np.allclose(rates, net.min_rates, atol=1e-9)


# ------------------------------------------------------------- round robin

def test_round_robin_closed_forms():
    net = symmetric_net(2, alpha=0.5, delta=0.9)
    rr = round_robin_closed_form(net)
    p1 = 0.05 / 1.9 * (2 ** (1 * (1 + 0.9)) - 1)
    p2 = 0.05 * 0.9 / 1.9 * (2 ** (1 * (1 + 1 / 0.9)) - 1)
    assert rr.avg_power[0] == pytest.approx(p1, abs=1e-10)
    assert rr.avg_power[1] == pytest.approx(p2, abs=1e-10)
    assert np.allclose(rr.avg_rate, 1.0, atol=1e-12)


def test_round_robin_simulation_agrees():
    net = symmetric_net(2, alpha=0.5, delta=0.9)
    rr = round_robin_closed_form(net)
    sens = SensingModel.uniform_setup(2, net.noise)
    T = 300
    pol = RoundRobinPolicy(2, list(rr.order), rr.powers)
    m = discounted_metrics(evaluate(pol, net, sens, T, UserStreams(0, 2)), 0.9)
    tail = 0.9 ** T
    assert np.all(np.abs(m.avg_power - rr.avg_power) <= tail * rr.powers + 1e-15)
    assert np.all(np.abs(m.avg_rate - rr.avg_rate) <= tail * 3 + 1e-15)


def test_round_robin_high_delta_symmetry():
    net = symmetric_net(2, alpha=0.5, delta=0.9999)
    rr = round_robin_closed_form(net)
    limit = 0.05 * (2 ** 2 - 1) / 2
    assert rr.avg_power[0] == pytest.approx(limit, rel=1e-3)
    assert rr.avg_power[1] == pytest.approx(limit, rel=1e-3)


def test_round_robin_crossover_alpha():
    # total stationary energy 2 sigma^2/(1-a) crosses the round-robin total
    net = symmetric_net(2, alpha=0.5, delta=0.9)
    total_rr = float(np.sum(round_robin_closed_form(net).avg_power))
    lo, hi = 0.0, 0.99
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if 2 * 0.05 / (1 - mid) < total_rr:
            lo = mid
        else:
            hi = mid
    assert 0.33 <= lo <= 0.34


def test_round_robin_metrics_wrapper():
    net = symmetric_net(3, alpha=0.2, delta=0.95, min_rates=0.4)
    m = round_robin_metrics(net)
    assert np.allclose(m.avg_rate, 0.4, atol=1e-12)


# ----------------------------------------------------------- punish-forgive

def _npf_setup(alpha=0.5):
    net = symmetric_net(2, alpha=alpha, delta=0.95, pmax=1e6)
    crit = its_mod.WeightedSumEnergy(weights=np.full(2, 10.0))
    consts = obedient_constants(net)
    sol = its_solve(net, criterion=crit, constants=consts)
    stat = stationary_solve(net)
    return net, sol, consts, stat


def test_npf_without_distress_equals_ldf():
    net, sol, consts, stat = _npf_setup()
    pf = PunishForgivePolicy(net, sol, consts, stat, duration=1)
    quiet = SensingModel.build(
        (netmodel.UniformError(0.01),) * 2, [5.0] * 2, net.noise)  # never fires
    trace = evaluate(pf, net, quiet, 120, UserStreams(0, 2))
    ldf = run_ldf(net, None, sol, consts, 120, None, mode="perfect")
    assert np.allclose(trace.powers, ldf.trace.powers)


def test_npf_punishes_after_distress():
    net, sol, consts, stat = _npf_setup()
    duration = 3
    pf = PunishForgivePolicy(net, sol, consts, stat, duration=duration)
    pf.reset()
    history = []
    profiles = []
    for t in range(12):
        profiles.append(pf.action(t, history))
        history.append(1 if t == 4 else 0)
    for t in range(5, 5 + duration):
        assert np.allclose(profiles[t], stat.powers), f"slot {t} not punishing"
        assert np.count_nonzero(profiles[t]) == 2
    assert np.count_nonzero(profiles[5 + duration]) == 1  # cooperation resumes


def test_npf_requires_feasible_punishment():
    net, sol, consts, _ = _npf_setup()
    bad = stationary_solve(symmetric_net(2, alpha=1.2, delta=0.95))
    with pytest.raises(NpfInfeasibleError):
        PunishForgivePolicy(net, sol, consts, bad)


# ------------------------------------------------------------------- oracle

def test_oracle_single_user_all_ones():
    net = make_net([[1.0]], delta=0.9)
    res = optimal_schedule_oracle(net, 0.9, np.array([1.0]), 10)
    assert res.witness == "1" * 10
    assert res.optimal_count == 1 and not res.ambiguous


def test_oracle_half_delta_unique_up_to_relabeling():
    net = symmetric_net(2, alpha=0.5, delta=0.5, min_rates=0.5)
    res = optimal_schedule_oracle(net, 0.5, np.array([1.0, 1.0]), 10)
    assert res.witness == "1222222222"
    assert res.optimal_count == 2  # exactly the relabeling pair
    assert res.is_optimal("2111111111")


def test_oracle_symmetric_nine_tenths_tie_set():
    net = symmetric_net(2, alpha=0.5, delta=0.9, min_rates=1.0)
    res = optimal_schedule_oracle(net, 0.9, np.array([2.0, 2.0]), 10)
    assert res.ambiguous and res.optimal_count > 2
    assert res.is_optimal(res.witness)
    assert res.is_optimal_up_to_relabeling("1221122112")
    assert res.optimal_energy == pytest.approx(0.15, rel=1e-9)
    assert not res.is_optimal("1111111222")  # overshoots user 1's share
    assert not res.is_optimal("1111111111")


def test_oracle_energy_accounts_overshoot():
    net = symmetric_net(2, alpha=0.5, delta=0.9, min_rates=1.0)
    res = optimal_schedule_oracle(net, 0.9, np.array([2.0, 2.0]), 10)
    assert res.prefix_energy("1221122112") == pytest.approx(res.optimal_energy)
    assert res.prefix_energy("1111111222") > res.optimal_energy


def test_oracle_guards():
    net = symmetric_net(2, alpha=0.5, delta=0.9)
    with pytest.raises(OracleError):
        optimal_schedule_oracle(net, 0.9, np.array([2.0, 2.0]), 13)
    net4 = symmetric_net(4, alpha=0.2, delta=0.9, min_rates=0.25)
    with pytest.raises(OracleError):
        optimal_schedule_oracle(net4, 0.9, np.full(4, 1.0), 8)
    with pytest.raises(OracleError):
        optimal_schedule_oracle(net, 0.9, np.array([1.5, 1.5]), 8)  # shares > 1


def test_oracle_slack_targets_allow_idle():
    net = symmetric_net(2, alpha=0.5, delta=0.5, min_rates=0.4)
    res = optimal_schedule_oracle(net, 0.5, np.array([2.0, 2.0]), 6)
    assert res.is_optimal(res.witness)
    assert "0" in res.witness or res.optimal_count >= 1
