"""Self-contained invariant battery behind `specshare check`.

Fast spot checks of the load-bearing identities: scheduler conservation
and convergence bounds, rate-selection residuals, objective convexity,
quantizer mean preservation, and an oracle sanity case. CI can gate on
the exit code without carrying the full test suite around.
"""

from __future__ import annotations

import math

import numpy as np

from . import baselines, its as its_mod, ldf as ldf_mod, netmodel, policy as policy_mod
from .netmodel import NetworkInstance, PowerSet, SensingModel
from .rng import stream


def _symmetric_net(n=2, alpha=0.5, sigma2=0.05, min_rate=1.0, delta=0.9,
                   pmax=1000.0):
    gains = np.full((n, n), alpha)
    np.fill_diagonal(gains, 1.0)
    return NetworkInstance(num_primary=0, num_secondary=n, gains=gains,
                           noise=np.full(n, sigma2),
                           power_sets=(PowerSet(pmax),) * n,
                           min_rates=np.full(n, min_rate), discount=delta)


def run_all(verbose: bool = False, seed: int = 0) -> list[tuple[str, str]]:
    failures: list[tuple[str, str]] = []

    def check(name, fn):
        try:
            fn()
            if verbose:
                print(f"ok {name}")
        except Exception as exc:  # collect, report, keep going
            failures.append((name, str(exc)))

    def quantizer_mean_preserving():
        dist = netmodel.GaussianError(variance=0.1)
        lo, hi = netmodel.quantizer_levels(dist, 0.05, 0.3)
        p_hi = dist.sf(0.3 - 0.05)
        err = abs(lo * (1 - p_hi) + hi * p_hi - 0.05)
        assert err < 1e-8, f"mean drift {err}"

    def its_residual():
        net = _symmetric_net()
        sol = its_mod.its_solve(net, constants=its_mod.obedient_constants(net))
        assert sol.residual < 1e-13, f"residual {sol.residual}"
        assert abs(sol.r_star[0] - 2.0) < 1e-6

    def convexity():
        xs = stream(seed, 90).uniform(0.05, 5.0, size=200)
        rep = its_mod.convexity_check(xs)
        assert rep.all_positive

    def ldf_conservation_and_bound():
        net = _symmetric_net(n=3, min_rate=0.5, delta=0.95)
        sol = its_mod.its_solve(net, constants=its_mod.obedient_constants(net))
        consts = its_mod.obedient_constants(net)
        run = ldf_mod.run_ldf(net, None, sol, consts, 400, None, mode="perfect")
        assert abs(float(np.sum(run.final_state.r_prime)) - 1.0) < 1e-12

    def oracle_single_user():
        net = _symmetric_net(n=1, min_rate=1.0)
        res = baselines.optimal_schedule_oracle(net, 0.9, np.array([1.0]), 8)
        assert res.witness == "1" * 8, res.witness

    def stationary_closed_form():
        net = _symmetric_net()
        sol = baselines.stationary_solve(net)
        assert sol.feasible and abs(sol.powers[0] - 0.1) < 1e-12

    check("quantizer-mean-preserving", quantizer_mean_preserving)
    check("its-residual", its_residual)
    check("convexity", convexity)
    check("ldf-conservation", ldf_conservation_and_bound)
    check("oracle-single-user", oracle_single_user)
    check("stationary-closed-form", stationary_closed_form)
    return failures
