"""Instantaneous-rate selection: feasibility constants and the ITS solver.

Pipeline: characterize the feasible instantaneous-rate region (deviation
bounds b_ij, punishment floors mu_lower, rate caps, minimum discount
factor), then pick the optimal rate vector by bisecting the multiplier of
the schedulability constraint sum_i target_i / r_i = 1. Each user solves a
scalar stationarity equation per round and broadcasts its share
target_i / r_i* through a lossless in-process bus, so the distributed
message pattern is observable and testable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import netmodel
from .netmodel import NetworkInstance, SensingModel

LAMBDA_DOUBLING_CAP = 1e12
INNER_TOL = 1e-12  # absolute residual on the stationarity equation


class ItsError(RuntimeError):
    pass


class ItsInfeasibleError(ItsError):
    """The instance admits no feasible rate vector (caps or constants)."""

    def __init__(self, message: str, report: dict | None = None):
        super().__init__(message)
        self.report = report or {}


# ---------------------------------------------------------------------------
# energy-efficiency criteria
# ---------------------------------------------------------------------------


def _curv(r: float) -> float:
    """ln2 * r * 2^r - 2^r + 1; positive and strictly increasing for r > 0."""
    b = 2.0 ** r
    return math.log(2.0) * r * b - b + 1.0


def _curv_prime(r: float) -> float:
    return (math.log(2.0) ** 2) * r * 2.0 ** r


@dataclass(frozen=True)
class WeightedSumEnergy:
    """E = sum_i w_i P_i. dE/dP_i is the constant weight w_i."""

    weights: np.ndarray | None = None
    name: str = "weighted-sum"

    def weight(self, i: int) -> float:
        return 1.0 if self.weights is None else float(self.weights[i])

    def de_dp(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        return self.weight(i)

    def lam_of_r(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        """Multiplier value for which r is the stationary inner solution."""
        return self.weight(i) * _curv(r) * float(net.noise[i] / net.gains[i, i])

    def lam_prime(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        return self.weight(i) * _curv_prime(r) * float(net.noise[i] / net.gains[i, i])

    def objective(self, net: NetworkInstance, targets: np.ndarray, rates: np.ndarray) -> float:
        total = 0.0
        for i, r in enumerate(rates):
            if targets[i] > 0 and r > 0:
                c = float(net.noise[i] / net.gains[i, i])
                total += self.weight(i) * c * targets[i] * (2.0 ** r - 1.0) / r
        return total


@dataclass(frozen=True)
class ProportionalFairEnergy:
    """E = sum_i w_i log P_i, proportional fairness over power reductions.

    dE/dP_i = w_i / P_i = w_i (g_ii / (sigma_i^2 target_i)) r / (2^r - 1).
    """

    weights: np.ndarray | None = None
    name: str = "prop-fair"

    def weight(self, i: int) -> float:
        return 1.0 if self.weights is None else float(self.weights[i])

    def de_dp(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        c = float(net.gains[i, i] / (net.noise[i] * targets[i]))
        return self.weight(i) * c * r / (2.0 ** r - 1.0)

    def lam_of_r(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        if r == 0.0:
            return 0.0
        return self.weight(i) * r * _curv(r) / (float(targets[i]) * (2.0 ** r - 1.0))

    def lam_prime(self, net: NetworkInstance, targets: np.ndarray, i: int, r: float) -> float:
        w = self.weight(i) / float(targets[i])
        b = 2.0 ** r
        g = _curv(r)
        gp = _curv_prime(r)
        den = b - 1.0
        return w * ((g + r * gp) / den - r * g * math.log(2.0) * b / den ** 2)

    def objective(self, net: NetworkInstance, targets: np.ndarray, rates: np.ndarray) -> float:
        total = 0.0
        for i, r in enumerate(rates):
            if targets[i] > 0 and r > 0:
                c = float(net.noise[i] / net.gains[i, i])
                total += self.weight(i) * math.log(c * targets[i] * (2.0 ** r - 1.0) / r)
        return total


Criterion = WeightedSumEnergy | ProportionalFairEnergy


def make_criterion(name: str, weights=None) -> Criterion:
    if name in ("weighted-sum", "weighted_sum"):
        return WeightedSumEnergy(weights=None if weights is None else np.asarray(weights, float))
    if name in ("prop-fair", "prop_fair"):
        return ProportionalFairEnergy(weights=None if weights is None else np.asarray(weights, float))
    raise ItsError(f"unknown criterion {name!r}")


# ---------------------------------------------------------------------------
# inner stationarity solve (safeguarded Newton on a monotone residual)
# ---------------------------------------------------------------------------


def kkt_inner_solve(net: NetworkInstance, i: int, lam: float, criterion: Criterion,
                    targets: np.ndarray | None = None, r_max: float | None = None,
                    tol: float = INNER_TOL) -> tuple[float, bool]:
    """Rate at which the stationarity equation holds for multiplier lam.

    Solves lam_of_r(r) = lam on (0, r_max]. The left side is strictly
    increasing from 0, so the root is unique; Newton iterates are clipped to
    a shrinking bracket. Returns (rate, capped) where capped marks a missing
    root in the admissible interval (the grid cap is returned instead).
    """
    targets = net.min_rates if targets is None else targets
    if r_max is None:
        ps = net.power_sets[i]
        r_max = math.log2(1.0 + ps.max_power * float(net.gains[i, i] / net.noise[i]))
    if lam <= 0.0:
        return 0.0, False
    f_hi = criterion.lam_of_r(net, targets, i, r_max) - lam
    if f_hi < 0.0:
        return r_max, True
    lo, hi = 0.0, r_max
    r = 0.5 * r_max
    for _ in range(200):
        res = criterion.lam_of_r(net, targets, i, r) - lam
        if abs(res) <= tol:
            return r, False
        if res > 0.0:
            hi = r
        else:
            lo = r
        dres = criterion.lam_prime(net, targets, i, r)
        step_ok = dres > 0.0 and math.isfinite(dres)
        r_new = r - res / dres if step_ok else 0.5 * (lo + hi)
        if not (lo < r_new < hi):
            r_new = 0.5 * (lo + hi)
        if r_new == r:
            break
        r = r_new
    return r, False


# ---------------------------------------------------------------------------
# feasibility constants (deviation bounds, punishment floors, min discount)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityConstants:
    """Per-instance constants gating scheduler validity.

    b[i, j] bounds the distress-probability drop per unit of normalized rate
    a deviator j can gain during user i's slot (negative in the theorem's
    regime). mu_lower[i] is the minimum slot share user i must retain;
    rate_cap[i] = target_i / mu_lower[i]; delta_min is the smallest discount
    factor for which the scheduler's state decomposition stays valid.
    """

    b: np.ndarray | None          # None in obedient mode
    mu_lower: np.ndarray
    rate_cap: np.ndarray
    delta_min: float
    rho_tdma: np.ndarray
    feasible: bool
    failure: str | None
    fixed_point_passes: int
    obedient: bool

    @property
    def sum_mu(self) -> float:
        return float(np.sum(self.mu_lower))

    def discount_ok(self, delta: float) -> bool:
        return delta >= self.delta_min

    def to_json(self) -> dict:
        return {
            "b_matrix": None if self.b is None else self.b.tolist(),
            "mu_lower": self.mu_lower.tolist(),
            "rate_cap": [None if math.isinf(v) else v for v in self.rate_cap.tolist()],
            "delta_min": self.delta_min,
            "rho_tdma": self.rho_tdma.tolist(),
            "feasible": self.feasible,
            "failure": self.failure,
            "obedient": self.obedient,
        }


def obedient_constants(net: NetworkInstance, targets: np.ndarray | None = None) -> FeasibilityConstants:
    """Constants with deviation terms disabled: mu = 0, delta_min = 1 - 1/K."""
    k = net.n_users
    mu = np.zeros(k)
    caps = np.full(k, np.inf)
    delta_min = 1.0 / (1.0 + 1.0 / (k - 1)) if k > 1 else 0.0
    return FeasibilityConstants(
        b=None, mu_lower=mu, rate_cap=caps, delta_min=delta_min,
        rho_tdma=np.zeros(k), feasible=True, failure=None,
        fixed_point_passes=0, obedient=True)


def feasibility_constants(net: NetworkInstance, sensing: SensingModel,
                          rates_tdma: np.ndarray, targets: np.ndarray | None = None,
                          passes: int = 2) -> FeasibilityConstants:
    """Deviation-aware constants evaluated at the candidate TDMA rates.

    The sup over deviation powers runs over each user's finite grid
    excluding the on-schedule power (zero for a non-slot-owner). The rate
    normalizer inside b couples to the caps it defines; that circularity is
    broken by `passes` fixed-point sweeps from the grid-maximal rates.
    """
    k = net.n_users
    targets = net.min_rates if targets is None else np.asarray(targets, float)
    rates_tdma = np.asarray(rates_tdma, dtype=float)

    rho = np.array([
        sensing.error_dists[i].sf(float(sensing.thresholds[i] - net.noise[i]))
        for i in range(k)
    ])

    # core[i, j]: sup over deviation powers of (rho_i - rho_dev) / r_dev.
    # b[i, j] = core[i, j] * rbar_j, so the fixed point only rescales rows.
    core = np.full((k, k), np.nan)
    for i in range(k):
        p_tilde_i = netmodel.tdma_power_of(net, i, float(rates_tdma[i]))
        for j in range(k):
            if j == i:
                continue
            grid = net.power_sets[j].grid
            pj = grid[grid > 0.0]
            temp_i = net.noise[i] + pj * net.gains[j, i]
            rho_i_dev = np.array([sensing.error_dists[i].sf(float(sensing.thresholds[i] - t))
                                  for t in temp_i])
            temp_j = net.noise[j] + p_tilde_i * net.gains[i, j]
            rho_j_dev = sensing.error_dists[j].sf(float(sensing.thresholds[j] - temp_j))
            rho_dev = 1.0 - (1.0 - rho_i_dev) * (1.0 - rho_j_dev)
            r_dev = np.log2(1.0 + pj * net.gains[j, j] / temp_j)
            core[i, j] = float(np.max((rho[i] - rho_dev) / r_dev))

    rbar = np.array([
        math.log2(1.0 + net.power_sets[i].max_power * float(net.gains[i, i] / net.noise[i]))
        for i in range(k)
    ])
    b = mu = None
    failure = None
    for _ in range(max(passes, 1)):
        b = core * rbar[np.newaxis, :]
        off = ~np.eye(k, dtype=bool)
        if np.any(b[off] >= 0.0):
            failure = "b_sign"  # a deviation does not raise distress probability
            break
        with np.errstate(divide="ignore"):
            ratios = (1.0 - rho)[:, np.newaxis] / (-b)
        ratios[~off] = -np.inf
        mu = np.max(ratios, axis=1)
        with np.errstate(divide="ignore"):
            rbar = np.where(mu > 0.0, targets / mu, np.inf)

    if failure is not None:
        nan = np.full(k, np.nan)
        return FeasibilityConstants(
            b=b, mu_lower=nan, rate_cap=nan, delta_min=float("nan"),
            rho_tdma=rho, feasible=False, failure=failure,
            fixed_point_passes=passes, obedient=False)

    penalty = float(np.nansum(np.where(np.eye(k, dtype=bool), 0.0, -rho[:, np.newaxis] / b)))
    sum_mu = float(np.sum(mu))
    if sum_mu >= 1.0:
        delta_min = float("nan")
        feasible = False
        failure = "sum_mu"
    else:
        delta_min = 1.0 / (1.0 + (1.0 - sum_mu) / (k - 1 + penalty))
        feasible = True
    return FeasibilityConstants(
        b=b, mu_lower=mu, rate_cap=np.where(mu > 0.0, targets / mu, np.inf),
        delta_min=delta_min, rho_tdma=rho, feasible=feasible, failure=failure,
        fixed_point_passes=passes, obedient=False)


# ---------------------------------------------------------------------------
# the distributed solver
# ---------------------------------------------------------------------------


class BroadcastBus:
    """Lossless in-process broadcast with one barrier per round.

    Every user must deposit exactly one message per round; `collect` is the
    barrier that delivers the round to everyone and advances the round
    counter. Message totals are exposed for overhead accounting.
    """

    def __init__(self, n_users: int):
        self.n_users = n_users
        self.messages = 0
        self.rounds = 0
        self._pending: dict[int, float] = {}

    def broadcast(self, user: int, value: float) -> None:
        if user in self._pending:
            raise ItsError(f"user {user} broadcast twice in one round")
        self._pending[user] = value
        self.messages += 1

    def collect(self) -> np.ndarray:
        if len(self._pending) != self.n_users:
            raise ItsError("round barrier reached with missing broadcasts")
        out = np.array([self._pending[u] for u in range(self.n_users)])
        self._pending.clear()
        self.rounds += 1
        return out


class _UserSolver:
    """Per-user state of the distributed rate selection."""

    def __init__(self, net, criterion, targets, i, rate_cap):
        self.net = net
        self.criterion = criterion
        self.targets = targets
        self.i = i
        ps = net.power_sets[i]
        self.r_max_grid = math.log2(1.0 + ps.max_power * float(net.gains[i, i] / net.noise[i]))
        self.rate_cap = min(rate_cap, self.r_max_grid)
        self.rate = 0.0

    def solve(self, lam: float) -> float:
        if self.targets[self.i] == 0.0:
            self.rate = 0.0
            return 0.0
        r, _ = kkt_inner_solve(self.net, self.i, lam, self.criterion,
                               targets=self.targets, r_max=self.r_max_grid)
        self.rate = min(r, self.rate_cap)
        return self.rate

    def share(self) -> float:
        if self.targets[self.i] == 0.0:
            return 0.0
        if self.rate <= 0.0:
            return float("inf")
        return float(self.targets[self.i]) / self.rate


@dataclass(frozen=True)
class ItsSolution:
    """Optimal instantaneous rates and the solve's bookkeeping."""

    r_star: np.ndarray
    p_star: np.ndarray
    lam: float
    mu_ineq: np.ndarray          # inequality multipliers at the rate caps
    iterations: int              # solve/broadcast rounds, initial round included
    n_doubling: int
    n_bisect: int
    residual_preloop: float      # |sum target/r - 1| when the loop exits
    residual: float              # same, after normalization
    lambda_bracket: float        # bisection bracket width when bisection starts
    messages_broadcast: int
    objective: float
    targets: np.ndarray
    criterion_name: str

    def to_json(self) -> dict:
        return {
            "r_star": self.r_star.tolist(),
            "p_star": self.p_star.tolist(),
            "lambda": self.lam,
            "iterations": self.iterations,
            "residual": self.residual,
            "messages_broadcast": self.messages_broadcast,
            "objective": self.objective,
            "criterion": self.criterion_name,
        }


def tdma_profile(net: NetworkInstance, i: int, r_i: float) -> np.ndarray:
    """Joint profile with user i alone transmitting at rate r_i."""
    if r_i < 0:
        raise ItsError("rate must be nonnegative")
    p = np.zeros(net.n_users)
    if r_i == 0.0:
        return p
    power = netmodel.tdma_power_of(net, i, r_i)
    ps = net.power_sets[i]
    if power > ps.max_power * (1.0 + 1e-9):
        raise ItsInfeasibleError(
            f"rate {r_i} for user {i} needs {power:.4g} W, above the {ps.max_power} W grid")
    p[i] = ps.snap(power) if ps.strict_grid else power
    return p


def its_solve(net: NetworkInstance, sensing: SensingModel | None = None,
              criterion: Criterion | None = None, precision: float = 1e-9,
              constants: FeasibilityConstants | None = None,
              targets: np.ndarray | None = None,
              max_bisect: int = 200) -> ItsSolution:
    """Distributed bisection on the schedulability multiplier.

    Doubling phase raises the upper bracket until the shares sum to at most
    one, then bisection tightens until |sum_i target_i/r_i - 1| <= precision,
    and a final rescale pins the sum to one exactly. Users with a zero
    target are carried along but never scheduled.
    """
    k = net.n_users
    targets = np.asarray(net.min_rates if targets is None else targets, dtype=float)
    if constants is None:
        if sensing is None:
            constants = obedient_constants(net, targets)
        else:
            candidate = targets * k  # equal-time-share rates seed the constants
            constants = feasibility_constants(net, sensing, candidate, targets)
    if not constants.feasible:
        raise ItsInfeasibleError(
            f"instance outside the feasible regime ({constants.failure})",
            report=constants.to_json())
    if not np.any(targets > 0):
        zero = np.zeros(k)
        return ItsSolution(zero, zero, 0.0, zero, 0, 0, 0, 0.0, 0.0, 0.0,
                           0, 0.0, targets, criterion.name if criterion else "weighted-sum")

    criterion = criterion or WeightedSumEnergy()
    bus = BroadcastBus(k)
    solvers = [_UserSolver(net, criterion, targets, i, float(constants.rate_cap[i]))
               for i in range(k)]

    def solve_round(lam: float) -> float:
        for s in solvers:
            s.solve(lam)
            bus.broadcast(s.i, s.share())
        return float(np.sum(bus.collect()))

    lam_lo, lam_hi = 0.0, 1.0
    lam = lam_hi
    total = solve_round(lam)
    n_doubling = 0
    while total > 1.0:
        lam_hi *= 2.0
        lam = lam_hi
        if lam_hi > LAMBDA_DOUBLING_CAP:
            raise ItsInfeasibleError(
                "multiplier doubling exceeded cap; rate caps make the shares unschedulable",
                report={"sum_shares": total, "rate_cap": constants.rate_cap.tolist()})
        total = solve_round(lam)
        n_doubling += 1

    bracket = lam_hi - lam_lo
    n_bisect = 0
    while abs(total - 1.0) > precision:
        if n_bisect >= max_bisect:
            raise ItsInfeasibleError(
                "bisection stalled; shares cannot meet the schedulability constraint",
                report={"sum_shares": total})
        lam = 0.5 * (lam_lo + lam_hi)
        total = solve_round(lam)
        if total < 1.0:
            lam_hi = lam
        else:
            lam_lo = lam
        n_bisect += 1

    rates = np.array([s.rate for s in solvers])
    residual_preloop = abs(total - 1.0)
    # Rescale so the shares sum to one exactly (x_i <- x_i / total).
    rates = np.where(targets > 0.0, rates * total, 0.0)

    p_star = np.array([netmodel.tdma_power_of(net, i, float(rates[i])) if rates[i] > 0 else 0.0
                       for i in range(k)])
    shares = np.where(rates > 0.0, targets / np.where(rates > 0.0, rates, 1.0), 0.0)
    residual = abs(float(np.sum(shares)) - 1.0)
    mu_ineq = np.array([
        max(0.0, targets[i] * (lam - criterion.lam_of_r(net, targets, i, float(rates[i]))))
        if rates[i] > 0 else 0.0
        for i in range(k)
    ])
    return ItsSolution(
        r_star=rates, p_star=p_star, lam=lam, mu_ineq=mu_ineq,
        iterations=bus.rounds, n_doubling=n_doubling, n_bisect=n_bisect,
        residual_preloop=residual_preloop, residual=residual,
        lambda_bracket=bracket, messages_broadcast=bus.messages,
        objective=criterion.objective(net, targets, rates),
        targets=targets, criterion_name=criterion.name)


# ---------------------------------------------------------------------------
# convexity spot-check of the reformulated objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvexityReport:
    xs: np.ndarray
    second_differences: np.ndarray
    analytic: np.ndarray

    @property
    def all_positive(self) -> bool:
        return bool(np.all(self.second_differences > 0) and np.all(self.analytic > 0))


def convexity_check(xs: np.ndarray, h: float = 1e-4) -> ConvexityReport:
    """Second differences of (2^(1/x) - 1) x against the closed-form curvature."""
    xs = np.asarray(xs, dtype=float)
    if np.any(xs <= 0):
        raise ItsError("sample points must be positive")

    def f(x):
        return (2.0 ** (1.0 / x) - 1.0) * x

    hh = h * xs
    second = (f(xs + hh) - 2.0 * f(xs) + f(xs - hh)) / hh ** 2
    analytic = math.log(2.0) * 2.0 ** (1.0 / xs) / xs ** 3
    return ConvexityReport(xs=xs, second_differences=second, analytic=analytic)
