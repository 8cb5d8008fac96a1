"""Reference policies: optimal stationary, round-robin, punish-forgive,
and an exhaustive oracle for short optimal TDMA schedule prefixes.

The stationary solver runs synchronous best-response iteration from zero
power (a standard-interference-function fixed point: monotone and
convergent whenever a feasible fixed point exists below the power caps).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import netmodel
from .netmodel import ModelError, NetworkInstance, SensingModel
from .its import FeasibilityConstants, ItsSolution
from .ldf import initial_state, select_transmitter, step
from .policy import DiscountedMetrics, Policy


class OracleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# optimal stationary policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StationarySolution:
    feasible: bool
    powers: np.ndarray | None
    iterations: int
    reason: str | None = None

    def to_json(self) -> dict:
        return {"feasible": self.feasible,
                "powers": None if self.powers is None else self.powers.tolist(),
                "iterations": self.iterations,
                "reason": self.reason}


def stationary_solve(net: NetworkInstance, tol: float = 1e-14,
                     max_iters: int = 200_000) -> StationarySolution:
    """Minimal fixed power levels meeting every rate floor simultaneously.

    Iterates p_i <- (2^{R_i} - 1) I_i(p_-i) / g_ii from zero. The iteration
    is monotone increasing; divergence is detected when any power breaches
    its grid maximum.
    """
    k = net.n_users
    snr_need = 2.0 ** net.min_rates - 1.0
    caps = np.array([ps.max_power for ps in net.power_sets])
    p = np.zeros(k)
    for it in range(max_iters):
        temps = np.array([netmodel.interference_temperature(net, p, i) for i in range(k)])
        p_next = snr_need * temps / np.diag(net.gains)
        if np.any(p_next > caps * (1.0 + 1e-9)):
            return StationarySolution(False, None, it + 1, "power cap breached")
        if np.max(np.abs(p_next - p)) <= tol * max(1.0, float(np.max(p_next))):
            return StationarySolution(True, p_next, it + 1)
        p = p_next
    return StationarySolution(False, None, max_iters, "no convergence")


def symmetric_stationary_power(r: float, alpha: float, sigma2: float) -> float:
    """Closed form for the two-user symmetric case; inf when infeasible."""
    gap = 1.0 - (2.0 ** r - 1.0) * alpha
    if gap <= 0.0:
        return float("inf")
    return (2.0 ** r - 1.0) * sigma2 / gap


# ---------------------------------------------------------------------------
# round-robin TDMA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundRobinSolution:
    order: tuple[int, ...]
    powers: np.ndarray       # instantaneous level while transmitting
    avg_power: np.ndarray    # discounted average
    avg_rate: np.ndarray


def round_robin_closed_form(net: NetworkInstance, order=None) -> RoundRobinSolution:
    """Fixed-rotation TDMA sized so each discounted rate floor binds exactly.

    The user at offset m of a K-rotation owns the discounted share
    (1-delta) delta^m / (1-delta^K) and must transmit at the rate that
    stretches its floor over that share.
    """
    k = net.n_users
    delta = net.discount
    order = tuple(range(k)) if order is None else tuple(order)
    share = np.zeros(k)
    for m, u in enumerate(order):
        share[u] = (1.0 - delta) * delta ** m / (1.0 - delta ** k)
    inst_rate = net.min_rates / share
    powers = np.array([netmodel.tdma_power_of(net, i, float(inst_rate[i])) for i in range(k)])
    return RoundRobinSolution(order=order, powers=powers,
                              avg_power=share * powers,
                              avg_rate=share * inst_rate)


def round_robin_metrics(net: NetworkInstance, order=None,
                        delta: float | None = None) -> DiscountedMetrics:
    sol = round_robin_closed_form(net, order)
    d = net.discount if delta is None else delta
    return DiscountedMetrics(avg_rate=sol.avg_rate, avg_power=sol.avg_power,
                             tail_residual=0.0 if d < 1 else 1.0)


# ---------------------------------------------------------------------------
# punish-forgive
# ---------------------------------------------------------------------------


class NpfInfeasibleError(RuntimeError):
    """Punish-forgive needs a feasible stationary profile to punish with."""


class PunishForgivePolicy(Policy):
    """Cooperate on the optimal TDMA schedule; punish distress with the
    stationary profile for a fixed number of slots, then resume.

    Cooperation follows the longest-distance-first schedule (its state is
    frozen while punishing). A distress signal observed during cooperation
    arms the punishment timer.
    """

    tdma = False  # punishment slots are simultaneous transmissions

    def __init__(self, net: NetworkInstance, solution: ItsSolution,
                 constants: FeasibilityConstants, stationary: StationarySolution,
                 duration: int = 1, mode: str = "perfect"):
        if not stationary.feasible:
            raise NpfInfeasibleError(
                "no stationary punishment profile exists for this instance "
                f"({stationary.reason}); cross interference is too strong "
                "for any simultaneous-transmission power levels")
        if duration < 1:
            raise ValueError("punishment must last at least one slot")
        self.net = net
        self.solution = solution
        self.constants = constants
        self.stationary_powers = stationary.powers
        self.duration = duration
        self.mode = mode
        self.reset()

    def reset(self):
        self._state = initial_state(self.solution, self.mode)
        self._punish_left = 0
        self._seen = 0

    def action(self, t, history):
        if self._seen != t:
            raise RuntimeError("PunishForgivePolicy must be driven slot by slot")
        self._seen = t + 1
        if t > 0:
            y_prev = int(history[-1])
            if self._punish_left > 0:
                self._punish_left -= 1    # scheduler state frozen while punishing
            else:
                was_cooperating = True
                _, self._state = step(self._state, self.constants, self.net.discount,
                                      y_prev, self.solution)
                if was_cooperating and y_prev == 1:
                    self._punish_left = self.duration
        if self._punish_left > 0:
            return self.stationary_powers.copy()
        i_star, _ = select_transmitter(self._state, self.constants)
        p = np.zeros(self.net.n_users)
        if i_star is not None:
            p[i_star] = self.solution.p_star[i_star]
        return p


def punish_forgive_policy(net: NetworkInstance, solution: ItsSolution,
                          constants: FeasibilityConstants,
                          stationary: StationarySolution,
                          duration: int = 1) -> PunishForgivePolicy:
    return PunishForgivePolicy(net, solution, constants, stationary, duration)


# ---------------------------------------------------------------------------
# exhaustive optimal-prefix oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OracleResult:
    """Outcome of the exhaustive schedule search.

    All optimal prefixes achieve the same discounted energy (rates are
    fixed inputs), so ties are the norm; the result carries a canonical
    lexicographically-least witness, the tie-set size, and direct
    membership evaluation for any candidate prefix. Prefix strings use
    '1'..'K' for the transmitter and '0' for idle.
    """

    witness: str
    optimal_count: int
    optimal_energy: float
    horizon: int
    tail_mass: float
    share_target: np.ndarray
    slot_weights: np.ndarray
    unit_powers: np.ndarray
    gap_rtol: float

    @property
    def ambiguous(self) -> bool:
        return self.optimal_count > 1

    def prefix_energy(self, prefix: str) -> float:
        """Completed discounted energy of one prefix; inf if uncompletable."""
        if len(prefix) != self.horizon:
            raise OracleError("prefix length must equal the search horizon")
        k = self.share_target.size
        shares = np.zeros(k)
        for t, ch in enumerate(prefix):
            u = int(ch)
            if u > k:
                raise OracleError(f"prefix symbol {ch!r} out of range")
            if u > 0:
                shares[u - 1] += self.slot_weights[t]
        deficit = np.maximum(self.share_target - shares, 0.0)
        if float(np.sum(deficit)) > self.tail_mass * (1.0 + 1e-12):
            return math.inf
        return float(np.maximum(shares, self.share_target) @ self.unit_powers)

    def is_optimal(self, prefix: str) -> bool:
        return self.prefix_energy(prefix) <= self.optimal_energy * (1.0 + self.gap_rtol)

    def is_optimal_up_to_relabeling(self, prefix: str) -> bool:
        symbols = [str(u + 1) for u in range(self.share_target.size)]
        for perm in itertools.permutations(symbols):
            table = str.maketrans(dict(zip(symbols, perm)))
            if self.is_optimal(prefix.translate(table)):
                return True
        return False


def optimal_schedule_oracle(net: NetworkInstance, delta: float,
                            r_star: np.ndarray, horizon: int,
                            targets: np.ndarray | None = None,
                            gap_rtol: float = 1e-9) -> OracleResult:
    """Exhaustively search length-`horizon` TDMA prefixes for minimal energy.

    Per-user rates are fixed at r_star, so a prefix plus a fractional
    completion over the geometric tail meets the rate floors iff no user's
    discounted share overshoots its target share and the leftover deficits
    fit in the tail mass delta^horizon. Every such prefix attains the same
    (optimal) energy; a prefix is accepted when its completed energy is
    within gap_rtol of the optimum.
    """
    k = net.n_users
    if k > 3:
        raise OracleError("oracle limited to at most 3 users")
    if horizon > 12:
        raise OracleError("oracle limited to horizon <= 12")
    r_star = np.asarray(r_star, dtype=float)
    targets = np.asarray(net.min_rates if targets is None else targets, dtype=float)
    share_target = targets / r_star
    ssum = float(np.sum(share_target))
    if ssum > 1.0 + 1e-7:
        raise OracleError("target shares exceed the schedule capacity")
    if ssum > 1.0:
        share_target = share_target / ssum  # pin the schedulability identity
    p_star = np.array([netmodel.tdma_power_of(net, i, float(r_star[i])) for i in range(k)])
    slot_w = (1.0 - delta) * delta ** np.arange(horizon)
    tail = delta ** horizon

    n_codes = (k + 1) ** horizon
    chunk = 1 << 19

    def chunk_energies(lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        codes = np.arange(lo, hi, dtype=np.int64)
        digits = np.empty((codes.size, horizon), dtype=np.int8)
        rem = codes.copy()
        for t in range(horizon - 1, -1, -1):
            digits[:, t] = rem % (k + 1)
            rem //= k + 1
        shares = np.empty((codes.size, k))
        for i in range(k):
            shares[:, i] = (digits == i + 1) @ slot_w
        # Optimal completion: serve each leftover deficit from the tail.
        deficit = np.maximum(share_target[np.newaxis, :] - shares, 0.0)
        completable = np.sum(deficit, axis=1) <= tail * (1.0 + 1e-12)
        energies = np.maximum(shares, share_target[np.newaxis, :]) @ p_star
        energies[~completable] = np.inf
        return energies, digits

    best = math.inf
    for lo in range(0, n_codes, chunk):       # pass 1: the optimum
        energies, _ = chunk_energies(lo, min(lo + chunk, n_codes))
        finite = energies[np.isfinite(energies)]
        if finite.size:
            best = min(best, float(np.min(finite)))
    if not math.isfinite(best):
        raise OracleError("no prefix admits a feasible completion")

    count = 0
    witness = None
    for lo in range(0, n_codes, chunk):       # pass 2: tie count + least witness
        energies, digits = chunk_energies(lo, min(lo + chunk, n_codes))
        hits = np.flatnonzero(energies <= best * (1.0 + gap_rtol))
        count += hits.size
        if witness is None and hits.size:
            # ascending code order is lexicographic order on the digit string
            witness = "".join(str(int(d)) for d in digits[hits[0]])

    return OracleResult(witness=witness, optimal_count=count,
                        optimal_energy=best, horizon=horizon, tail_mass=tail,
                        share_target=share_target, slot_weights=slot_w,
                        unit_powers=p_star, gap_rtol=gap_rtol)
