"""Longest-distance-first scheduling.

Each slot the user farthest from its operating point transmits; everyone
tracks one number per user, the normalized future throughput r'_j(t), and
advances it by closed-form updates that depend only on the binary distress
outcome. Two monitoring modes:

- "perfect": the exact continuation decomposition
      transmitter: r' <- r'/delta - (1/delta - 1)     others: r' <- r'/delta
  with the invariant sum_j r'_j = 1 and r' in [0, 1] for delta >= delta_min.
- "signal": the distress-feedback updates with the deviation bounds b and
  the sole-transmitter distress probabilities folded in; r' is clamped to
  [0, 1] with a logged warning if a harsh draw pushes it outside.

Scheduler memory is exactly (t, r'): no other history is consulted.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import netmodel
from .netmodel import NetworkInstance, SensingModel
from .its import FeasibilityConstants, ItsSolution
from .policy import Policy, PolicyTrace
from .rng import UserStreams

log = logging.getLogger("specshare.ldf")

SNAP_TOL = 1e-12     # float dust absorbed at the 0/1 edges in perfect mode
BOUND_SLACK = 1e-9   # absolute slack for the convergence-bound assertion


class LdfInvariantError(RuntimeError):
    """The continuation state left the self-generating region."""


@dataclass(frozen=True)
class ContinuationState:
    """Scheduler state: slot index and normalized future throughputs."""

    t: int
    r_prime: np.ndarray
    mode: str = "perfect"   # "perfect" | "signal"

    def __post_init__(self):
        rp = np.asarray(self.r_prime, dtype=float)
        rp.flags.writeable = False
        object.__setattr__(self, "r_prime", rp)
        if self.mode not in ("perfect", "signal"):
            raise ValueError(f"unknown monitoring mode {self.mode!r}")

    def gamma(self, r_star: np.ndarray) -> np.ndarray:
        """Continuation throughputs gamma_j = r'_j * r_j*."""
        return self.r_prime * np.asarray(r_star, dtype=float)


def initial_state(solution: ItsSolution, mode: str = "perfect") -> ContinuationState:
    with np.errstate(invalid="ignore", divide="ignore"):
        rp = np.where(solution.r_star > 0.0,
                      solution.targets / np.where(solution.r_star > 0.0, solution.r_star, 1.0),
                      0.0)
    return ContinuationState(t=0, r_prime=rp, mode=mode)


@dataclass(frozen=True)
class ScheduleDecision:
    t: int
    transmitter: int | None
    distances: np.ndarray
    power: float

    def to_json(self, r_prime: np.ndarray, y: int) -> str:
        return json.dumps({
            "t": self.t,
            "i_star": self.transmitter,
            "d": [None if math.isinf(v) else v for v in self.distances.tolist()],
            "r_prime": r_prime.tolist(),
            "y": int(y),
        })


def _distances(r_prime: np.ndarray, constants: FeasibilityConstants,
               mode: str, form: str) -> np.ndarray:
    """Distance of every user from its operating point.

    Saturates to +inf at r'_j >= 1: the user must transmit now or its
    target becomes unreachable. In perfect-monitoring mode the distress
    factor is dropped (it would be identically zero) and the distance
    reduces to a strictly increasing function of r'_j.
    """
    mu = constants.mu_lower
    with np.errstate(divide="ignore"):
        base = np.where(r_prime >= 1.0, np.inf, (r_prime - mu) / (1.0 - r_prime))
    if mode == "perfect":
        return base
    if form == "alg2":
        return base * constants.rho_tdma
    if form == "prose":
        k = r_prime.size
        off = ~np.eye(k, dtype=bool)
        spread = np.sum(np.where(off, -constants.rho_tdma[:, None] / constants.b, 0.0), axis=1)
        return np.where(r_prime >= 1.0, np.inf,
                        (r_prime - mu) / (1.0 - r_prime + spread))
    raise ValueError(f"unknown distance form {form!r}")


def distance(state: ContinuationState, constants: FeasibilityConstants, j: int,
             form: str = "alg2") -> float:
    return float(_distances(state.r_prime, constants, state.mode, form)[j])


def select_transmitter(state: ContinuationState, constants: FeasibilityConstants,
                       form: str = "alg2") -> tuple[int | None, np.ndarray]:
    """Argmax-distance among users still owed throughput; ties to lowest index."""
    d = _distances(state.r_prime, constants, state.mode, form)
    owed = state.r_prime > 0.0
    if not np.any(owed):
        return None, d
    masked = np.where(owed, d, -np.inf)
    return int(np.argmax(masked)), d


def step(state: ContinuationState, constants: FeasibilityConstants, delta: float,
         observed_y: int, solution: ItsSolution, form: str = "alg2",
         _selection: tuple[int | None, np.ndarray] | None = None
         ) -> tuple[ScheduleDecision, ContinuationState]:
    """One slot: pick the transmitter, then advance r' per the observed signal."""
    i_star, d = _selection if _selection is not None else \
        select_transmitter(state, constants, form)
    k = len(state.r_prime)
    rp = state.r_prime.copy()
    inv_d = 1.0 / delta
    gain = inv_d - 1.0

    if i_star is None:
        nxt = rp * inv_d  # nothing owed; all-zero state stays put
    elif state.mode == "perfect":
        nxt = rp * inv_d
        total = float(np.sum(rp))
        if abs(total - 1.0) < 1e-6:
            # closure form of the same update: algebraically identical on the
            # sum=1 manifold, but numerically sum-pinning (the raw form sits on
            # an unstable fixed point whose float drift grows like delta^-t)
            nxt[i_star] = total - (float(np.sum(nxt)) - rp[i_star] * inv_d)
        else:
            nxt[i_star] = rp[i_star] * inv_d - gain
        # absorb float dust at the region's edges, fault on real escapes
        tiny_neg = (nxt > -SNAP_TOL) & (nxt < 0.0)
        tiny_high = (nxt > 1.0) & (nxt < 1.0 + SNAP_TOL)
        nxt[tiny_neg] = 0.0
        nxt[tiny_high] = 1.0
        if np.any(nxt < 0.0) or np.any(nxt > 1.0):
            raise LdfInvariantError(
                f"slot {state.t}: continuation state left [0,1] "
                f"(min {nxt.min():.6g}, max {nxt.max():.6g}); "
                f"discount {delta} is below the feasibility threshold "
                f"{constants.delta_min:.6g}?")
    else:
        others = np.arange(k) != i_star
        minus_b = -constants.b[i_star]
        if observed_y == 0:
            kappa = constants.rho_tdma[i_star] / minus_b
            nxt = rp * inv_d
            nxt[others] += gain * kappa[others]
            nxt[i_star] = rp[i_star] * inv_d - gain * (1.0 + float(np.sum(kappa[others])))
        else:
            kappa = (1.0 - constants.rho_tdma[i_star]) / minus_b
            nxt = rp * inv_d
            nxt[others] -= gain * kappa[others]
            nxt[i_star] = rp[i_star] * inv_d - gain * (1.0 - float(np.sum(kappa[others])))
        if np.any(nxt < 0.0) or np.any(nxt > 1.0):
            log.warning("slot %d: clamping continuation state to [0,1] "
                        "(min %.4g, max %.4g)", state.t, nxt.min(), nxt.max())
            nxt = np.clip(nxt, 0.0, 1.0)

    power = float(solution.p_star[i_star]) if i_star is not None else 0.0
    decision = ScheduleDecision(t=state.t, transmitter=i_star, distances=d, power=power)
    return decision, ContinuationState(t=state.t + 1, r_prime=nxt, mode=state.mode)


@dataclass(frozen=True)
class LdfRun:
    trace: PolicyTrace
    decisions: list[ScheduleDecision]
    r_prime_history: np.ndarray   # (T, K) state entering each slot
    final_state: ContinuationState

    def decisions_jsonl(self) -> str:
        lines = []
        for dec in self.decisions:
            lines.append(dec.to_json(r_prime=self.r_prime_history[dec.t],
                                     y=int(self.trace.signals[dec.t])))
        return "\n".join(lines) + "\n"


def run_ldf(net: NetworkInstance, sensing: SensingModel | None,
            solution: ItsSolution, constants: FeasibilityConstants,
            horizon: int, rng: UserStreams | None = None, *,
            mode: str = "perfect", form: str = "alg2",
            targets: np.ndarray | None = None,
            check_bound: bool | None = None,
            conservation_tol: float = 1e-12) -> LdfRun:
    """Run the scheduler for `horizon` slots and record trace + decisions.

    In perfect-monitoring mode the convergence bound
        |(1-delta) sum_{tau<=t} delta^tau r_i^tau - target_i| <= r_i* delta^(t+1)
    is asserted per user at every slot, and the conservation identity
    sum_j gamma_j / r_j* = 1 is checked to `conservation_tol`.
    """
    k = net.n_users
    delta = net.discount
    targets = solution.targets if targets is None else np.asarray(targets, float)
    if check_bound is None:
        check_bound = mode == "perfect"
    if mode == "signal" and (sensing is None or rng is None):
        raise ValueError("signal mode needs a sensing model and rng streams")

    state = ContinuationState(t=0, r_prime=initial_state(solution, mode).r_prime, mode=mode)
    share0 = float(np.sum(state.r_prime))

    powers = np.zeros((horizon, k))
    signals = np.zeros(horizon, dtype=np.int64)
    rates = np.zeros((horizon, k))
    rp_hist = np.zeros((horizon, k))
    decisions: list[ScheduleDecision] = []
    partial = np.zeros(k)
    disc = 1.0  # delta^t

    for t in range(horizon):
        rp_hist[t] = state.r_prime
        selection = select_transmitter(state, constants, form)
        i_star = selection[0]
        p = np.zeros(k)
        if i_star is not None:
            p[i_star] = solution.p_star[i_star]
        y = 0
        if i_star is not None and sensing is not None and rng is not None:
            y = netmodel.system_distress(net, sensing, p, rng)
        decision, state = step(state, constants, delta, y, solution, form,
                               _selection=selection)
        powers[t] = p
        signals[t] = y
        if i_star is not None:
            # sole transmitter: the rate reduces to the no-interference form
            rates[t, i_star] = math.log2(
                1.0 + p[i_star] * float(net.gains[i_star, i_star] / net.noise[i_star]))
        decisions.append(decision)

        partial += (1.0 - delta) * disc * rates[t]
        disc *= delta
        if check_bound:
            bound = solution.r_star * disc  # disc is already delta^(t+1)
            gap = np.abs(partial - targets)
            bad = gap > bound * (1.0 + BOUND_SLACK) + BOUND_SLACK
            if np.any(bad):
                u = int(np.argmax(gap - bound))
                raise LdfInvariantError(
                    f"convergence bound violated at slot {t} for user {u}: "
                    f"|{partial[u]:.12g} - {targets[u]:.12g}| > "
                    f"{bound[u]:.12g}")
        if mode == "perfect":
            drift = abs(float(np.sum(state.r_prime)) - share0)
            if drift > conservation_tol:
                raise LdfInvariantError(
                    f"conservation drift {drift:.3g} at slot {t}")

    return LdfRun(trace=PolicyTrace(powers=powers, signals=signals, rates=rates),
                  decisions=decisions, r_prime_history=rp_hist, final_state=state)


class LdfPolicy(Policy):
    """Policy-interface wrapper so the scheduler can run under evaluate().

    Applies the previous slot's update from the observed signal in the
    history, then selects this slot's transmitter.
    """

    tdma = True

    def __init__(self, net: NetworkInstance, solution: ItsSolution,
                 constants: FeasibilityConstants, mode: str = "perfect",
                 form: str = "alg2"):
        self.net = net
        self.solution = solution
        self.constants = constants
        self.mode = mode
        self.form = form
        self.reset()

    def reset(self):
        self._state = initial_state(self.solution, self.mode)
        self._seen = 0

    def action(self, t, history):
        if self._seen != t:
            raise RuntimeError("LdfPolicy must be driven slot by slot")
        if t > 0:
            _, self._state = step(self._state, self.constants, self.net.discount,
                                  int(history[-1]), self.solution, self.form)
        self._seen = t + 1
        i_star, _ = select_transmitter(self._state, self.constants, self.form)
        p = np.zeros(self.net.n_users)
        if i_star is not None:
            p[i_star] = self.solution.p_star[i_star]
        return p
