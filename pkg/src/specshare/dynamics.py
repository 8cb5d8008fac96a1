"""Epoch management for users entering and leaving the network.

A new epoch begins when ENTER/EXIT signals arrive at a slot boundary
(lossless, instantaneous broadcasts; no partial slots). The rate solver is
re-run on the new population, feeding each surviving user its continuation
throughput gamma_i = r'_i * r_i^(k-1) and each entrant its rate floor; the
scheduler restarts from r'_i = target_i / r_i^(k). An infeasible new
population rejects the epoch and the previous one continues. Parameter
changes (e.g. gains) reuse the same mechanism: re-solve with continuation
targets on the same population.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import its as its_mod
from .its import Criterion, ItsInfeasibleError, ItsSolution, WeightedSumEnergy, obedient_constants
from .ldf import ContinuationState, LdfInvariantError, run_ldf
from .netmodel import NetworkInstance, PowerSet
from .rng import UserStreams, stream


class EpochRejectedError(RuntimeError):
    """The post-change population cannot be scheduled; the epoch is refused."""


@dataclass(frozen=True)
class DynamicUser:
    name: str
    min_rate: float
    primary: bool = True


@dataclass(frozen=True)
class DynamicEvent:
    slot: int
    kind: str                      # "ENTER" | "EXIT"
    user: DynamicUser | None = None
    name: str | None = None        # EXIT refers to a user by name

    def label(self) -> str:
        who = self.user.name if self.user is not None else self.name
        return f"{self.kind}:{who}"


def on_membership_change(prev_state: ContinuationState | None,
                         prev_solution: ItsSolution | None,
                         carried: dict[int, int],
                         entrant_targets: dict[int, float],
                         net_new: NetworkInstance,
                         criterion: Criterion | None = None,
                         precision: float = 1e-9
                         ) -> tuple[ItsSolution, ContinuationState]:
    """Re-solve rates for the new population and restart the scheduler.

    `carried` maps old user column -> new user column for survivors, whose
    targets are their continuation throughputs from the outgoing state;
    `entrant_targets` maps new columns to rate floors. Raises
    EpochRejectedError when the new population is unschedulable.
    """
    k = net_new.n_users
    targets = np.zeros(k)
    if prev_state is not None and prev_solution is not None:
        gamma = prev_state.gamma(prev_solution.r_star)
        for old, new in carried.items():
            targets[new] = gamma[old]
    for idx, floor in entrant_targets.items():
        targets[idx] = floor

    constants = obedient_constants(net_new, targets)
    if net_new.discount < constants.delta_min:
        raise EpochRejectedError(
            f"discount {net_new.discount} below the population's minimum "
            f"{constants.delta_min:.6g}")
    try:
        solution = its_mod.its_solve(net_new, criterion=criterion,
                                     precision=precision, constants=constants,
                                     targets=targets)
    except ItsInfeasibleError as exc:
        raise EpochRejectedError(f"rate selection infeasible: {exc}") from exc
    with np.errstate(divide="ignore", invalid="ignore"):
        rp = np.where(solution.r_star > 0.0,
                      targets / np.where(solution.r_star > 0.0, solution.r_star, 1.0),
                      0.0)
    return solution, ContinuationState(t=0, r_prime=rp, mode="perfect")


@dataclass
class EpochRecord:
    start: int
    length: int
    events: tuple[str, ...]
    users: tuple[str, ...]
    r_star: np.ndarray
    targets: np.ndarray           # gamma at the boundary (floors for entrants)
    rejected_events: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"t_k": self.start, "event": list(self.events),
                "users": list(self.users), "r_k": self.r_star.tolist(),
                "gamma": self.targets.tolist(),
                "rejected": list(self.rejected_events)}


@dataclass
class DynamicResult:
    horizon: int
    delta: float
    user_names: list[str]
    min_rates: dict[str, float]
    entry_slot: dict[str, int]
    exit_slot: dict[str, int | None]
    rates: np.ndarray             # (T, n_names) realized per-slot rates
    powers: np.ndarray
    epochs: list[EpochRecord]

    def epoch_log_json(self) -> str:
        return json.dumps([e.to_json() for e in self.epochs], indent=2)


class DynamicScenario:
    """Scripted entry/exit scenario over a shared channel.

    Gains live in a registry keyed by stable user ids, so membership
    changes never silently redraw the channels of users already present.
    gain_model "unit" pins g_ii = 1, g_ij = alpha; "exp" draws exponential
    gains (mean 1 direct, mean alpha cross) from seeded streams.
    """

    def __init__(self, users: list[DynamicUser], events: list[DynamicEvent],
                 horizon: int, delta: float, sigma2: float = 0.05,
                 alpha: float = 0.2, max_power: float = 1e6,
                 gain_model: str = "unit", seed: int = 0,
                 criterion: Criterion | None = None, precision: float = 1e-9):
        self.users0 = list(users)
        self.events = sorted(events, key=lambda e: e.slot)
        self.horizon = horizon
        self.delta = delta
        self.sigma2 = sigma2
        self.alpha = alpha
        self.max_power = max_power
        self.gain_model = gain_model
        self.seed = seed
        self.criterion = criterion or WeightedSumEnergy()
        self.precision = precision
        self._uid: dict[str, int] = {}
        self._direct: dict[int, float] = {}
        self._cross: dict[tuple[int, int], float] = {}

    # -- channel registry -------------------------------------------------

    def _id(self, name: str) -> int:
        if name not in self._uid:
            self._uid[name] = len(self._uid)
        return self._uid[name]

    def _direct_gain(self, uid: int) -> float:
        if uid not in self._direct:
            if self.gain_model == "unit":
                self._direct[uid] = 1.0
            else:
                self._direct[uid] = float(stream(self.seed, 1, uid).exponential(1.0))
        return self._direct[uid]

    def _cross_gain(self, a: int, b: int) -> float:
        if (a, b) not in self._cross:
            if self.gain_model == "unit":
                self._cross[(a, b)] = self.alpha
            else:
                self._cross[(a, b)] = float(
                    stream(self.seed, 2, a, b).exponential(self.alpha))
        return self._cross[(a, b)]

    def _build_net(self, active: list[DynamicUser]) -> NetworkInstance:
        k = len(active)
        ids = [self._id(u.name) for u in active]
        gains = np.empty((k, k))
        for i, gi in enumerate(ids):
            for j, gj in enumerate(ids):
                gains[i, j] = self._direct_gain(gi) if i == j else self._cross_gain(gi, gj)
        n_primary = sum(1 for u in active if u.primary)
        # the static model wants positive floors; a zero-floor user is carried
        # via its solver target, so the instance only stores a placeholder
        floors = np.array([max(u.min_rate, 2.0 ** -40) for u in active])
        return NetworkInstance(
            num_primary=n_primary, num_secondary=k - n_primary,
            gains=gains, noise=np.full(k, self.sigma2),
            power_sets=(PowerSet(self.max_power),) * k,
            min_rates=floors, discount=self.delta)

    # -- simulation --------------------------------------------------------

    def run(self) -> DynamicResult:
        active = list(self.users0)
        boundaries = sorted({e.slot for e in self.events if 0 < e.slot < self.horizon})
        segments = list(zip([0] + boundaries, boundaries + [self.horizon]))
        events_at = {b: [e for e in self.events if e.slot == b] for b in boundaries}

        names: list[str] = []
        entry: dict[str, int] = {}
        exits: dict[str, int | None] = {}
        floors: dict[str, float] = {}

        def ensure(u: DynamicUser, slot: int):
            if u.name not in names:
                names.append(u.name)
                entry[u.name] = slot
                exits[u.name] = None
                floors[u.name] = u.min_rate

        for u in active:
            ensure(u, 0)

        rates = np.zeros((self.horizon, 0))
        powers = np.zeros((self.horizon, 0))

        def widen(n_cols):
            nonlocal rates, powers
            if n_cols > rates.shape[1]:
                pad = n_cols - rates.shape[1]
                rates = np.hstack([rates, np.zeros((self.horizon, pad))])
                powers = np.hstack([powers, np.zeros((self.horizon, pad))])

        epochs: list[EpochRecord] = []
        state: ContinuationState | None = None
        solution: ItsSolution | None = None
        net: NetworkInstance | None = None
        col_of: dict[str, int] = {}

        for seg_start, seg_end in segments:
            rejected: list[str] = []
            applied: list[str] = []
            if seg_start == 0:
                candidate = list(active)
                carried: dict[int, int] = {}
                entrants = {i: u.min_rate for i, u in enumerate(candidate)}
            else:
                candidate = list(active)
                for ev in events_at.get(seg_start, []):
                    if ev.kind == "ENTER" and ev.user is not None:
                        candidate.append(ev.user)
                        applied.append(ev.label())
                    elif ev.kind == "EXIT":
                        candidate = [u for u in candidate if u.name != ev.name]
                        applied.append(ev.label())
                carried = {col_of[u.name]: idx for idx, u in enumerate(candidate)
                           if u.name in col_of and exits[u.name] is None}
                entrants = {idx: u.min_rate for idx, u in enumerate(candidate)
                            if u.name not in col_of}

            net_candidate = self._build_net(candidate)
            try:
                solution_new, state_new = on_membership_change(
                    state, solution, carried, entrants, net_candidate,
                    self.criterion, self.precision)
            except EpochRejectedError as exc:
                if seg_start == 0:
                    raise
                # epoch rejected: same population, same rates, same state
                rejected = [f"{r} ({exc})" for r in applied]
                applied = []
                candidate = list(active)
                net_candidate = net
                gamma = state.gamma(solution.r_star)
                solution_new = dataclasses.replace(solution, targets=gamma)
                state_new = state

            active = candidate
            net = net_candidate
            solution = solution_new
            state = state_new
            for u in active:
                ensure(u, seg_start)
            for ev in events_at.get(seg_start, []):
                if ev.kind == "EXIT" and ev.label() in applied:
                    exits[ev.name] = seg_start
            col_of = {u.name: idx for idx, u in enumerate(active)}
            widen(len(names))

            run = run_ldf(net, None, solution, obedient_constants(net),
                          seg_end - seg_start, None, mode="perfect",
                          targets=solution.targets)
            state = run.final_state
            cols = [names.index(u.name) for u in active]
            rates[seg_start:seg_end, cols] = run.trace.rates
            powers[seg_start:seg_end, cols] = run.trace.powers
            epochs.append(EpochRecord(
                start=seg_start, length=seg_end - seg_start,
                events=tuple(applied) if seg_start else ("START",),
                users=tuple(u.name for u in active),
                r_star=solution.r_star.copy(), targets=solution.targets.copy(),
                rejected_events=tuple(rejected)))

        return DynamicResult(
            horizon=self.horizon, delta=self.delta, user_names=names,
            min_rates=floors, entry_slot=entry, exit_slot=exits,
            rates=rates, powers=powers, epochs=epochs)


# ---------------------------------------------------------------------------
# epoch-wise convergence accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochBoundReport:
    holds: bool
    worst_slack: float            # most negative margin bound - |distance|
    telescoping_ok: bool
    max_telescoping_err: float
    details: list[dict] = field(default_factory=list)


def check_epochwise_bound(result: DynamicResult, tol: float = 1e-9) -> EpochBoundReport:
    """Verify the per-epoch convergence bound and the telescoping identity.

    Within epoch l starting at t_l, for every active user i and t in the
    epoch:  |(1-d) sum_{tau=t_l..t} d^(tau-t_l) r_i^tau - gamma_i(t_l)|
            <= r_i^(l) d^(t-t_l+1).
    Telescoping: for a user present since entry with floor R, the
    cumulative shortfall at each epoch boundary equals the discounted
    continuation the scheduler carries there.
    """
    d = result.delta
    holds = True
    worst = math.inf
    details: list[dict] = []
    tel_err = 0.0

    for ep in result.epochs:
        cols = [result.user_names.index(n) for n in ep.users]
        seg = result.rates[ep.start:ep.start + ep.length, cols]
        disc = (1.0 - d) * d ** np.arange(ep.length)
        partial = np.cumsum(seg * disc[:, np.newaxis], axis=0)
        bound = ep.r_star[np.newaxis, :] * d ** (np.arange(ep.length) + 1)[:, np.newaxis]
        gap = np.abs(partial - ep.targets[np.newaxis, :])
        slack = bound - gap
        worst = min(worst, float(np.min(slack)))
        ok = bool(np.all(gap <= bound + tol))
        holds = holds and ok
        details.append({"t_k": ep.start, "holds": ok,
                        "worst_slack": float(np.min(slack))})

    for name in result.user_names:
        t0 = result.entry_slot[name]
        t_end = result.exit_slot[name] or result.horizon
        col = result.user_names.index(name)
        floor = result.min_rates[name]
        cum = 0.0
        for ep in result.epochs:
            if ep.start < t0 or ep.start >= t_end or name not in ep.users:
                continue
            idx = ep.users.index(name)
            gamma_here = ep.targets[idx]
            expected = (floor - cum) / d ** (ep.start - t0)
            err = abs(expected - gamma_here)
            tel_err = max(tel_err, err)
            w = (1.0 - d) * d ** (np.arange(ep.start, ep.start + ep.length) - t0)
            cum += float(np.sum(w * result.rates[ep.start:ep.start + ep.length, col]))

    return EpochBoundReport(holds=holds, worst_slack=worst,
                            telescoping_ok=tel_err <= tol,
                            max_telescoping_err=tel_err, details=details)
