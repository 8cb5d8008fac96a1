"""Policies, traces, and discounted throughput/energy accounting.

A policy maps (slot index, distress-signal history) to a joint power
profile; evaluation rolls it forward against the network and sensing
models and records a PolicyTrace. Metrics are computed on realized sample
paths; expectations over signal randomness are recovered by seed-averaged
trials in the harness.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import netmodel
from .netmodel import ModelError, NetworkInstance, SensingModel
from .rng import UserStreams


class PolicyContractError(RuntimeError):
    """A policy emitted an illegal profile during evaluation."""


class Policy:
    """Behavioral interface: produce a power profile for each slot.

    `tdma` declares that the policy emits at most one positive power per
    slot; evaluation enforces the declaration.
    """

    tdma: bool = False

    def reset(self) -> None:  # stateful policies override
        pass

    def action(self, t: int, history: Sequence[int]) -> np.ndarray:
        raise NotImplementedError


class SilentPolicy(Policy):
    tdma = True

    def __init__(self, n_users: int):
        self.n_users = n_users

    def action(self, t, history):
        return np.zeros(self.n_users)


class StationaryPolicy(Policy):
    """Fixed profile every slot, regardless of history."""

    def __init__(self, profile: Sequence[float]):
        self.profile = np.asarray(profile, dtype=float)

    def action(self, t, history):
        return self.profile.copy()


class RoundRobinPolicy(Policy):
    """Cyclic TDMA: order[k] transmits in slots t = k mod len(order)."""

    tdma = True

    def __init__(self, n_users: int, order: Sequence[int], powers: Sequence[float]):
        self.n_users = n_users
        self.order = list(order)
        self.powers = np.asarray(powers, dtype=float)

    def action(self, t, history):
        p = np.zeros(self.n_users)
        u = self.order[t % len(self.order)]
        p[u] = self.powers[u]
        return p


class SchedulePolicy(Policy):
    """Fixed finite transmitter schedule (None = idle), then silence."""

    tdma = True

    def __init__(self, n_users: int, schedule: Sequence[int | None],
                 powers: Sequence[float]):
        self.n_users = n_users
        self.schedule = list(schedule)
        self.powers = np.asarray(powers, dtype=float)

    def action(self, t, history):
        p = np.zeros(self.n_users)
        if t < len(self.schedule) and self.schedule[t] is not None:
            u = self.schedule[t]
            p[u] = self.powers[u]
        return p


@dataclass(frozen=True)
class PolicyTrace:
    """Realized record of one evaluation: profiles, signals, rates per slot."""

    powers: np.ndarray   # (T, K) watts
    signals: np.ndarray  # (T,) binary
    rates: np.ndarray    # (T, K) bits/s/Hz

    def __post_init__(self):
        T = self.powers.shape[0]
        if self.signals.shape != (T,) or self.rates.shape != self.powers.shape:
            raise ModelError("trace arrays must share the horizon")

    @property
    def horizon(self) -> int:
        return self.powers.shape[0]

    @property
    def n_users(self) -> int:
        return self.powers.shape[1]

    def to_jsonl(self) -> str:
        lines = []
        for t in range(self.horizon):
            lines.append(json.dumps({
                "t": t,
                "p": self.powers[t].tolist(),
                "y": int(self.signals[t]),
                "r": self.rates[t].tolist(),
            }))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class DiscountedMetrics:
    """(1 - delta)-normalized discounted averages over a realized trace."""

    avg_rate: np.ndarray    # R_i, bits/s/Hz
    avg_power: np.ndarray   # P_i, watts
    tail_residual: float    # delta**T, the untracked geometric mass

    def to_json(self) -> dict:
        return {"avg_rate": self.avg_rate.tolist(),
                "avg_power": self.avg_power.tolist(),
                "tail_residual": self.tail_residual}


def evaluate(policy: Policy, net: NetworkInstance, sensing: SensingModel,
             horizon: int, rng: UserStreams) -> PolicyTrace:
    """Roll a policy forward for `horizon` slots and record the trace."""
    k = net.n_users
    powers = np.zeros((horizon, k))
    signals = np.zeros(horizon, dtype=np.int64)
    rates = np.zeros((horizon, k))
    history: list[int] = []
    policy.reset()
    for t in range(horizon):
        p = np.asarray(policy.action(t, history), dtype=float)
        try:
            net.check_profile(p)
        except ModelError as exc:
            raise PolicyContractError(f"slot {t}: {exc}") from exc
        if policy.tdma and int(np.count_nonzero(p > 0)) > 1:
            raise PolicyContractError(
                f"slot {t}: tdma policy emitted {np.count_nonzero(p > 0)} transmitters")
        powers[t] = p
        rates[t] = netmodel.all_rates(net, p)
        y = netmodel.system_distress(net, sensing, p, rng) if np.any(p > 0) else 0
        signals[t] = y
        history.append(y)
    return PolicyTrace(powers=powers, signals=signals, rates=rates)


def discounted_metrics(trace: PolicyTrace, delta: float) -> DiscountedMetrics:
    """R_i = (1-delta) sum_t delta^t r_i^t and P_i likewise on powers."""
    if trace.horizon == 0:
        raise ModelError("trace is empty")
    w = (1.0 - delta) * delta ** np.arange(trace.horizon)
    return DiscountedMetrics(
        avg_rate=w @ trace.rates,
        avg_power=w @ trace.powers,
        tail_residual=delta ** trace.horizon,
    )


def throughput_energy_ratio(net: NetworkInstance, i: int, r_tdma: float) -> float:
    """Watts of discounted power per unit discounted rate for a TDMA user.

    P_i = ratio * R_i for any TDMA policy in which user i always transmits
    at instantaneous rate r_tdma.
    """
    if r_tdma <= 0:
        raise ModelError("instantaneous rate must be positive")
    return float(net.noise[i] / net.gains[i, i]) * (2.0 ** r_tdma - 1.0) / r_tdma


def deviation_profitable(net: NetworkInstance, i_slot_user: int, p_i: float,
                         j: int, p_j: float) -> bool:
    """True iff user j gains by also transmitting in user i's slot.

    Condition: p_j g_jj > p_i g_ij, independent of the discount factor.
    """
    if i_slot_user == j:
        raise ModelError("deviator must differ from the slot owner")
    if p_i <= 0 or p_j <= 0:
        raise ModelError("both powers must be positive")
    return p_j * float(net.gains[j, j]) > p_i * float(net.gains[i_slot_user, j])


@dataclass(frozen=True)
class DeviationReport:
    """Pairs (slot owner, deviator) for which a two-slot deviation profits."""

    flagged: tuple[tuple[int, int], ...]

    @property
    def deviation_proof(self) -> bool:
        return len(self.flagged) == 0


def certify_deviation_proof(net: NetworkInstance, schedule: Sequence[int | None],
                            powers: Sequence[float]) -> DeviationReport:
    """Exhaustive pairwise two-slot deviation check over a TDMA schedule.

    `schedule` lists the transmitter per slot (None = idle); `powers` gives
    each user's fixed transmit level. Every ordered pair (i scheduled, j
    scheduled, j != i) is tested with the slot-deviation condition.
    """
    powers = np.asarray(powers, dtype=float)
    scheduled = sorted({u for u in schedule if u is not None})
    for u in scheduled:
        if powers[u] <= 0:
            raise ModelError(f"scheduled user {u} has no positive power")
    flagged = []
    for i in scheduled:
        for j in scheduled:
            if j == i:
                continue
            if deviation_profitable(net, i, float(powers[i]), j, float(powers[j])):
                flagged.append((i, j))
    return DeviationReport(flagged=tuple(flagged))
