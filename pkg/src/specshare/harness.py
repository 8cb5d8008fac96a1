"""Monte-Carlo experiment runner: seeded channel draws, policy comparisons,
deterministic aggregation.

Channel draws use common random numbers across grid points: the unit
exponential draws are keyed by (seed, trial) only, and the sweep parameter
rescales them. The proposed policy's discounted power is then exactly flat
across cross-interference levels, while the stationary baseline responds
to the interference pointwise. Trials are independent tasks whose merge is
a keyed, order-independent fold, so results are byte-identical for any
worker count.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import baselines, its as its_mod, ldf as ldf_mod, netmodel, policy as policy_mod
from .dynamics import DynamicEvent, DynamicScenario, DynamicUser, check_epochwise_bound
from .its import ItsInfeasibleError
from .netmodel import NetworkInstance, PowerSet, SensingModel
from .rng import UserStreams, stream

_VERSION = "0.1.0"


@dataclass(frozen=True)
class ExperimentSpec:
    """Declarative experiment configuration.

    kind selects the sweep: "alpha-sweep" (cross-interference grid),
    "user-sweep" (population grid), "rate-sweep" (rate-floor grid),
    "single" (one point), "dynamic" (scripted entry/exit scenario).
    """

    kind: str = "alpha-sweep"
    alphas: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    user_counts: tuple = (2, 4, 6)
    rate_floors: tuple = (0.5, 1.0, 1.5)
    n_users: int = 2
    min_rate: float = 1.0
    alpha: float = 0.2              # fixed cross level for non-alpha sweeps
    trials: int = 20
    seed: int = 0
    horizon: int = 500
    delta: float = 0.95
    sigma2: float = 0.05            # noise power, watts
    theta: float = 1.0              # distress threshold, watts
    error_kind: str = "gaussian"
    error_param: float = 0.1        # variance (gaussian) or half-width (uniform)
    max_power: float = 1e9
    grid_points: int = 512
    monitoring: str = "perfect"     # "perfect" | "signal"
    channel_model: str = "exp"      # "exp" (|h|^2) | "rayleigh" (|h|)
    policies: tuple = ("proposed", "stationary", "npf")
    npf_duration: int = 1
    dynamic_users: tuple = ()       # rows (name, min_rate, primary)
    dynamic_events: tuple = ()      # rows (slot, kind, name, min_rate)

    def points(self) -> list[dict]:
        if self.kind == "alpha-sweep":
            return [{"param": a, "alpha": a, "n_users": self.n_users,
                     "min_rate": self.min_rate} for a in self.alphas]
        if self.kind == "user-sweep":
            return [{"param": k, "alpha": self.alpha, "n_users": int(k),
                     "min_rate": self.min_rate} for k in self.user_counts]
        if self.kind == "rate-sweep":
            return [{"param": r, "alpha": self.alpha, "n_users": self.n_users,
                     "min_rate": r} for r in self.rate_floors]
        if self.kind == "single":
            return [{"param": 0.0, "alpha": self.alpha, "n_users": self.n_users,
                     "min_rate": self.min_rate}]
        raise ValueError(f"kind {self.kind!r} has no grid")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ExperimentSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - fields
        if unknown:
            raise ValueError(f"unknown spec fields: {sorted(unknown)}")
        doc = dict(doc)
        for key in ("alphas", "user_counts", "rate_floors", "policies",
                    "dynamic_users", "dynamic_events"):
            if key in doc:
                doc[key] = tuple(tuple(v) if isinstance(v, list) else v for v in doc[key])
        return cls(**doc)


@dataclass
class PointAggregate:
    param: float
    policy: str
    n_trials: int
    n_feasible: int
    mean_power: float | None
    stderr_power: float | None
    mean_rate: float | None
    stderr_rate: float | None
    paired_saving: float | None = None   # vs stationary, both-feasible draws
    paired_n: int = 0


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    aggregates: list[PointAggregate]
    outcomes: list["TrialOutcome"]
    runtime_s: float

    def lookup(self, param: float, policy: str) -> PointAggregate:
        for a in self.aggregates:
            if a.policy == policy and math.isclose(a.param, param):
                return a
        raise KeyError((param, policy))

    def common_means(self, policy: str, metric: str = "power") -> dict[float, float]:
        """Per-point means over the draws feasible at every grid point.

        Fixing the draw composition across the sweep removes the
        feasibility-selection artifact from monotonicity comparisons.
        """
        points = self.spec.points()
        by_pt: dict[int, dict[int, TrialOutcome]] = {}
        for o in self.outcomes:
            by_pt.setdefault(o.point_idx, {})[o.trial] = o
        common = [tr for tr in range(self.spec.trials)
                  if all(by_pt[pi][tr].feasible.get(policy) for pi in range(len(points)))]
        out = {}
        for pi, point in enumerate(points):
            vals = [getattr(by_pt[pi][tr], metric)[policy] for tr in common]
            if vals:
                out[float(point["param"])] = float(np.mean(vals))
        return out

    def to_csv(self) -> str:
        lines = ["kind,param,policy,metric,mean,stderr,n_feasible,n_trials"]
        for a in self.aggregates:
            rows = [("avg_power", a.mean_power, a.stderr_power),
                    ("avg_rate", a.mean_rate, a.stderr_rate)]
            if a.policy != "stationary":
                rows.append(("paired_saving_vs_stationary", a.paired_saving,
                             float(a.paired_n)))
            for metric, m, s in rows:
                lines.append(",".join([
                    self.spec.kind, repr(float(a.param)), a.policy, metric,
                    "" if m is None else repr(m),
                    "" if s is None else repr(s),
                    str(a.n_feasible), str(a.n_trials)]))
        return "\n".join(lines) + "\n"

    def manifest(self) -> dict:
        return {"spec": self.spec.to_json(), "version": _VERSION,
                "runtime_s": self.runtime_s,
                "rng": "philox keyed by (seed, stream, trial[, point, user])"}


def _draw_gains(spec: ExperimentSpec, trial: int, k: int, alpha: float) -> np.ndarray:
    """Channel matrix from per-trial unit draws, rescaled by the sweep point."""
    k_max = max(k, spec.n_users, max(spec.user_counts, default=k))
    g = stream(spec.seed, 0, trial)
    direct_unit = g.exponential(1.0, size=k_max)
    cross_unit = g.exponential(1.0, size=(k_max, k_max))
    gains = alpha * cross_unit[:k, :k]
    np.fill_diagonal(gains, direct_unit[:k])
    if spec.channel_model == "rayleigh":
        gains = np.sqrt(gains)
    elif spec.channel_model != "exp":
        raise ValueError(f"unknown channel model {spec.channel_model!r}")
    return gains


def _build_net(spec: ExperimentSpec, gains: np.ndarray, min_rate: float) -> NetworkInstance:
    k = gains.shape[0]
    return NetworkInstance(
        num_primary=0, num_secondary=k, gains=gains,
        noise=np.full(k, spec.sigma2),
        power_sets=(PowerSet(spec.max_power, spec.grid_points),) * k,
        min_rates=np.full(k, min_rate), discount=spec.delta)


@dataclass
class TrialOutcome:
    point_idx: int
    trial: int
    feasible: dict[str, bool]
    power: dict[str, float]
    rate: dict[str, float]


def run_trial(spec: ExperimentSpec, point: dict, point_idx: int, trial: int) -> TrialOutcome:
    gains = _draw_gains(spec, trial, point["n_users"], point["alpha"])
    net = _build_net(spec, gains, point["min_rate"])
    k = net.n_users
    sensing = SensingModel.uniform_setup(
        k, net.noise, kind=spec.error_kind, param=spec.error_param, theta=spec.theta)

    feasible: dict[str, bool] = {}
    power: dict[str, float] = {}
    rate: dict[str, float] = {}

    stat = baselines.stationary_solve(net)
    if "stationary" in spec.policies:
        feasible["stationary"] = stat.feasible
        if stat.feasible:
            power["stationary"] = float(np.mean(stat.powers))
            rate["stationary"] = float(np.mean(net.min_rates))

    solution = constants = None
    if "proposed" in spec.policies or "npf" in spec.policies:
        try:
            if spec.monitoring == "signal":
                constants = its_mod.feasibility_constants(
                    net, sensing, net.min_rates * k)
                if not constants.feasible or not constants.discount_ok(spec.delta):
                    raise ItsInfeasibleError("constants infeasible at this draw")
            else:
                constants = its_mod.obedient_constants(net)
                if not constants.discount_ok(spec.delta):
                    raise ItsInfeasibleError("discount below the population minimum")
            solution = its_mod.its_solve(net, criterion=None, constants=constants)
        except ItsInfeasibleError:
            solution = None

    if "proposed" in spec.policies:
        feasible["proposed"] = solution is not None
        if solution is not None:
            rng = UserStreams(spec.seed, k, 1, point_idx, trial)
            run = ldf_mod.run_ldf(
                net, sensing if spec.monitoring == "signal" else None,
                solution, constants, spec.horizon,
                rng if spec.monitoring == "signal" else None,
                mode=spec.monitoring)
            m = policy_mod.discounted_metrics(run.trace, spec.delta)
            power["proposed"] = float(np.mean(m.avg_power))
            rate["proposed"] = float(np.mean(m.avg_rate))

    if "npf" in spec.policies:
        ok = solution is not None and stat.feasible
        feasible["npf"] = ok
        if ok:
            pf = baselines.PunishForgivePolicy(net, solution, constants, stat,
                                               duration=spec.npf_duration)
            rng = UserStreams(spec.seed, k, 2, point_idx, trial)
            trace = policy_mod.evaluate(pf, net, sensing, spec.horizon, rng)
            m = policy_mod.discounted_metrics(trace, spec.delta)
            power["npf"] = float(np.mean(m.avg_power))
            rate["npf"] = float(np.mean(m.avg_rate))

    return TrialOutcome(point_idx, trial, feasible, power, rate)


def run_experiment(spec: ExperimentSpec, threads: int = 1) -> ExperimentResult:
    """Run all grid points and trials; aggregation is order-independent."""
    t0 = time.monotonic()
    if spec.kind == "dynamic":
        raise ValueError("dynamic scenarios run through run_dynamic_spec")
    points = spec.points()
    tasks = [(pi, tr) for pi in range(len(points)) for tr in range(spec.trials)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(
                lambda pt: run_trial(spec, points[pt[0]], pt[0], pt[1]), tasks))
    else:
        outcomes = [run_trial(spec, points[pi], pi, tr) for pi, tr in tasks]

    by_key: dict[tuple[int, int], TrialOutcome] = {
        (o.point_idx, o.trial): o for o in outcomes}
    aggregates: list[PointAggregate] = []
    for pi, point in enumerate(points):
        for pol in spec.policies:
            rows = [by_key[(pi, tr)] for tr in range(spec.trials)]
            vals_p = [r.power[pol] for r in rows if r.feasible.get(pol)]
            vals_r = [r.rate[pol] for r in rows if r.feasible.get(pol)]
            n_ok = sum(1 for r in rows if r.feasible.get(pol))
            paired = [100.0 * (1.0 - r.power[pol] / r.power["stationary"])
                      for r in rows
                      if pol != "stationary" and r.feasible.get(pol)
                      and r.feasible.get("stationary")]
            aggregates.append(PointAggregate(
                param=float(point["param"]), policy=pol,
                n_trials=spec.trials, n_feasible=n_ok,
                mean_power=float(np.mean(vals_p)) if vals_p else None,
                stderr_power=_stderr(vals_p),
                mean_rate=float(np.mean(vals_r)) if vals_r else None,
                stderr_rate=_stderr(vals_r),
                paired_saving=float(np.mean(paired)) if paired else None,
                paired_n=len(paired)))
    return ExperimentResult(spec=spec, aggregates=aggregates, outcomes=outcomes,
                            runtime_s=time.monotonic() - t0)


def _stderr(vals: list[float]) -> float | None:
    if len(vals) < 2:
        return None
    return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))


def energy_saving_ratio(result: ExperimentResult, param: float,
                        baseline: str = "stationary",
                        proposed: str = "proposed") -> tuple[float | None, str]:
    """Percent energy saved by `proposed` over `baseline` at a grid point.

    Averaged over the draws where both policies are feasible (the ratio is
    undefined otherwise), per draw: 100 (1 - P_proposed / P_baseline).
    """
    points = result.spec.points()
    pi = next(i for i, pt in enumerate(points) if math.isclose(float(pt["param"]), param))
    pairs = [(o.power[proposed], o.power[baseline]) for o in result.outcomes
             if o.point_idx == pi and o.feasible.get(proposed) and o.feasible.get(baseline)]
    if not pairs:
        return None, f"no draw at param={param} has both policies feasible"
    ratios = [100.0 * (1.0 - p / b) for p, b in pairs]
    return float(np.mean(ratios)), "ok"


def saving_distribution(result: ExperimentResult, param: float,
                        baseline: str = "stationary",
                        proposed: str = "proposed") -> np.ndarray:
    """Per-draw savings (percent) over the both-feasible draws at a point."""
    points = result.spec.points()
    pi = next(i for i, pt in enumerate(points) if math.isclose(float(pt["param"]), param))
    return np.array([100.0 * (1.0 - o.power[proposed] / o.power[baseline])
                     for o in result.outcomes
                     if o.point_idx == pi and o.feasible.get(proposed)
                     and o.feasible.get(baseline)])


def run_dynamic_spec(spec: ExperimentSpec):
    """Scripted entry/exit scenario driven by the spec's dynamic block."""
    users = [DynamicUser(name=str(n), min_rate=float(r), primary=bool(p))
             for n, r, p in spec.dynamic_users]
    events = []
    for slot, kind, name, min_rate in spec.dynamic_events:
        if kind == "ENTER":
            events.append(DynamicEvent(slot=int(slot), kind="ENTER",
                                       user=DynamicUser(str(name), float(min_rate))))
        else:
            events.append(DynamicEvent(slot=int(slot), kind="EXIT", name=str(name)))
    scenario = DynamicScenario(users, events, horizon=spec.horizon,
                               delta=spec.delta, sigma2=spec.sigma2,
                               alpha=spec.alpha, max_power=spec.max_power,
                               gain_model="unit" if spec.channel_model == "unit" else "exp",
                               seed=spec.seed)
    result = scenario.run()
    report = check_epochwise_bound(result)
    return result, report
