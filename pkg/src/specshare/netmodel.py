"""Static network model for slotted multi-user spectrum sharing.

Implements:
- SINR throughput  r_i(p) = log2(1 + p_i g_ii / (sum_{j != i} p_j g_ji + sigma_i^2))
- local interference temperature  I_i(p_-i) = sum_{j != i} p_j g_ji + sigma_i^2
- unbiased sensing with additive error and a two-level mean-preserving
  quantizer (reconstruction values are conditional means of the estimate
  above/below the threshold, evaluated at zero interference)
- binary distress signals: user i signals when its interference estimate
  exceeds theta_i;  P(y_i=1 | p) = P(eps_i > theta_i - I_i(p_-i))
- the system distress signal y = OR of the transmitting users' signals

All types are immutable after construction. Operations are pure except
`system_distress`, which draws from caller-owned per-user streams.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import UserStreams

_MEMBER_TOL = 1e-9  # relative slack when checking p against [0, p_max]


class ModelError(ValueError):
    """Violation of a model contract (bad index, silent sensor, off-grid power)."""


# ---------------------------------------------------------------------------
# sensing-error distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianError:
    """Zero-mean Gaussian estimation error with the given variance."""

    variance: float

    def __post_init__(self):
        if self.variance <= 0:
            raise ModelError("Gaussian error variance must be positive")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def pdf(self, x: float) -> float:
        s = self.std
        return math.exp(-0.5 * (x / s) ** 2) / (s * math.sqrt(2.0 * math.pi))

    def cdf(self, x: float) -> float:
        return 0.5 * math.erfc(-x / (self.std * math.sqrt(2.0)))

    def sf(self, x: float) -> float:
        """P(eps > x), numerically stable in the far tail."""
        return 0.5 * math.erfc(x / (self.std * math.sqrt(2.0)))

    def integration_bounds(self) -> tuple[float, float]:
        # +-13 sd leaves < 1e-38 of mass outside, far below quadrature tol
        return (-13.0 * self.std, 13.0 * self.std)


@dataclass(frozen=True)
class UniformError:
    """Zero-mean uniform estimation error on [-half_width, +half_width]."""

    half_width: float

    def __post_init__(self):
        if self.half_width <= 0:
            raise ModelError("uniform error half width must be positive")

    def pdf(self, x: float) -> float:
        return 1.0 / (2.0 * self.half_width) if abs(x) <= self.half_width else 0.0

    def cdf(self, x: float) -> float:
        a = self.half_width
        if x <= -a:
            return 0.0
        if x >= a:
            return 1.0
        return (x + a) / (2.0 * a)

    def sf(self, x: float) -> float:
        return 1.0 - self.cdf(x)

    def integration_bounds(self) -> tuple[float, float]:
        return (-self.half_width, self.half_width)


ErrorDist = GaussianError | UniformError


def make_error_dist(kind: str, param: float) -> ErrorDist:
    if kind == "gaussian":
        return GaussianError(variance=float(param))
    if kind == "uniform":
        return UniformError(half_width=float(param))
    raise ModelError(f"unknown error distribution {kind!r}")


# ---------------------------------------------------------------------------
# adaptive Simpson quadrature (used for the quantizer reconstruction levels)
# ---------------------------------------------------------------------------


def adaptive_simpson(f: Callable[[float], float], a: float, b: float,
                     tol: float = 1e-10, max_depth: int = 60) -> float:
    """Adaptive Simpson integral of f over [a, b] to absolute tolerance."""
    if b <= a:
        return 0.0

    def simpson(lo, hi, flo, fmid, fhi):
        return (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)

    def recurse(lo, hi, flo, fmid, fhi, whole, eps, depth):
        mid = 0.5 * (lo + hi)
        lmid = 0.5 * (lo + mid)
        rmid = 0.5 * (mid + hi)
        fl = f(lmid)
        fr = f(rmid)
        left = simpson(lo, mid, flo, fl, fmid)
        right = simpson(mid, hi, fmid, fr, fhi)
        if depth >= max_depth or abs(left + right - whole) <= 15.0 * eps:
            return left + right + (left + right - whole) / 15.0
        return (recurse(lo, mid, flo, fl, fmid, left, eps / 2.0, depth + 1)
                + recurse(mid, hi, fmid, fr, fhi, right, eps / 2.0, depth + 1))

    mid = 0.5 * (a + b)
    fa, fm, fb = f(a), f(mid), f(b)
    whole = simpson(a, b, fa, fm, fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 0)


# ---------------------------------------------------------------------------
# power sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerSet:
    """Allowed transmit powers for one user.

    The continuous action set is [0, max_power] (always containing 0); `grid`
    is the finite discretization used wherever a sup over the set is taken
    (deviation searches, brute-force oracles). With strict_grid=True only the
    grid points themselves are legal actions.
    """

    max_power: float
    n_points: int = 512
    strict_grid: bool = False

    def __post_init__(self):
        if self.max_power <= 0:
            raise ModelError("max_power must be positive")
        if self.n_points < 2:
            raise ModelError("need at least 2 grid points")

    @property
    def grid(self) -> np.ndarray:
        g = np.linspace(0.0, self.max_power, self.n_points)
        g.flags.writeable = False
        return g

    @property
    def step(self) -> float:
        return self.max_power / (self.n_points - 1)

    def snap(self, p: float) -> float:
        k = round(p / self.step)
        return float(min(max(k, 0), self.n_points - 1) * self.step)

    def contains(self, p: float) -> bool:
        if not (-_MEMBER_TOL * self.max_power <= p <= self.max_power * (1.0 + _MEMBER_TOL)):
            return False
        if self.strict_grid:
            return abs(p - self.snap(p)) <= _MEMBER_TOL * self.max_power
        return True


# ---------------------------------------------------------------------------
# the network instance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkInstance:
    """Static world: users, channel gains, noise, power sets, requirements.

    gains[i][j] is the power gain from user i's transmitter to user j's
    receiver; noise[i] is sigma_i^2 in watts; min_rates[i] is R_i^min in
    bits/s/Hz; discount is the common delta in [0, 1).
    """

    num_primary: int
    num_secondary: int
    gains: np.ndarray
    noise: np.ndarray
    power_sets: tuple[PowerSet, ...]
    min_rates: np.ndarray
    discount: float

    def __post_init__(self):
        k = self.num_primary + self.num_secondary
        gains = np.asarray(self.gains, dtype=float)
        noise = np.asarray(self.noise, dtype=float)
        rates = np.asarray(self.min_rates, dtype=float)
        if gains.shape != (k, k):
            raise ModelError(f"gains must be {k}x{k}")
        if noise.shape != (k,) or rates.shape != (k,):
            raise ModelError("noise and min_rates must have one entry per user")
        if np.any(gains < 0) or np.any(np.diag(gains) <= 0):
            raise ModelError("gains must be nonnegative with positive direct gains")
        if np.any(noise <= 0):
            raise ModelError("noise powers must be positive")
        if np.any(rates <= 0):
            raise ModelError("min_rates must be positive")
        if not (0.0 <= self.discount < 1.0):
            raise ModelError("discount must lie in [0, 1)")
        if len(self.power_sets) != k:
            raise ModelError("one power set per user required")
        for arr in (gains, noise, rates):
            arr.flags.writeable = False
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "min_rates", rates)

    @property
    def n_users(self) -> int:
        return self.num_primary + self.num_secondary

    def check_profile(self, p: Sequence[float]) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_users,):
            raise ModelError("power profile has wrong length")
        for i, ps in enumerate(self.power_sets):
            if not ps.contains(float(p[i])):
                raise ModelError(f"power {p[i]!r} of user {i} outside its power set")
        return p


def throughput(net: NetworkInstance, p: Sequence[float], i: int) -> float:
    """Shannon rate of user i under joint profile p, interference as noise."""
    p = np.asarray(p, dtype=float)
    if not 0 <= i < net.n_users:
        raise ModelError(f"user index {i} out of range")
    if p[i] == 0.0:
        return 0.0
    return math.log2(1.0 + p[i] * net.gains[i, i] / interference_temperature(net, p, i))


def interference_temperature(net: NetworkInstance, p: Sequence[float], i: int) -> float:
    """Interference-plus-noise power I_i(p_-i) at user i's receiver."""
    p = np.asarray(p, dtype=float)
    if not 0 <= i < net.n_users:
        raise ModelError(f"user index {i} out of range")
    inter = float(np.dot(p, net.gains[:, i])) - float(p[i] * net.gains[i, i])
    return inter + float(net.noise[i])


def all_rates(net: NetworkInstance, p: Sequence[float]) -> np.ndarray:
    return np.array([throughput(net, p, i) for i in range(net.n_users)])


def tdma_power_of(net: NetworkInstance, i: int, r: float) -> float:
    """Exact power giving user i rate r when nobody else transmits."""
    return float(net.noise[i] / net.gains[i, i]) * (2.0 ** r - 1.0)


# ---------------------------------------------------------------------------
# sensing model
# ---------------------------------------------------------------------------


def quantizer_levels(dist: ErrorDist, noise_power: float, threshold: float,
                     tol: float = 1e-10) -> tuple[float, float]:
    """Reconstruction values (recon_low, recon_high) of the two-level quantizer.

    Each level is the conditional mean of the interference estimate
    X = sigma^2 + eps on its side of the threshold, computed at zero
    interference, so the quantizer output is mean-preserving there:
    recon_low * P(X < theta) + recon_high * P(X >= theta) = sigma^2.
    A zero-mass branch falls back to the noise floor.
    """
    if not hasattr(dist, "integration_bounds"):
        raise ModelError("error distribution must have bounded integrable support")
    lo_e, hi_e = dist.integration_bounds()
    lo, hi = noise_power + lo_e, noise_power + hi_e

    def xf(x: float) -> float:
        return x * dist.pdf(x - noise_power)

    p_high = dist.sf(threshold - noise_power)
    p_low = 1.0 - p_high
    eps_mass = 1e-12

    if p_high <= eps_mass:
        recon_high = noise_power
    else:
        recon_high = adaptive_simpson(xf, max(threshold, lo), hi, tol) / p_high
    if p_low <= eps_mass:
        recon_low = noise_power
    else:
        recon_low = adaptive_simpson(xf, lo, min(threshold, hi), tol) / p_low
    if recon_low > recon_high + 1e-9:
        raise ModelError("quantizer levels out of order; non-integrable error dist?")
    return recon_low, recon_high


@dataclass(frozen=True)
class SensingModel:
    """Per-user sensing: error distribution, threshold, reconstruction values."""

    error_dists: tuple[ErrorDist, ...]
    thresholds: np.ndarray
    recon_low: np.ndarray
    recon_high: np.ndarray

    @classmethod
    def build(cls, error_dists: Sequence[ErrorDist], thresholds: Sequence[float],
              noise: Sequence[float]) -> "SensingModel":
        thresholds = np.asarray(thresholds, dtype=float)
        noise = np.asarray(noise, dtype=float)
        if len(error_dists) != len(thresholds) or len(thresholds) != len(noise):
            raise ModelError("sensing parameters must have one entry per user")
        lows, highs = [], []
        for dist, theta, sig in zip(error_dists, thresholds, noise):
            lo, hi = quantizer_levels(dist, float(sig), float(theta))
            lows.append(lo)
            highs.append(hi)
        low = np.array(lows)
        high = np.array(highs)
        for arr in (thresholds, low, high):
            arr.flags.writeable = False
        return cls(tuple(error_dists), thresholds, low, high)

    @classmethod
    def uniform_setup(cls, n_users: int, noise: Sequence[float], *,
                      kind: str = "gaussian", param: float = 0.1,
                      theta: float = 1.0) -> "SensingModel":
        """Same error model and threshold for every user."""
        dists = tuple(make_error_dist(kind, param) for _ in range(n_users))
        return cls.build(dists, [theta] * n_users, noise)


def distress_prob(net: NetworkInstance, sensing: SensingModel,
                  p: Sequence[float], i: int) -> float:
    """P(y_i = 1 | p) for a transmitting user i."""
    p = np.asarray(p, dtype=float)
    if p[i] <= 0.0:
        raise ModelError("distress_prob is defined only for transmitting users")
    temp = interference_temperature(net, p, i)
    return sensing.error_dists[i].sf(float(sensing.thresholds[i]) - temp)


def system_distress_prob(net: NetworkInstance, sensing: SensingModel,
                         p: Sequence[float]) -> float:
    """P(y = 1 | p): complement of the product of per-transmitter silences."""
    p = np.asarray(p, dtype=float)
    quiet = 1.0
    for j in range(net.n_users):
        if p[j] > 0.0:
            quiet *= 1.0 - distress_prob(net, sensing, p, j)
    return 1.0 - quiet


def system_distress(net: NetworkInstance, sensing: SensingModel,
                    p: Sequence[float], rng: UserStreams) -> int:
    """Sample the binary system distress signal: OR over transmitting users."""
    p = np.asarray(p, dtype=float)
    y = 0
    for j in range(net.n_users):
        if p[j] > 0.0:
            rho = distress_prob(net, sensing, p, j)
            if rng.uniform(j) < rho:
                y = 1
    return y


# ---------------------------------------------------------------------------
# JSON (de)serialization — schema shared with the CLI
# ---------------------------------------------------------------------------


def net_to_json(net: NetworkInstance, sensing: SensingModel | None = None) -> dict:
    doc = {
        "num_primary": net.num_primary,
        "gains": net.gains.tolist(),
        "noise": net.noise.tolist(),
        "power_grid": {"max": net.power_sets[0].max_power,
                       "points": net.power_sets[0].n_points},
        "min_rates": net.min_rates.tolist(),
        "discount": net.discount,
    }
    if sensing is not None:
        dist = sensing.error_dists[0]
        kind = "gaussian" if isinstance(dist, GaussianError) else "uniform"
        param = dist.variance if isinstance(dist, GaussianError) else dist.half_width
        doc["sensing"] = {"dist": kind, "param": param,
                          "theta": float(sensing.thresholds[0])}
    return doc


def net_from_json(doc: dict) -> tuple[NetworkInstance, SensingModel]:
    gains = np.asarray(doc["gains"], dtype=float)
    k = gains.shape[0]
    noise = np.asarray(doc["noise"], dtype=float)
    grid = doc.get("power_grid", {"max": 10.0, "points": 512})
    pset = PowerSet(max_power=float(grid["max"]), n_points=int(grid["points"]))
    num_primary = int(doc.get("num_primary", 0))
    net = NetworkInstance(
        num_primary=num_primary,
        num_secondary=k - num_primary,
        gains=gains,
        noise=noise,
        power_sets=(pset,) * k,
        min_rates=np.asarray(doc["min_rates"], dtype=float),
        discount=float(doc["discount"]),
    )
    s = doc.get("sensing", {"dist": "gaussian", "param": 0.1, "theta": 1.0})
    thetas = s["theta"] if isinstance(s["theta"], list) else [s["theta"]] * k
    params = s["param"] if isinstance(s["param"], list) else [s["param"]] * k
    dists = tuple(make_error_dist(s["dist"], prm) for prm in params)
    sensing = SensingModel.build(dists, thetas, noise)
    return net, sensing


def load_config(path: str) -> tuple[NetworkInstance, SensingModel]:
    with open(path, "r", encoding="utf-8") as fh:
        return net_from_json(json.load(fh))
