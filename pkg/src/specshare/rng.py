"""Splittable counter-based random streams.

Every stochastic draw in the package goes through a Philox generator keyed
by (root seed, *path), so results are bit-reproducible regardless of thread
count or evaluation order. One stream per user per trial.
"""

from __future__ import annotations

import numpy as np


def stream(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the substream identified by (seed, *key)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class UserStreams:
    """One independent Philox stream per user, for distress sampling.

    Streams are keyed by (seed, *prefix, user_index), so two bundles built
    with the same key draw identical signals slot for slot.
    """

    def __init__(self, seed: int, n_users: int, *prefix: int):
        self.seed = int(seed)
        self.prefix = tuple(int(p) for p in prefix)
        self._gens = [stream(seed, *self.prefix, u) for u in range(n_users)]

    def uniform(self, user: int) -> float:
        return float(self._gens[user].random())

    def __len__(self) -> int:
        return len(self._gens)
