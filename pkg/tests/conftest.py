import numpy as np
import pytest

from specshare.netmodel import (GaussianError, NetworkInstance, PowerSet,
                                SensingModel, UniformError)


def make_net(gains, noise=0.05, min_rates=1.0, delta=0.9, pmax=1000.0,
             points=512, num_primary=0, strict_grid=False):
    gains = np.asarray(gains, dtype=float)
    k = gains.shape[0]
    noise = np.full(k, noise) if np.isscalar(noise) else np.asarray(noise, float)
    rates = np.full(k, min_rates) if np.isscalar(min_rates) else np.asarray(min_rates, float)
    return NetworkInstance(
        num_primary=num_primary, num_secondary=k - num_primary, gains=gains,
        noise=noise, power_sets=(PowerSet(pmax, points, strict_grid),) * k,
        min_rates=rates, discount=delta)


def symmetric_net(n=2, alpha=0.5, **kw):
    g = np.full((n, n), float(alpha))
    np.fill_diagonal(g, 1.0)
    return make_net(g, **kw)


@pytest.fixture
def net2():
    return symmetric_net(2, alpha=0.5)


@pytest.fixture
def sensing2(net2):
    return SensingModel.uniform_setup(2, net2.noise)


def strong_detection_net(n=2, cross=30.0, delta=0.95, min_rates=1.0):
    """Instance where every deviation is loudly detected: coarse power grid,
    heavy cross interference, threshold near the noise floor."""
    g = np.full((n, n), cross)
    np.fill_diagonal(g, 1.0)
    net = make_net(g, delta=delta, min_rates=min_rates, pmax=2.0, points=9)
    sens = SensingModel.build(
        tuple(GaussianError(0.01) for _ in range(n)), [0.4] * n, net.noise)
    return net, sens
