"""Shared fixtures-as-functions for the test modules."""

import math

import numpy as np

from learndrift.mlp import Activation, MlpModel, MlpSpec, MlpWeights, Normalizer


def random_model(layers=2, width=8, act=Activation.GELU, seed=0):
    """Randomly initialized network with nonzero biases and a non-trivial normalizer."""
    spec = MlpSpec.hidden(layers, width, act, seed)
    w = MlpWeights.init(spec)
    rng = np.random.default_rng(seed + 100)
    w.biases = [rng.normal(scale=0.3, size=b.shape) for b in w.biases]
    norm = Normalizer(rng.normal(size=5), rng.uniform(0.5, 2, 5), rng.normal(size=3), rng.uniform(0.5, 2, 3))
    return MlpModel(spec, w, norm)


def assert_monotone(result):
    """Accepted costs must strictly decrease."""
    c = np.asarray(result.cost_history)
    assert np.all(np.diff(c) < 0), c


def kinematic_bicycle(V, delta, L, h, n):
    """No-slip bicycle referenced at the wheelbase midpoint, integrated exactly."""
    beta = math.atan(math.tan(delta) / 2)
    omega = V * math.cos(beta) * math.tan(delta) / L
    out = [(0.0, 0.0, 0.0)]
    for k in range(1, n + 1):
        t = k * h
        if abs(omega) < 1e-12:
            out.append((V * t * math.cos(beta), V * t * math.sin(beta), 0.0))
        else:
            r = V / omega
            out.append((r * (math.sin(omega * t + beta) - math.sin(beta)), r * (math.cos(beta) - math.cos(omega * t + beta)), omega * t))
    return np.array(out), (V * math.cos(beta), V * math.sin(beta), omega)
