import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from sdpc.core import ConvDictionary, LayerConfig, NetworkConfig  # noqa: E402


def random_dictionary(rng, n_features, n_channels, k, stride=1, dtype=torch.float64):
    atoms = rng.standard_normal((n_features, n_channels, k, k))
    atoms /= np.linalg.norm(atoms.reshape(n_features, -1), axis=1)[:, None, None, None]
    return ConvDictionary(torch.as_tensor(atoms, dtype=dtype), stride)


def small_net(rng, k_fb=1.0, t_stab=1e-6, n_layers=2, lams=(0.1, 0.2), max_iters=5000):
    layers = [LayerConfig(random_dictionary(rng, 4, 1, 3, stride=1), lams[0])]
    if n_layers > 1:
        layers.append(LayerConfig(random_dictionary(rng, 6, 4, 3, stride=1), lams[1]))
    return NetworkConfig(layers, k_fb=k_fb, t_stab=t_stab, max_iters=max_iters)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
