import numpy as np
import pytest

from macleak.experiments import default_iapam, make_neurons
from macleak.patterns import default_library, default_match_config
from macleak.simulate import IaPAM, NeuronConfig, SimConfig


@pytest.fixture(scope="session")
def lib():
    return default_library()


@pytest.fixture(scope="session")
def match_cfg():
    return default_match_config()


@pytest.fixture(scope="session")
def iapam9():
    # the reference 9-position importance layout
    return IaPAM([0, 1, 1, 1, 1, 0, 1, 0, 1])


@pytest.fixture(scope="session")
def iapam32():
    return default_iapam(32)


@pytest.fixture(scope="session")
def neuron32():
    return make_neurons(1, 32, seed=7)[0]


@pytest.fixture(scope="session")
def neuron9():
    return NeuronConfig(weights=np.array([3, -87, 61, 29, 52, -75, 1, 92, -15], dtype=np.int64))


@pytest.fixture()
def sim9(iapam9):
    return SimConfig(iapam=iapam9, activation_ratio=0.5, noise_sigma=0.0, rng_seed=123)


def reference_hw32(value: int) -> int:
    """Independent Hamming-weight oracle over 32-bit two's complement."""
    return (int(value) & 0xFFFFFFFF).bit_count()


def reference_accumulator(image, weights, executed):
    """Running accumulator over executed MACs, in plain Python ints."""
    acc = 0
    out = []
    for x, w, e in zip(image, weights, executed):
        if e:
            acc += int(x) * int(w)
        out.append(acc)
    return out
