import numpy as np
import pytest
from scipy import sparse

from safevisor.scenario import build_architecture, load_scenario
from safevisor.synthesis import Product


def product_from_toy(toy: dict) -> Product:
    T = toy["T"]
    S, U, _ = T.shape
    return Product(kernel=sparse.csr_matrix(T.reshape(S * U, S)), n_inputs=U, succ=toy["succ"],
                   accepting=toy["accepting"], delta=toy["delta"], mode=toy["mode"],
                   pinned=toy["pinned"], pinned_value=toy["pinned_value"])


@pytest.fixture(scope="session")
def two_car():
    return load_scenario("two_car")


@pytest.fixture(scope="session")
def two_car_arch():
    return build_architecture(load_scenario("two_car"))


@pytest.fixture(scope="session")
def dc():
    return load_scenario("dc_motor")


@pytest.fixture(scope="session")
def dc_arch():
    return build_architecture(load_scenario("dc_motor"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
