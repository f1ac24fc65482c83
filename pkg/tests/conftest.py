import numpy as np
import pytest

from ambireg.phantom import Marker, PhantomSpec, make_phantom


@pytest.fixture(scope="session")
def sym_phantom():
    return make_phantom(PhantomSpec(seed=11))


@pytest.fixture(scope="session")
def marked_phantom():
    return make_phantom(PhantomSpec(seed=12, marker=Marker()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
