"""Shared small instances."""
import pytest

from components.ising import IsingModel, RandomSource, random_model


@pytest.fixture
def ferro2() -> IsingModel:
    """Two spins, J=1, no field: ground states ++ and --."""
    return IsingModel(2, {(0, 1): 1.0}, [0.0, 0.0])


@pytest.fixture
def single_spin() -> IsingModel:
    return IsingModel(1, {}, [1.0])


@pytest.fixture
def ring4() -> IsingModel:
    """Four-spin ferromagnetic ring."""
    return IsingModel(4, {(0, 1): 1.0, (1, 2): 1.0, (2, 3): 1.0, (0, 3): 1.0}, [0.0] * 4)


@pytest.fixture
def rng() -> RandomSource:
    return RandomSource(12345)


@pytest.fixture
def glass8() -> IsingModel:
    """Dense half-integer spin glass; exact float arithmetic throughout."""
    return random_model(8, RandomSource(7), integer=True)
