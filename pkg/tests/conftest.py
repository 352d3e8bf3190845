import numpy as np
import pytest

from src.neural import LINEAR, DenseLayer, DenseNetwork
from src.rom import PodAeModel, PodBasis


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def identity_net(width: int) -> DenseNetwork:
    return DenseNetwork([DenseLayer(np.eye(width), np.zeros(width), LINEAR)])


def identity_rom(dof: int) -> PodAeModel:
    """ROM whose encode/decode are both the identity on R^dof."""
    basis = PodBasis(np.eye(dof), np.ones(dof), dof)
    return PodAeModel(basis, identity_net(dof), identity_net(dof))


def random_rom(rng: np.random.Generator, dof: int, q_prime: int, latent: int) -> PodAeModel:
    modes, _ = np.linalg.qr(rng.standard_normal((dof, q_prime)))
    enc = DenseNetwork([DenseLayer(rng.standard_normal((latent, q_prime)), rng.standard_normal(latent))])
    dec = DenseNetwork([DenseLayer(rng.standard_normal((q_prime, latent)), rng.standard_normal(q_prime))])
    return PodAeModel(PodBasis(modes, np.ones(q_prime), q_prime), enc, dec)


@pytest.fixture
def make_identity_rom():
    return identity_rom


@pytest.fixture
def make_random_rom():
    return random_rom
