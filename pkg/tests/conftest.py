import numpy as np
import pytest

from greencmbf import scenario
from greencmbf.model import SystemModel


def rank_one_model(rng, I, K, Nt, gamma=1.0, sigma2=1.0, cross=0.25):
    """Random instance with ``R[j, i, k] = h h^H``."""
    h = (rng.standard_normal((I, I, K, Nt)) + 1j * rng.standard_normal((I, I, K, Nt))) / np.sqrt(2)
    gain = np.where(np.eye(I, dtype=bool), 1.0, cross)[:, :, None, None]
    h = h * np.sqrt(gain)
    R = np.einsum("jika,jikb->jikab", h, h.conj())
    return SystemModel(R, gamma, sigma2), h


def scalar_model(r, gamma, sigma2):
    """Nt = 1 instance with covariance entries ``r[j, i, k]``."""
    r = np.asarray(r, dtype=float)
    return SystemModel(r[..., None, None].astype(complex), gamma, sigma2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_cfg():
    return scenario.ScenarioConfig(I=2, K=1, Nt=2, n_samples=50, seed=3)


@pytest.fixture(scope="session")
def toy(toy_cfg):
    rng = np.random.default_rng(toy_cfg.seed)
    model = scenario.make_channels(toy_cfg, rng)
    db = scenario.sample_states(toy_cfg, rng)
    return model, db
