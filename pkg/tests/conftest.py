import math

import numpy as np
import pytest

from app.schemas.algorithm import AlgoConfig
from app.schemas.environment import Environment, FeatureSet
from app.schemas.experiment import ExperimentConfig

SQRT_HALF = 1.0 / math.sqrt(2.0)


def make_env(arms, theta, key_terms=None, noise_std=0.0, richness_C=None, clients=1):
    arms = np.asarray(arms, dtype=float)
    d = arms.shape[1]
    key_terms = np.eye(d) if key_terms is None else np.asarray(key_terms, dtype=float)
    return Environment(
        dim=d,
        clients=[FeatureSet.from_vectors(arms)] * clients,
        key_terms=FeatureSet.from_vectors(key_terms),
        theta_star=theta,
        noise_std=noise_std,
        richness_C=richness_C if richness_C is not None else 1.0 / math.sqrt(d),
    )


@pytest.fixture
def env_factory():
    return make_env


@pytest.fixture
def plane_env() -> Environment:
    """Noiseless d=2 world: e1, e2 and their bisector, basis key terms."""
    return make_env(
        [[1.0, 0.0], [0.0, 1.0], [SQRT_HALF, SQRT_HALF]],
        theta=[0.7, 0.2],
        richness_C=SQRT_HALF,
    )


@pytest.fixture
def two_dim_cfg() -> AlgoConfig:
    """d=2, K=10, M=2, T=1024, delta=0.1, C=1, N=1."""
    return AlgoConfig(T=1024, M=2, d=2, K=10, delta=0.1, C=1.0, N=1.0)


@pytest.fixture
def small_experiment() -> ExperimentConfig:
    return ExperimentConfig.model_validate(
        {
            "environment": {
                "kind": "synthetic",
                "num_users": 5,
                "num_arms": 40,
                "num_keyterms": 12,
                "relation_max": 3,
            },
            "algorithm": {"name": "fedconpe"},
            "d": 3,
            "M": 2,
            "K": 8,
            "T": 400,
            "seeds": [1, 2],
        }
    )
