import numpy as np
import pytest

from perfinf.estimator import RidgeSquaredLoss
from perfinf.model import ModelParams, default_setting


@pytest.fixture
def params() -> ModelParams:
    return default_setting()


@pytest.fixture
def loss(params) -> RidgeSquaredLoss:
    return RidgeSquaredLoss(params.gamma)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


def simple_params(**overrides) -> ModelParams:
    base = dict(
        alpha=[1.0, 0.0],
        mu=[0.0, 0.0],
        mu_x=[0.0, 0.0],
        sigma_x=np.eye(2),
        sigma_y2=0.1,
        gamma=1.0,
    )
    base.update(overrides)
    return ModelParams(**base)
