import numpy as np
import pytest

from curvlab import nn
from curvlab.cli import MODEL_MODULE_ID
from curvlab.config import RunConfig
from curvlab.data import gen_synthetic
from curvlab.linalg import SeededRng


@pytest.fixture(scope="session")
def toy():
    """The default run configuration's trained 2-16-16-3 net on 3-class Gaussians."""
    cfg = RunConfig()
    train, test = gen_synthetic(cfg.dataset_spec())
    init = nn.MlpNetwork.init(cfg.dims(), SeededRng(cfg.seed).derive(MODEL_MODULE_ID))
    result = nn.train_sgd(init, train, cfg.train_config())
    return result.net, train, test


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
