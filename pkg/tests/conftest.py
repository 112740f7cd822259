import numpy as np
import pytest
import torch

from icm_codec.codec_core import CodecConfig, build_codec
from icm_codec.data import synthetic_image
from icm_codec.losses import FeatureExtractor

# Filled by the acceptance module; echoed once at the end of the session.
ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[num])


@pytest.fixture(scope="session")
def tiny_cfg():
    return CodecConfig.from_profile("tiny")


@pytest.fixture
def tiny_codec(tiny_cfg):
    return build_codec(tiny_cfg, seed=0)


@pytest.fixture(scope="session")
def fe():
    return FeatureExtractor(seed=0)


@pytest.fixture(scope="session")
def train_images():
    """Eight 96x96 synthetic images shared by the desk-scale training checks."""
    return [synthetic_image(96, 96, [0, i]) for i in range(8)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
