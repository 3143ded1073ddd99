import numpy as np
import pytest
import torch

from siamtol.backbone import BackboneConfig
from siamtol.geometry import AnchorConfig, generate_anchors
from siamtol.model import SiamTOL, response_size


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def anchors():
    return generate_anchors(AnchorConfig(), response_size())


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return SiamTOL(BackboneConfig(), AnchorConfig()).eval()


# acceptance criteria report: test_acceptance records one line per criterion
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
