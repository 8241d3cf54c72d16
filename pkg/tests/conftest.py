import numpy as np
import pytest

from vlodom.config import PipelineConfig
from vlodom.geometry import Pose, quat_normalize


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def micro_cfg():
    return PipelineConfig.micro()


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def random_pose(rng, t_scale=5.0):
    return Pose(random_quat(rng), rng.normal(scale=t_scale, size=3))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
