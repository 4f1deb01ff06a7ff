import numpy as np
import pytest

from blockloc.geometry import PoseSE3, quat_from_rotvec


def random_pose(rng, trans=5.0, angle=np.pi * 0.9):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    phi = axis * rng.uniform(0, angle)
    return PoseSE3(quat_from_rotvec(phi), rng.uniform(-trans, trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
