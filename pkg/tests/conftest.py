import numpy as np
import pytest

from bootreg.geometry import PointCloud, RigidTransform, rotation_from_axis_angle


# one-line verdicts appended by the acceptance suite
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def random_transform(rng, max_angle=np.pi, max_shift=1.0) -> RigidTransform:
    axis = rng.normal(size=3)
    angle = rng.uniform(0, max_angle)
    return RigidTransform(rotation_from_axis_angle(axis, angle), rng.uniform(-max_shift, max_shift, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud(rng):
    return PointCloud(rng.uniform(-1, 1, size=(300, 3)), colors=rng.uniform(0, 1, size=(300, 3)))
