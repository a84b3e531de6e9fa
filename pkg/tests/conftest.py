from __future__ import annotations

import numpy as np
import pytest

from srslam.core import CameraIntrinsics
from srslam.evaluation import SceneSpec, generate_scene, write_sequence

# Acceptance outcomes, filled by tests/test_acceptance.py and printed at the end.
CRITERIA: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def cam_small() -> CameraIntrinsics:
    return CameraIntrinsics(100.0, 100.0, 32.0, 24.0, 64, 48)


@pytest.fixture(scope="session")
def synthetic_sequence(tmp_path_factory):
    """100 frames, one moving body, a full occlusion over frames 40-55."""
    out = tmp_path_factory.mktemp("seq")
    scene = generate_scene(SceneSpec(n_frames=100, n_bodies=1, seed=7, occlusion_span=(40, 55)))
    write_sequence(scene, out)
    return out


@pytest.fixture(scope="session")
def static_sequence(tmp_path_factory):
    out = tmp_path_factory.mktemp("static")
    scene = generate_scene(SceneSpec(n_frames=30, n_bodies=0, seed=3, width=320, height=240))
    write_sequence(scene, out)
    return out


def random_pose(rng, t_scale=1.0, max_angle=np.pi):
    from srslam.core import PoseSE3, so3_exp

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, max_angle)
    return PoseSE3.from_rt(so3_exp(axis * angle), rng.normal(size=3) * t_scale)
