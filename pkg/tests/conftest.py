from __future__ import annotations

import sys

import numpy as np
import pytest

from affkp.geometry import PointCloudFrame
from affkp.synth import SynthConfig, sample_scene


def random_cloud(n: int, seed: int = 0, centre=(0.0, 0.0, 0.6), spread: float = 0.05) -> PointCloudFrame:
    rng = np.random.default_rng(seed)
    xyz = rng.normal(size=(n, 3)) * spread + np.asarray(centre)
    normal = rng.normal(size=(n, 3))
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    return PointCloudFrame(xyz, rng.uniform(size=(n, 3)), normal, np.arange(n))


@pytest.fixture(scope="session")
def synth_cfg() -> SynthConfig:
    return SynthConfig()


@pytest.fixture(scope="session")
def scene0(synth_cfg):
    return sample_scene(synth_cfg, 0)


@pytest.fixture(scope="session")
def scenes(synth_cfg):
    return [sample_scene(synth_cfg, s) for s in range(6)]


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance criterion lines at the end of the run."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
