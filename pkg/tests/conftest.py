from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fullstab.synth import SynthConfig, make_clip

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def small_cfg(**kw) -> SynthConfig:
    """Synthetic config shrunk to a 120x96 crop with motion scaled to match."""
    base = dict(n_frames=12, crop=(120, 96), t_max=(100 / 6, 70 / 6), jitter_t=(2.0, 2.0),
                n_objects_max=0, small_fov=(96, 72))
    base.update(kw)
    return SynthConfig(**base)


@pytest.fixture(scope="session")
def jitter_clip():
    return make_clip(small_cfg(seed=11), movers=0)


@pytest.fixture(scope="session")
def mover_clip():
    return make_clip(small_cfg(seed=5, n_frames=8, jitter_t=(1.0, 1.0)), movers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
