from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from roadpcc.core import PointCloud, default_sensor
from roadpcc.scenegen import simulate_frames

settings.register_profile(
    "roadpcc",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("roadpcc")

SIM_SEED = 2024


@pytest.fixture(scope="session")
def sim_frames() -> list[PointCloud]:
    """Five default 64 x 2048 simulated frames (shared, read-only)."""
    return simulate_frames(SIM_SEED, 5)


@pytest.fixture(scope="session")
def small_sensor():
    return default_sensor(n_beams=16, n_cols=256)


@pytest.fixture(scope="session")
def small_frames(small_sensor) -> list[PointCloud]:
    return simulate_frames(7, 3, small_sensor)


def random_cloud(seed: int, n: int, scale: float = 10.0, intensity: bool = False) -> PointCloud:
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-scale, scale, size=(n, 3))
    inten = rng.uniform(0, 1, size=n) if intensity else None
    return PointCloud(xyz, inten)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(n: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
