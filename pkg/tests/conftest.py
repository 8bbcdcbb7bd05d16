import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from poseidon.modelspec import ClusterConfig, ModelSpec

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def small_model(batch_size=4):
    """FC, shaped opaque, FC: at two and four workers the planner mixes PS and SFB."""
    return ModelSpec.from_layers(
        [("fc1", 64, 32),
         {"name": "mid", "kind": "opaque", "rows": 32, "cols": 64, "param_count": 2048},
         ("fc3", 4, 32)],
        batch_size=batch_size)


@pytest.fixture
def model():
    return small_model()


@pytest.fixture
def cluster2():
    return ClusterConfig.colocated(2, chunk_bytes=1024)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, text = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {text}")
