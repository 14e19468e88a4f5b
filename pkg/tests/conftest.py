import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, max_examples=40, derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture
def record_acceptance():
    """Store a one-line PASS/FAIL verdict; printed again in the terminal summary."""

    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append((number, line))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def cluster_probe_run():
    """Full-size cluster probe from the shipped config: ``(report, stats, seconds)``."""
    import time

    from kac_contact.config import load_config
    from kac_contact.studies import run_cluster_probe

    start = time.perf_counter()
    rep, stats = run_cluster_probe(load_config(os.path.join(CONFIG_DIR, "cluster_probe.json")))
    return rep, stats, time.perf_counter() - start
