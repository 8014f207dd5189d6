import copy
import functools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpcbf.cli import build_scenario, load_config
from gpcbf.sim import run_experiment

ROOT = Path(__file__).resolve().parents[1]
ARM_CFG = ROOT / "configs" / "two_link_gp_phocbf.cfg"
PM_CFG = ROOT / "configs" / "point_mass_gp_phocbf.cfg"

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def arm_config(**overrides):
    """Bundled arm scenario with ``section__key`` overrides."""
    cfg = load_config(ARM_CFG)
    for name, val in overrides.items():
        sec, key = name.split("__")
        cfg[sec][key] = val
    return cfg


@functools.lru_cache(maxsize=None)
def _arm_run(items):
    cfg = arm_config(**{k: list(v) if isinstance(v, tuple) else v for k, v in items})
    system, chain, gp, sim_cfg, box, _ = build_scenario(cfg)
    return run_experiment(system, chain, gp, sim_cfg, box)


def arm_run(**overrides):
    """Cached closed-loop run of the arm scenario (session-wide)."""
    return _arm_run(tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in overrides.items())))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def arm_cfg():
    return copy.deepcopy(arm_config())


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
