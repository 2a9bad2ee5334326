import dataclasses
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from groundsim.scenario import ExperimentConfig

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent
FIXTURES = Path(__file__).resolve().parent / "fixtures"


def small_config(steps=200, episodes=2, pretrain=3, **gat) -> ExperimentConfig:
    base = ExperimentConfig()
    return base.replace(
        trainer=dataclasses.replace(base.trainer, steps=steps, test_steps=steps, episodes=episodes,
                                    learning_start=40),
        gat=dataclasses.replace(base.gat, pretrain_episodes=pretrain, forward_epochs=2, inverse_epochs=2,
                                forward_lr=1e-3, inverse_lr=1e-3, **gat))


@pytest.fixture
def tiny_cfg():
    return small_config()


# one (criterion, passed, detail) entry per acceptance check, printed at the end of the run
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
