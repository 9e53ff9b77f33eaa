import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from audiocil.audio_data import FeatureBank, FeatureConfig, generate_synthetic  # noqa: E402
from audiocil.scenario import ScenarioSpec, build_schedule  # noqa: E402


@pytest.fixture(scope="session")
def tiny_world():
    """Six synthetic classes, three tasks of two classes, features precomputed."""
    train = generate_synthetic(6, 12, seed=5, split="train")
    test = generate_synthetic(6, 6, seed=5, split="test")
    bank = FeatureBank(FeatureConfig()).add(train).add(test)
    schedule = build_schedule(ScenarioSpec(6, 2, 2, seed=5), train.class_set)
    return train, test, bank, schedule


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
