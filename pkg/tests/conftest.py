import os

import pytest
from hypothesis import HealthCheck, settings

from sttod.corpus import few_shot_split
from sttod.synth import synth_dialog_acts, synth_generate, synth_response_selection, synth_state_tracking

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def intent_small():
    return synth_generate(n_classes=5, vocab_size=60, size=300, seed=3, validation_size=100, test_size=100)


@pytest.fixture(scope="session")
def intent_split(intent_small):
    return few_shot_split(intent_small, 0.1, seed=0)


@pytest.fixture(scope="session")
def task_datasets():
    return {
        "intent": synth_generate(n_classes=4, vocab_size=50, size=120, seed=1),
        "dialog_act": synth_dialog_acts(n_acts=4, size=120, seed=1),
        "dst": synth_state_tracking(n_pairs=2, values_per_pair=3, size=120, seed=1),
        "response_selection": synth_response_selection(n_responses=40, size=120, seed=1),
    }


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
