import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from confshield.classifier import TrainConfig, train  # noqa: E402
from confshield.signal import GenerationConfig, make_dataset, parse_labels  # noqa: E402


@pytest.fixture(scope="session")
def small_data():
    cfg = GenerationConfig(labels=parse_labels("digital7"), frames_per_label=64,
                           split=(0.5, 0.25, 0.25), seed=21, frames_per_segment=4)
    return make_dataset(cfg)


@pytest.fixture(scope="session")
def small_model(small_data):
    return train(small_data, TrainConfig(epochs=10, batch_size=32, learning_rate=0.1, seed=3))


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (len(k.split(".")[0]), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
