import numpy as np
import pytest

from proxi2s.demo import demo_csv, demo_dataset

ACCEPTANCE_LINES = []


@pytest.fixture
def demo():
    return demo_dataset()


@pytest.fixture
def demo_path(tmp_path):
    path = tmp_path / "demo.csv"
    path.write_text(demo_csv())
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail):
        line = f"CRITERION {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
