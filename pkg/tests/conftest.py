import pytest

from gradmask.config import load_config

TINY = [
    "data.synthetic.count=60",
    "data.synthetic.n_max=10",
    "model.layers=1",
    "model.hidden=8",
    "model.heads=2",
    "model.pe_dim=4",
    "train.epochs=3",
    "train.batch_size=16",
]


@pytest.fixture
def tiny_config():
    def make(*extra):
        return load_config(None, TINY + list(extra))

    return make


# filled by tests/test_acceptance.py, echoed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
