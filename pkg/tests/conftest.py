import numpy as np
import pytest


def write_toy_ratings(path, n_users=10, per_user=10, n_items=12, seed=0):
    """Tab-separated ratings with a mild sequential pattern."""
    rng = np.random.default_rng(seed)
    lines = []
    for u in range(1, n_users + 1):
        start = int(rng.integers(1, n_items + 1))
        for t in range(per_user):
            item = (start + t - 1) % n_items + 1
            rating = int(rng.integers(1, 6))
            lines.append(f"{u}\t{item}\t{rating}\t{1000 * u + t}")
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def toy_ratings(tmp_path):
    return write_toy_ratings(tmp_path / "u.data")


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record one acceptance line; printed immediately and in the summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
