import numpy as np
import pytest

from condo.core import CATEGORICAL, CONTINUOUS, Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(x, y, kind=CONTINUOUS, name="y"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return Dataset(x, [(v,) for v in y], confounder_schema=[(name, kind)])


def categorical_dataset(x, tokens):
    return make_dataset(x, tokens, CATEGORICAL, "c")


def random_spd(rng, m, jitter=0.1):
    q = rng.standard_normal((m, m))
    return q @ q.T + jitter * np.eye(m)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
