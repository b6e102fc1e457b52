import numpy as np
import pytest

from fnfm.data import FieldSchema

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mixed_schema():
    """Four fields, one of them numeric."""
    return FieldSchema.build([("a", "categorical", 5), ("b", "categorical", 4),
                              ("x", "numeric", 1), ("c", "categorical", 6)])


def random_batch(schema, rng, batch_size):
    """Random ``(indices, values)`` with numeric values drawn from N(0, 1)."""
    idx = np.stack([rng.integers(fs.index_base, fs.index_base + fs.slots, batch_size)
                    for fs in schema.fields], axis=1)
    numeric = np.array([fs.kind == "numeric" for fs in schema.fields])
    val = np.where(numeric, rng.normal(size=idx.shape), 1.0)
    return idx, val
