import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from metadrug.ehr import Cohort, GeneratorSpec, PatientRecord, Visit, _make_vocab  # noqa: E402

torch.set_num_threads(1)

# Lines registered by the acceptance suite, printed once at the end.
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def random_record(rng, pid, H, V, max_visits=4, max_codes=5, min_visits=2):
    T = int(rng.integers(min_visits, max_visits + 1))
    visits = []
    for t in range(1, T + 1):
        n = int(rng.integers(1, max_codes + 1))
        codes = tuple(int(c) for c in rng.choice(V, n, replace=False))
        y = rng.integers(0, 2, H)
        if not y.any():
            y[rng.integers(H)] = 1
        visits.append(Visit(t, codes, tuple(int(v) for v in y)))
    return PatientRecord(pid, tuple(visits))


def random_cohort(rng, n, H=3, V=12, **kw):
    pats = tuple(random_record(rng, f"R{i:03d}", H, V, **kw) for i in range(n))
    return Cohort(pats, _make_vocab(V), H, frozenset())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(n_patients=60, num_medications=8, vocab_size=40, n_phenotypes=3)
