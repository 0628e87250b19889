import numpy as np
import pytest

from fairprobe.domain import AnnotationTable, ComparisonStore
from fairprobe.synthetic import SyntheticConfig, generate

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])


def make_table(labels, gender, identities, names=None, embeddings=None):
    """Build an AnnotationTable from plain lists; identities are strings."""
    labels = np.asarray(labels, dtype=np.int8)
    if labels.ndim == 1:
        labels = labels[:, None]
    names = names or tuple(f"a{k}" for k in range(labels.shape[1]))
    uniq = list(dict.fromkeys(identities))
    codes = [uniq.index(i) for i in identities]
    return AnnotationTable(tuple(names), tuple(uniq), codes, gender, labels, embeddings)


def make_store(rows):
    """rows: (a, b, score, kind, gender)"""
    a, b, s, k, g = zip(*rows) if rows else ((),) * 5
    return ComparisonStore(np.array(a, np.int64), np.array(b, np.int64),
                           np.array(s, float), np.array(k, np.uint8), np.array(g, np.uint8))


# small but samplable at FMR 1e-2 (lambda_g = 100)
SMALL = dict(n_identities_per_gender=40, images_per_identity=20, n_attributes=5,
             positive_rate=0.45, unclear_rate=0.1, impostor_factor=2.0,
             genuine_mean=0.45, genuine_std=0.15, seed=7)


@pytest.fixture(scope="session")
def small_data():
    cfg = SyntheticConfig(**SMALL)
    table, store = generate(cfg)
    return cfg, table, store
