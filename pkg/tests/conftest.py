import numpy as np
import pytest
import scipy.sparse as sp

from ipslae.dataset import EvalSplit, InteractionMatrix

# filled by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_binary(rng, n_users, n_items, density=0.3):
    X = (rng.random((n_users, n_items)) < density).astype(np.float64)
    return X


def matrix_from_dense(dense) -> InteractionMatrix:
    return InteractionMatrix.from_dense(np.asarray(dense) > 0)


def manual_split(train, foldin_rows, holdout_rows, n_items, segment="test"):
    """EvalSplit with explicit fold-in/holdout rows for one segment."""
    def csr(rows):
        m = np.zeros((len(rows), n_items))
        for r, items in enumerate(rows):
            m[r, list(items)] = 1
        return sp.csr_matrix(m)

    n_train = np.asarray(train).shape[0]
    n_held = len(foldin_rows)
    held = np.arange(n_train, n_train + n_held)
    empty = sp.csr_matrix((0, n_items))
    other = "valid" if segment == "test" else "test"
    return EvalSplit(
        train=sp.csr_matrix(np.asarray(train, dtype=np.float64)),
        train_users=np.arange(n_train),
        valid_users=held if segment == "valid" else np.zeros(0, np.int64),
        test_users=held if segment == "test" else np.zeros(0, np.int64),
        foldin={segment: csr(foldin_rows), other: empty},
        holdout={segment: csr(holdout_rows), other: empty},
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
