import numpy as np
import pytest

from ponzinet.ingest import Address, LabelSet, TransactionRecord, TransactionStore


def addr(i: int) -> Address:
    return Address(f"0x{i:040x}")


def make_store(rows):
    """rows: (sender, receiver, wei, ts) with integer node indices."""
    return TransactionStore(
        TransactionRecord(f"t{k}", addr(a), addr(b), int(v), int(t)) for k, (a, b, v, t) in enumerate(rows)
    )


def random_store(rng, n_nodes, n_records, self_rate=0.05):
    rows = []
    for _ in range(n_records):
        a = int(rng.integers(n_nodes))
        b = a if rng.random() < self_rate else int(rng.integers(n_nodes))
        rows.append((a, b, int(int(rng.integers(0, 10**18)) * 100), int(rng.integers(1_500_000_000, 1_600_000_000))))
    return make_store(rows)


def labels_for(ponzi, normal):
    return LabelSet(frozenset(addr(i) for i in ponzi), frozenset(addr(i) for i in normal))


def random_graph(rng, n, p):
    upper = np.triu(rng.random((n, n)) < p, 1)
    return (upper | upper.T).astype(np.float64)


def two_cliques(size=50, bridge=False):
    """Adjacency of two disjoint ``size``-cliques (optionally one bridging edge)."""
    n = 2 * size
    A = np.zeros((n, n))
    A[:size, :size] = 1
    A[size:, size:] = 1
    np.fill_diagonal(A, 0)
    if bridge:
        A[0, size] = A[size, 0] = 1
    return A


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines, printed together at the end of the run
ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
