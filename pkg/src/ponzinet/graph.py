"""Sub-transaction network construction, GCN normalization and topology stats."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .ingest import Address, LabelSet, TransactionStore

log = logging.getLogger(__name__)

PONZI, NORMAL = 1, 0


@dataclass(frozen=True)
class SubTransactionNetwork:
    nodes: tuple  # node id -> Address
    adjacency: sp.csr_matrix  # symmetric binary, zero diagonal
    multiplicity: sp.csr_matrix  # transactions per unordered pair
    centers: frozenset
    labels: dict = field(default_factory=dict)  # node id -> PONZI / NORMAL

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz // 2)

    def index(self) -> dict:
        return {a: i for i, a in enumerate(self.nodes)}

    def labeled_ids(self) -> np.ndarray:
        return np.array(sorted(self.labels), dtype=np.int64)

    def label_array(self, ids=None) -> np.ndarray:
        ids = self.labeled_ids() if ids is None else ids
        return np.array([self.labels[int(i)] for i in ids], dtype=np.int64)

    def neighbors(self, i) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]


@dataclass(frozen=True)
class NetworkStats:
    n_nodes: int
    n_edges: int
    avg_degree: float
    clustering: float


def _node_codes(net: SubTransactionNetwork, store: TransactionStore) -> np.ndarray:
    """Map store address codes to node ids (-1 when outside the network)."""
    cols = store.columns()
    node_of_code = np.full(len(cols.addresses), -1, dtype=np.int64)
    for i, a in enumerate(net.nodes):
        c = cols.code_of(a)
        if c >= 0:
            node_of_code[c] = i
    return node_of_code


def induced_records(net: SubTransactionNetwork, store: TransactionStore):
    """Records whose endpoints both lie in the network, as node-id arrays.

    Returns ``(src, dst, ether, timestamp)`` in store order.
    """
    cols = store.columns()
    node_of_code = _node_codes(net, store)
    s = node_of_code[cols.src]
    d = node_of_code[cols.dst]
    keep = (s >= 0) & (d >= 0)
    return s[keep], d[keep], cols.ether[keep], cols.timestamp[keep]


def adjacency_from_pairs(n, src, dst):
    """Symmetric binary adjacency and pair multiplicity from directed pairs (self-pairs dropped)."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    off = src != dst
    u = np.minimum(src[off], dst[off])
    v = np.maximum(src[off], dst[off])
    ones = np.ones(len(u), dtype=np.int64)
    upper = sp.coo_matrix((ones, (u, v)), shape=(n, n)).tocsr()
    upper.sum_duplicates()
    mult = (upper + upper.T).tocsr()
    mult.sort_indices()
    adj = mult.copy()
    adj.data = np.ones_like(adj.data, dtype=np.float64)
    adj = adj.astype(np.float64)
    adj.sort_indices()
    return adj, mult


def build_subnetwork(store: TransactionStore, centers, labels: LabelSet | None = None) -> SubTransactionNetwork:
    """Splice 1-hop neighborhoods of ``centers`` into one network.

    Neighbors shared between centers are merged by address. Every
    transaction between two network members becomes an undirected edge.
    """
    centers = sorted({Address(c) for c in centers})
    cols = store.columns()
    codes = np.array([cols.code_of(c) for c in centers], dtype=np.int64)
    for c, code in zip(centers, codes):
        if code < 0:
            log.warning("center %s has no transactions; kept as isolated node", c)

    is_center = np.zeros(len(cols.addresses), dtype=bool)
    is_center[codes[codes >= 0]] = True
    touch = is_center[cols.src] | is_center[cols.dst]
    member = is_center.copy()
    member[cols.src[touch]] = True
    member[cols.dst[touch]] = True

    center_set = set(centers)
    neighbor_addrs = [cols.addresses[c] for c in np.flatnonzero(member) if cols.addresses[c] not in center_set]
    nodes = tuple(centers) + tuple(neighbor_addrs)  # both already sorted
    node_of_code = np.full(len(cols.addresses), -1, dtype=np.int64)
    for i, a in enumerate(nodes):
        c = cols.code_of(a)
        if c >= 0:
            node_of_code[c] = i

    s = node_of_code[cols.src]
    d = node_of_code[cols.dst]
    keep = (s >= 0) & (d >= 0)
    adj, mult = adjacency_from_pairs(len(nodes), s[keep], d[keep])

    lab = {}
    if labels is not None:
        for i, a in enumerate(centers):
            y = labels.label_of(a)
            if y is not None:
                lab[i] = y
    return SubTransactionNetwork(nodes, adj, mult, frozenset(range(len(centers))), lab)


def normalize_adjacency(net_or_adj) -> sp.csr_matrix:
    """Renormalized propagation operator D~^-1/2 (A + I) D~^-1/2 (CSR, sorted indices)."""
    a = net_or_adj.adjacency if isinstance(net_or_adj, SubTransactionNetwork) else net_or_adj
    a = sp.csr_matrix(a, dtype=np.float64)
    n = a.shape[0]
    if n < 1:
        raise ValueError("normalize_adjacency needs at least one node")
    a_tilde = (a + sp.identity(n, dtype=np.float64, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    # a_ij / sqrt(d_i d_j) with one rounding in the square root (exact 0.5 for d=2,2)
    rows = np.repeat(np.arange(n), np.diff(a_tilde.indptr))
    out = sp.csr_matrix(
        (a_tilde.data / np.sqrt(deg[rows] * deg[a_tilde.indices]), a_tilde.indices.copy(), a_tilde.indptr.copy()),
        shape=(n, n),
    )
    out.sort_indices()
    return out


def triangles_per_node(adj: sp.csr_matrix) -> np.ndarray:
    a = sp.csr_matrix(adj, dtype=np.float64)
    paths = (a @ a).multiply(a)
    return np.asarray(paths.sum(axis=1)).ravel() / 2.0


def stats(net: SubTransactionNetwork) -> NetworkStats:
    n = net.n
    if n < 1:
        raise ValueError("stats needs at least one node")
    m = net.n_edges
    k = np.diff(net.adjacency.indptr).astype(np.float64)
    tri = triangles_per_node(net.adjacency)
    local = np.zeros(n)
    ok = k >= 2
    local[ok] = 2.0 * tri[ok] / (k[ok] * (k[ok] - 1.0))
    return NetworkStats(n, m, 2.0 * m / n, float(local.mean()))


def degree_vectors(net: SubTransactionNetwork, store: TransactionStore) -> np.ndarray:
    """Per-node ``(in_count, out_count)`` over induced records, multiplicity counted."""
    src, dst, _, _ = induced_records(net, store)
    out = np.zeros((net.n, 2), dtype=np.int64)
    np.add.at(out[:, 0], dst, 1)
    np.add.at(out[:, 1], src, 1)
    return out


def write_network(net: SubTransactionNetwork, directory) -> None:
    """Edge list ``u v`` (each undirected edge once, u < v) plus node table."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(net.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with open(directory / "edges.txt", "w", encoding="utf-8", newline="\n") as fh:
        for u, v in zip(upper.row[order], upper.col[order]):
            fh.write(f"{u} {v}\n")
    names = {PONZI: "ponzi", NORMAL: "normal"}
    with open(directory / "nodes.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "address", "label"])
        for i, a in enumerate(net.nodes):
            w.writerow([i, a, names.get(net.labels.get(i), "")])


def read_network(directory) -> SubTransactionNetwork:
    """Inverse of :func:`write_network`; labeled nodes are treated as centers.

    Multiplicities are not part of the export and come back as 1 per edge.
    """
    directory = Path(directory)
    nodes, labels = [], {}
    with open(directory / "nodes.csv", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            i = int(row["id"])
            if i != len(nodes):
                raise ValueError(f"node ids must be consecutive (got {i})")
            nodes.append(Address(row["address"]))
            if row["label"] == "ponzi":
                labels[i] = PONZI
            elif row["label"] == "normal":
                labels[i] = NORMAL
    pairs = np.loadtxt(directory / "edges.txt", dtype=np.int64, ndmin=2)
    if pairs.size == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    adj, mult = adjacency_from_pairs(len(nodes), pairs[:, 0], pairs[:, 1])
    return SubTransactionNetwork(tuple(nodes), adj, mult, frozenset(labels), labels)
