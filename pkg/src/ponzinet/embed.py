"""Random-walk (DeepWalk, node2vec) and LINE-2nd node embeddings.

Walks, skip-gram negative sampling and LINE edge sampling run in numba
kernels driven by a counter-based splitmix64 generator, so every result is a
pure function of ``(graph, config, seed)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numba import njit

from ._rng import randint as _randint, seeded as _seeded, uniform as _uniform
from .graph import SubTransactionNetwork

CLIP_NORM = 5.0
# above this many alias entries node2vec switches to exact rejection sampling
ALIAS_BUDGET = 10_000_000


@dataclass(frozen=True)
class WalkConfig:
    walk_length: int = 80
    walks_per_node: int = 10
    window: int = 10
    dim: int = 128
    p: float = 1.0
    q: float = 1.0
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    line_samples_per_edge: int = 100

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"WalkConfig.{name} must be positive (got {v})")


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    method: str
    config: dict
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


# -- alias tables -------------------------------------------------------------


@njit(cache=True)
def _alias_fill(weights, prob, alias):
    """Walker alias table for unnormalized ``weights`` written into prob/alias."""
    k = weights.shape[0]
    total = 0.0
    for i in range(k):
        total += weights[i]
    small = np.empty(k, dtype=np.int64)
    large = np.empty(k, dtype=np.int64)
    ns = 0
    nl = 0
    for i in range(k):
        prob[i] = weights[i] * k / total
        alias[i] = i
        if prob[i] < 1.0:
            small[ns] = i
            ns += 1
        else:
            large[nl] = i
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        s = small[ns]
        nl -= 1
        g = large[nl]
        alias[s] = g
        prob[g] = prob[g] + prob[s] - 1.0
        if prob[g] < 1.0:
            small[ns] = g
            ns += 1
        else:
            large[nl] = g
            nl += 1
    while nl > 0:
        nl -= 1
        prob[large[nl]] = 1.0
    while ns > 0:
        ns -= 1
        prob[small[ns]] = 1.0


def alias_setup(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("alias_setup needs a non-empty non-negative weight vector")
    prob = np.empty(w.size)
    alias = np.empty(w.size, dtype=np.int64)
    _alias_fill(w, prob, alias)
    return prob, alias


def alias_probabilities(prob, alias) -> np.ndarray:
    """Outcome distribution encoded by an alias table."""
    k = len(prob)
    out = np.array(prob, dtype=np.float64)
    for j in range(k):
        if alias[j] != j:
            out[alias[j]] += 1.0 - prob[j]
    return out / k


@njit(cache=True)
def _alias_draw(state, prob, alias, offset, k):
    i = _randint(state, k)
    if _uniform(state) < prob[offset + i]:
        return i
    return alias[offset + i]


# -- walks --------------------------------------------------------------------


def _csr(net):
    a = net.adjacency
    return a.indptr.astype(np.int64), a.indices.astype(np.int64)


def _schedule(n, walks_per_node, seed):
    """Start nodes (one shuffled pass per round) and their round index."""
    rng = np.random.default_rng([seed, 0x5EED])
    starts = np.empty(n * walks_per_node, dtype=np.int64)
    rounds = np.empty(n * walks_per_node, dtype=np.int64)
    for r in range(walks_per_node):
        starts[r * n:(r + 1) * n] = rng.permutation(n)
        rounds[r * n:(r + 1) * n] = r
    return starts, rounds


@njit(cache=True)
def _uniform_walks(indptr, indices, starts, rounds, seed, out):
    length = out.shape[1]
    for w in range(starts.shape[0]):
        cur = starts[w]
        state = _seeded(seed, cur, rounds[w])
        out[w, 0] = cur
        for step in range(1, length):
            deg = indptr[cur + 1] - indptr[cur]
            if deg == 0:
                break
            cur = indices[indptr[cur] + _randint(state, deg)]
            out[w, step] = cur


@njit(cache=True)
def _edge_weight(indptr, indices, prev, x, inv_p, inv_q):
    if x == prev:
        return inv_p
    lo = indptr[prev]
    hi = indptr[prev + 1]
    while lo < hi:
        mid = (lo + hi) // 2
        if indices[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    if lo < indptr[prev + 1] and indices[lo] == x:
        return 1.0
    return inv_q


@njit(cache=True)
def _edge_alias_tables(indptr, indices, inv_p, inv_q, offsets, prob, alias):
    n = indptr.shape[0] - 1
    for t in range(n):
        for e in range(indptr[t], indptr[t + 1]):
            v = indices[e]
            a = indptr[v]
            k = indptr[v + 1] - a
            w = np.empty(k)
            for j in range(k):
                w[j] = _edge_weight(indptr, indices, t, indices[a + j], inv_p, inv_q)
            o = offsets[e]
            _alias_fill(w, prob[o:o + k], alias[o:o + k])


@njit(cache=True)
def _biased_walks(indptr, indices, starts, rounds, seed, inv_p, inv_q,
                  use_alias, offsets, prob, alias, out):
    length = out.shape[1]
    bound = max(inv_p, 1.0, inv_q)
    for w in range(starts.shape[0]):
        cur = starts[w]
        state = _seeded(seed, cur, rounds[w])
        out[w, 0] = cur
        deg = indptr[cur + 1] - indptr[cur]
        if length < 2 or deg == 0:
            continue
        e = indptr[cur] + _randint(state, deg)
        prev = cur
        cur = indices[e]
        out[w, 1] = cur
        for step in range(2, length):
            base = indptr[cur]
            deg = indptr[cur + 1] - base
            if deg == 0:
                break
            if use_alias:
                j = _alias_draw(state, prob, alias, offsets[e], deg)
            else:
                while True:
                    j = _randint(state, deg)
                    wx = _edge_weight(indptr, indices, prev, indices[base + j], inv_p, inv_q)
                    if _uniform(state) * bound < wx:
                        break
            e = base + j
            prev = cur
            cur = indices[e]
            out[w, step] = cur


def _unpad(out):
    walks = []
    for row in out:
        k = np.searchsorted(row < 0, True) if row[-1] < 0 else len(row)
        walks.append(row[:k].copy())
    return walks


def random_walks(net: SubTransactionNetwork, cfg: WalkConfig, seed: int) -> list:
    """Uniform walks: ``walks_per_node`` per node, each at most ``walk_length`` long.

    Walks stop early at nodes without neighbors.
    """
    indptr, indices = _csr(net)
    starts, rounds = _schedule(net.n, cfg.walks_per_node, seed)
    out = np.full((len(starts), cfg.walk_length), -1, dtype=np.int64)
    _uniform_walks(indptr, indices, starts, rounds, np.uint64(seed), out)
    return _unpad(out)


def edge_alias_tables(net: SubTransactionNetwork, p: float, q: float):
    """Alias tables for every directed edge t->v over the neighbors of v.

    Returns ``(offsets, prob, alias)``; the table of edge ``e`` (CSR position
    of v in row t) spans ``offsets[e] : offsets[e] + deg(v)``.
    """
    indptr, indices = _csr(net)
    deg = np.diff(indptr)
    sizes = deg[indices]
    offsets = np.zeros(len(indices) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    prob = np.empty(offsets[-1])
    alias = np.empty(offsets[-1], dtype=np.int64)
    _edge_alias_tables(indptr, indices, 1.0 / p, 1.0 / q, offsets, prob, alias)
    return offsets, prob, alias


def biased_walks(net: SubTransactionNetwork, cfg: WalkConfig, seed: int, use_alias: bool | None = None) -> list:
    """node2vec second-order walks with return weight 1/p and outward weight 1/q."""
    indptr, indices = _csr(net)
    if use_alias is None:
        use_alias = int(np.diff(indptr)[indices].sum()) <= ALIAS_BUDGET
    if use_alias:
        offsets, prob, alias = edge_alias_tables(net, cfg.p, cfg.q)
    else:
        offsets = np.zeros(1, dtype=np.int64)
        prob = np.zeros(1)
        alias = np.zeros(1, dtype=np.int64)
    starts, rounds = _schedule(net.n, cfg.walks_per_node, seed)
    out = np.full((len(starts), cfg.walk_length), -1, dtype=np.int64)
    _biased_walks(indptr, indices, starts, rounds, np.uint64(seed), 1.0 / cfg.p, 1.0 / cfg.q,
                  use_alias, offsets, prob, alias, out)
    return _unpad(out)


def first_order_law(net: SubTransactionNetwork) -> dict:
    """{(v, x): P(next = x | at v)} for the uniform walk."""
    law = {}
    for v in range(net.n):
        nb = net.neighbors(v)
        for x in nb:
            law[(v, int(x))] = 1.0 / len(nb)
    return law


def second_order_law(net: SubTransactionNetwork, p: float, q: float) -> dict:
    """{(t, v, x): P(next = x | prev = t, at v)} read back from the alias tables."""
    indptr, indices = _csr(net)
    offsets, prob, alias = edge_alias_tables(net, p, q)
    law = {}
    for t in range(net.n):
        for e in range(indptr[t], indptr[t + 1]):
            v = int(indices[e])
            o, k = offsets[e], indptr[v + 1] - indptr[v]
            dist = alias_probabilities(prob[o:o + k], alias[o:o + k])
            for j in range(k):
                law[(t, v, int(indices[indptr[v] + j]))] = float(dist[j])
    return law


# -- skip-gram with negative sampling ----------------------------------------


@njit(cache=True)
def _sigmoid_loss(f, label):
    # returns (sigma(f), -log-likelihood) with f clipped to avoid overflow
    if f > 30.0:
        f = 30.0
    elif f < -30.0:
        f = -30.0
    s = 1.0 / (1.0 + math.exp(-f))
    if label == 1:
        return s, -math.log(max(s, 1e-12))
    return s, -math.log(max(1.0 - s, 1e-12))


@njit(cache=True)
def _clip(vec, limit):
    norm = 0.0
    for i in range(vec.shape[0]):
        norm += vec[i] * vec[i]
    norm = math.sqrt(norm)
    if norm > limit:
        vec *= limit / norm


@njit(cache=True, fastmath=True)
def _sgns_kernel(corpus, offsets, syn0, syn1, noise_prob, noise_alias, window, negative,
                 epochs, lr0, seed, loss_sum, loss_cnt):
    nwalks = offsets.shape[0] - 1
    ntok = corpus.shape[0]
    total = epochs * ntok
    nbins = loss_sum.shape[0]
    nvocab = noise_prob.shape[0]
    d = syn0.shape[1]
    state = _seeded(seed, 0x5695, 0)
    neu1e = np.zeros(d)
    gout = np.zeros(d)
    processed = 0
    for ep in range(epochs):
        for w in range(nwalks):
            a = offsets[w]
            b = offsets[w + 1]
            for pos in range(a, b):
                lr = lr0 * max(1e-4, 1.0 - processed / total)
                center = corpus[pos]
                eff = window - _randint(state, window)
                lo = max(a, pos - eff)
                hi = min(b, pos + eff + 1)
                bin_ = processed * nbins // total
                for cpos in range(lo, hi):
                    if cpos == pos:
                        continue
                    v_in = syn0[corpus[cpos]]
                    neu1e[:] = 0.0
                    loss = 0.0
                    for k in range(negative + 1):
                        if k == 0:
                            target = center
                            label = 1
                        else:
                            target = _alias_draw(state, noise_prob, noise_alias, 0, nvocab)
                            if target == center:
                                continue
                            label = 0
                        v_out = syn1[target]
                        f = 0.0
                        for i in range(d):
                            f += v_in[i] * v_out[i]
                        s, l = _sigmoid_loss(f, label)
                        loss += l
                        g = label - s
                        for i in range(d):
                            neu1e[i] += g * v_out[i]
                            gout[i] = g * v_in[i]
                        _clip(gout, CLIP_NORM)
                        for i in range(d):
                            v_out[i] += lr * gout[i]
                    _clip(neu1e, CLIP_NORM)
                    for i in range(d):
                        v_in[i] += lr * neu1e[i]
                    loss_sum[bin_] += loss
                    loss_cnt[bin_] += 1
                processed += 1


def _init_vectors(n, d, seed):
    rng = np.random.default_rng([seed, 0x1A17])
    return (rng.random((n, d)) - 0.5) / d


def _noise_table(counts):
    w = np.power(counts.astype(np.float64), 0.75)
    if w.sum() <= 0:
        w = np.ones_like(w)
    return alias_setup(w)


def _loss_curve(loss_sum, loss_cnt):
    ok = loss_cnt > 0
    return loss_sum[ok] / loss_cnt[ok]


def train_sgns(walks, cfg: WalkConfig, seed: int, n_nodes: int | None = None,
               method: str = "deepwalk", loss_bins: int = 100) -> EmbeddingMatrix:
    """Skip-gram with negative sampling over node-id walks.

    Context pairs lie within a window shrunk uniformly at random to
    ``1..window`` per center; noise follows unigram^0.75; the learning rate
    decays linearly to 1e-4 of its start.
    """
    walks = [np.asarray(w, dtype=np.int64) for w in walks]
    walks = [w for w in walks if len(w)]
    if not walks:
        raise ValueError("empty vocabulary: no walks to train on")
    corpus = np.concatenate(walks)
    if n_nodes is None:
        n_nodes = int(corpus.max()) + 1
    offsets = np.zeros(len(walks) + 1, dtype=np.int64)
    np.cumsum([len(w) for w in walks], out=offsets[1:])
    counts = np.bincount(corpus, minlength=n_nodes)
    noise_prob, noise_alias = _noise_table(counts)
    syn0 = _init_vectors(n_nodes, cfg.dim, seed)
    syn1 = np.zeros((n_nodes, cfg.dim))
    loss_sum = np.zeros(loss_bins)
    loss_cnt = np.zeros(loss_bins, dtype=np.int64)
    _sgns_kernel(corpus, offsets, syn0, syn1, noise_prob, noise_alias, cfg.window, cfg.negatives,
                 cfg.epochs, cfg.learning_rate, np.uint64(seed), loss_sum, loss_cnt)
    if not np.all(np.isfinite(syn0)):
        raise FloatingPointError("non-finite embedding after SGNS training")
    return EmbeddingMatrix(syn0, method, asdict(cfg), _loss_curve(loss_sum, loss_cnt))


def deepwalk(net: SubTransactionNetwork, cfg: WalkConfig, seed: int) -> EmbeddingMatrix:
    walks = random_walks(net, cfg, seed)
    return train_sgns(walks, cfg, seed, n_nodes=net.n, method="deepwalk")


def node2vec(net: SubTransactionNetwork, cfg: WalkConfig, seed: int) -> EmbeddingMatrix:
    walks = biased_walks(net, cfg, seed)
    return train_sgns(walks, cfg, seed, n_nodes=net.n, method=f"node2vec(p={cfg.p:g},q={cfg.q:g})")


# -- LINE, second-order proximity ----------------------------------------------


@njit(cache=True, fastmath=True)
def _line2_kernel(src, dst, emb, ctx, noise_prob, noise_alias, negative, samples, lr0, seed,
                  loss_sum, loss_cnt):
    m = src.shape[0]
    nvocab = noise_prob.shape[0]
    nbins = loss_sum.shape[0]
    d = emb.shape[1]
    state = _seeded(seed, 0x11E2, 0)
    err = np.zeros(d)
    gout = np.zeros(d)
    for t in range(samples):
        lr = lr0 * max(1e-4, 1.0 - t / samples)
        e = _randint(state, m)
        v_in = emb[src[e]]
        err[:] = 0.0
        loss = 0.0
        for k in range(negative + 1):
            if k == 0:
                target = dst[e]
                label = 1
            else:
                target = _alias_draw(state, noise_prob, noise_alias, 0, nvocab)
                if target == dst[e]:
                    continue
                label = 0
            v_out = ctx[target]
            f = 0.0
            for i in range(d):
                f += v_in[i] * v_out[i]
            s, l = _sigmoid_loss(f, label)
            loss += l
            g = label - s
            for i in range(d):
                err[i] += g * v_out[i]
                gout[i] = g * v_in[i]
            _clip(gout, CLIP_NORM)
            for i in range(d):
                v_out[i] += lr * gout[i]
        _clip(err, CLIP_NORM)
        for i in range(d):
            v_in[i] += lr * err[i]
        b = t * nbins // samples
        loss_sum[b] += loss
        loss_cnt[b] += 1


def train_line2(net: SubTransactionNetwork, cfg: WalkConfig, seed: int, loss_bins: int = 100) -> EmbeddingMatrix:
    """LINE with second-order proximity: node vectors predict neighbor contexts.

    Directed edges are sampled uniformly (binary adjacency, both directions);
    ``line_samples_per_edge * |E|`` updates in total.
    """
    if net.n_edges == 0:
        raise ValueError("LINE needs at least one edge")
    indptr, indices = _csr(net)
    src = np.repeat(np.arange(net.n, dtype=np.int64), np.diff(indptr))
    dst = indices.copy()
    deg = np.diff(indptr)
    noise_prob, noise_alias = _noise_table(deg)
    emb = _init_vectors(net.n, cfg.dim, seed)
    ctx = np.zeros((net.n, cfg.dim))
    samples = cfg.line_samples_per_edge * net.n_edges
    loss_sum = np.zeros(loss_bins)
    loss_cnt = np.zeros(loss_bins, dtype=np.int64)
    _line2_kernel(src, dst, emb, ctx, noise_prob, noise_alias, cfg.negatives, samples,
                  cfg.learning_rate, np.uint64(seed), loss_sum, loss_cnt)
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("non-finite embedding after LINE training")
    return EmbeddingMatrix(emb, "line2", asdict(cfg), _loss_curve(loss_sum, loss_cnt))


def embed(net: SubTransactionNetwork, method: str, cfg: WalkConfig, seed: int) -> EmbeddingMatrix:
    if method == "deepwalk":
        return deepwalk(net, cfg, seed)
    if method == "node2vec":
        return node2vec(net, cfg, seed)
    if method in ("line", "line2"):
        return train_line2(net, cfg, seed)
    raise ValueError(f"unknown embedding method {method!r}")


def write_embedding(E: EmbeddingMatrix, addresses, path) -> None:
    d = E.vectors.shape[1]
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", *(f"e{i}" for i in range(d))])
        for a, row in zip(addresses, E.vectors):
            w.writerow([a, *(repr(float(v)) for v in row)])


def read_embedding(path):
    addrs, rows = [], []
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for row in reader:
            addrs.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return addrs, np.array(rows, dtype=np.float64).reshape(-1, len(header) - 1)


def with_pq(cfg: WalkConfig, p: float, q: float) -> WalkConfig:
    return replace(cfg, p=p, q=q)
