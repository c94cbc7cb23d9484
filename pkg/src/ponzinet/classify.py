"""Classical classifiers over feature or embedding rows.

Logistic regression and a linear SVM (full-batch (sub)gradient descent), a
one-hidden-layer MLP trained with Adam, and a Gini random forest with
mean-decrease-impurity importances. Class 1 is the positive (Ponzi) class;
every tie resolves to class 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from ._rng import next_u64, randint, seeded
from .gcn import Adam, NumericAbort, glorot


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X is {X.shape}, y has {y.shape[0]} entries")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or Inf")
    return X, y


def _require_two_classes(y):
    if np.unique(y).size < 2:
        raise ValueError("training labels contain a single class")


def _check_width(X, f):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != f:
        raise ValueError(f"expected {f} columns, got shape {X.shape}")
    return X


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- linear models -------------------------------------------------------------


@dataclass
class LinearModel:
    w: np.ndarray
    b: float
    kind: str  # "logreg" | "svm"
    history: list = field(default_factory=list)

    def decision_function(self, X):
        return _check_width(X, self.w.size) @ self.w + self.b

    def predict_proba(self, X):
        # for the SVM this is a logistic squashing of the margin, a ranking score only
        p1 = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


def logreg_objective(w, b, X, y, l2):
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    nll = np.logaddexp(0.0, z) - y * z
    return float(nll.mean() + 0.5 * l2 * w @ w)


def logreg_gradient(w, b, X, y, l2):
    r = _sigmoid(X @ w + b) - y
    m = X.shape[0]
    return X.T @ r / m + l2 * w, float(r.sum() / m)


def train_logreg(X, y, l2=1e-3, lr=0.1, epochs=500, seed=0) -> LinearModel:
    """L2-regularized logistic regression by full-batch gradient descent from zero weights."""
    X, y = _check_xy(X, y)
    _require_two_classes(y)
    w = np.zeros(X.shape[1])
    b = 0.0
    hist = []
    for _ in range(epochs):
        gw, gb = logreg_gradient(w, b, X, y, l2)
        w -= lr * gw
        b -= lr * gb
        hist.append(logreg_objective(w, b, X, y, l2))
    return LinearModel(w, b, "logreg", hist)


def svm_objective(w, b, X, y, C):
    s = np.where(y == 1, 1.0, -1.0)
    hinge = np.maximum(0.0, 1.0 - s * (X @ w + b))
    return float(0.5 * w @ w + C * hinge.mean())


def svm_subgradient(w, b, X, y, C):
    s = np.where(y == 1, 1.0, -1.0)
    active = s * (X @ w + b) < 1.0
    m = X.shape[0]
    gw = w - C * (s[active, None] * X[active]).sum(axis=0) / m
    gb = -C * s[active].sum() / m
    return gw, float(gb)


def train_linear_svm(X, y, C=10.0, lr=0.1, epochs=500, seed=0) -> LinearModel:
    """Primal linear SVM: 0.5|w|^2 + C mean hinge, subgradient steps lr/sqrt(t).

    Returns the iterate with the lowest objective seen.
    """
    X, y = _check_xy(X, y)
    _require_two_classes(y)
    w = np.zeros(X.shape[1])
    b = 0.0
    best = (svm_objective(w, b, X, y, C), w.copy(), b)
    hist = [best[0]]
    for t in range(1, epochs + 1):
        gw, gb = svm_subgradient(w, b, X, y, C)
        step = lr / math.sqrt(t)
        w = w - step * gw
        b = b - step * gb
        obj = svm_objective(w, b, X, y, C)
        hist.append(obj)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return LinearModel(best[1], best[2], "svm", hist)


# -- MLP -------------------------------------------------------------------------


@dataclass
class MLPModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    history: list = field(default_factory=list)

    @property
    def params(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def logits(self, X):
        X = _check_width(X, self.W1.shape[0])
        return np.maximum(X @ self.W1 + self.b1, 0.0) @ self.W2 + self.b2

    def predict_proba(self, X):
        L = self.logits(X)
        L = L - L.max(axis=1, keepdims=True)
        E = np.exp(L)
        return E / E.sum(axis=1, keepdims=True)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


def mlp_loss_and_grads(model: MLPModel, X, y):
    m = X.shape[0]
    A = X @ model.W1 + model.b1
    H = np.maximum(A, 0.0)
    L = H @ model.W2 + model.b2
    L = L - L.max(axis=1, keepdims=True)
    P = np.exp(L)
    P /= P.sum(axis=1, keepdims=True)
    loss = float(-np.mean(np.log(np.maximum(P[np.arange(m), y], 1e-12))))
    dL = P.copy()
    dL[np.arange(m), y] -= 1.0
    dL /= m
    dW2 = H.T @ dL
    db2 = dL.sum(axis=0)
    dA = (dL @ model.W2.T) * (A > 0)
    dW1 = X.T @ dA
    db1 = dA.sum(axis=0)
    return loss, [dW1, db1, dW2, db2]


def train_mlp_adam(X, y, hidden=32, lr=0.01, epochs=1000, seed=0) -> MLPModel:
    """One ReLU hidden layer, softmax output, full-batch Adam on cross-entropy."""
    X, y = _check_xy(X, y)
    _require_two_classes(y)
    rng = np.random.default_rng(seed)
    model = MLPModel(glorot(X.shape[1], hidden, rng), np.zeros(hidden), glorot(hidden, 2, rng), np.zeros(2))
    opt = Adam(lr)
    for epoch in range(1, epochs + 1):
        loss, grads = mlp_loss_and_grads(model, X, y)
        if not np.isfinite(loss):
            raise NumericAbort(epoch)
        model.history.append(loss)
        opt.step(model.params, grads)
    return model


# -- random forest -----------------------------------------------------------------

_TIE_EPS = 1e-12


@njit(cache=True)
def _gini_sum(c0, c1):
    # n * gini for a node with class counts c0, c1
    n = c0 + c1
    if n == 0:
        return 0.0
    return n - (c0 * c0 + c1 * c1) / n


@njit(cache=True)
def _best_split_on(X, y, idx, start, end, j, vals, order):
    """Lowest weighted Gini split of idx[start:end] on feature j.

    Returns (impurity_sum, threshold); impurity is inf when j is constant.
    """
    m = end - start
    for i in range(m):
        vals[i] = X[idx[start + i], j]
    o = np.argsort(vals[:m], kind="mergesort")
    total1 = 0.0
    for i in range(m):
        order[i] = o[i]
        total1 += y[idx[start + o[i]]]
    total0 = m - total1
    best = np.inf
    thr = 0.0
    l1 = 0.0
    for i in range(m - 1):
        l1 += y[idx[start + order[i]]]
        a = vals[order[i]]
        b = vals[order[i + 1]]
        if a == b:
            continue
        nl = i + 1.0
        l0 = nl - l1
        r1 = total1 - l1
        r0 = total0 - l0
        g = _gini_sum(l0, l1) + _gini_sum(r0, r1)
        if g < best - 1e-12:
            best = g
            mid = 0.5 * (a + b)
            thr = mid if mid < b else a
    return best, thr


@njit(cache=True)
def _child_key(key, side):
    st = np.empty(1, dtype=np.uint64)
    st[0] = key ^ (np.uint64(side + 1) * np.uint64(0x632BE59BD9B4E019))
    return next_u64(st)


@njit(cache=True)
def _build_tree(X, y, idx, max_depth, mtry, root_key,
                feature, threshold, left, right, count0, count1, importance):
    """Grow one tree over bootstrap rows ``idx`` (partitioned in place).

    Node arrays are filled in creation order; returns the node count. Feature
    subsets are drawn from a stream keyed by the node's path from the root,
    so a node's draws do not depend on ``max_depth`` or sibling subtrees.
    """
    f = X.shape[1]
    n_root = idx.shape[0]
    vals = np.empty(n_root)
    order = np.empty(n_root, dtype=np.int64)
    perm = np.empty(f, dtype=np.int64)
    cand = np.empty(f, dtype=np.int64)
    # stack of (node, start, end, depth, key)
    s_node = np.empty(2 * n_root + 2, dtype=np.int64)
    s_start = np.empty(2 * n_root + 2, dtype=np.int64)
    s_end = np.empty(2 * n_root + 2, dtype=np.int64)
    s_depth = np.empty(2 * n_root + 2, dtype=np.int64)
    s_key = np.empty(2 * n_root + 2, dtype=np.uint64)
    top = 0
    s_node[0] = 0
    s_start[0] = 0
    s_end[0] = n_root
    s_depth[0] = 0
    s_key[0] = root_key
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = s_node[top]
        start = s_start[top]
        end = s_end[top]
        depth = s_depth[top]
        key = s_key[top]
        m = end - start
        c1 = 0.0
        for i in range(start, end):
            c1 += y[idx[i]]
        c0 = m - c1
        count0[node] = c0
        count1[node] = c1
        left[node] = -1
        right[node] = -1
        feature[node] = -1
        if c0 == 0 or c1 == 0 or m < 2 or (max_depth >= 0 and depth >= max_depth):
            continue
        # random feature order for this node
        st = np.empty(1, dtype=np.uint64)
        st[0] = key
        for i in range(f):
            perm[i] = i
        for i in range(f - 1, 0, -1):
            r = randint(st, i + 1)
            tmp = perm[i]
            perm[i] = perm[r]
            perm[r] = tmp
        best = np.inf
        best_j = -1
        best_thr = 0.0
        pos = 0
        while pos < f and best_j < 0:
            # first batch: mtry features; afterwards one at a time until a split exists
            take = mtry if pos == 0 else 1
            nb = min(take, f - pos)
            for i in range(nb):
                cand[i] = perm[pos + i]
            pos += nb
            c = np.sort(cand[:nb])
            for i in range(nb):
                g, t = _best_split_on(X, y, idx, start, end, c[i], vals, order)
                if g < best - 1e-12:
                    best = g
                    best_j = c[i]
                    best_thr = t
        if best_j < 0:
            continue
        # partition rows: x <= thr to the left
        lo = start
        hi = end - 1
        while lo <= hi:
            if X[idx[lo], best_j] <= best_thr:
                lo += 1
            else:
                tmp = idx[lo]
                idx[lo] = idx[hi]
                idx[hi] = tmp
                hi -= 1
        mid = lo
        feature[node] = best_j
        threshold[node] = best_thr
        importance[best_j] += (_gini_sum(c0, c1) - best) / n_root
        ln = n_nodes
        rn = n_nodes + 1
        n_nodes += 2
        left[node] = ln
        right[node] = rn
        # right pushed first so the left subtree is grown first
        s_node[top] = rn
        s_start[top] = mid
        s_end[top] = end
        s_depth[top] = depth + 1
        s_key[top] = _child_key(key, 1)
        top += 1
        s_node[top] = ln
        s_start[top] = start
        s_end[top] = mid
        s_depth[top] = depth + 1
        s_key[top] = _child_key(key, 0)
        top += 1
    return n_nodes


@njit(cache=True)
def _tree_leaves(X, feature, threshold, left, right):
    m = X.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count0: np.ndarray
    count1: np.ndarray
    importance: np.ndarray  # raw weighted Gini decrease per feature

    @property
    def n_nodes(self):
        return self.feature.size

    def leaf_of(self, X):
        return _tree_leaves(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X):
        leaf = self.leaf_of(X)
        # majority vote inside the leaf, ties -> class 0
        return (self.count1[leaf] > self.count0[leaf]).astype(np.int64)


@dataclass
class ForestModel:
    trees: list
    n_features: int
    n_trees: int
    max_depth: int | None
    features_per_split: int
    seed: int

    def votes(self, X):
        X = _check_width(X, self.n_features)
        v = np.zeros(X.shape[0])
        for t in self.trees:
            v += t.predict(X)
        return v

    def predict_proba(self, X):
        p1 = self.votes(X) / len(self.trees)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        v = self.votes(X)
        return (v > len(self.trees) - v).astype(np.int64)


def _grow(X, y, rows, max_depth, mtry, root_key):
    n = rows.size
    cap = 2 * n + 1
    feature = np.empty(cap, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.empty(cap, dtype=np.int64)
    right = np.empty(cap, dtype=np.int64)
    count0 = np.empty(cap)
    count1 = np.empty(cap)
    importance = np.zeros(X.shape[1])
    idx = rows.astype(np.int64).copy()
    k = _build_tree(X, y, idx, -1 if max_depth is None else int(max_depth), int(mtry), np.uint64(root_key),
                    feature, threshold, left, right, count0, count1, importance)
    return Tree(feature[:k].copy(), threshold[:k].copy(), left[:k].copy(), right[:k].copy(),
                count0[:k].copy(), count1[:k].copy(), importance)


def train_forest(X, y, n_trees=100, max_depth=None, features_per_split=None, seed=0,
                 bootstrap=True) -> ForestModel:
    """Bagged Gini trees with per-node random feature subsets.

    Defaults: unlimited depth and ``ceil(sqrt(f))`` features per split. Each
    tree's bootstrap and split draws are seeded from ``(seed, tree index)``.
    """
    X, y = _check_xy(X, y)
    m, f = X.shape
    if m < 2:
        raise ValueError("forest needs at least two samples")
    mtry = features_per_split or int(math.ceil(math.sqrt(f)))
    mtry = max(1, min(f, mtry))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        rows = rng.integers(0, m, size=m) if bootstrap else np.arange(m)
        root_key = int(seeded(np.uint64(seed), t, 0x7EE)[0])
        trees.append(_grow(X, y, rows, max_depth, mtry, root_key))
    return ForestModel(trees, f, n_trees, max_depth, mtry, seed)


def mdi_importance(forest: ForestModel, f: int | None = None) -> np.ndarray:
    """Mean decrease in impurity per feature, averaged over trees, summing to 1."""
    f = forest.n_features if f is None else f
    imp = np.zeros(f)
    for t in forest.trees:
        imp += t.importance[:f]
    imp /= max(1, len(forest.trees))
    total = imp.sum()
    if total <= 0:
        return np.full(f, 1.0 / f)
    return imp / total


def predict_proba(model, X) -> np.ndarray:
    return model.predict_proba(X)


def train_classifier(name, X, y, seed=0, **kw):
    trainers = {
        "rf": train_forest,
        "lr": train_logreg,
        "svm": train_linear_svm,
        "mlp": train_mlp_adam,
    }
    if name not in trainers:
        raise ValueError(f"unknown classifier {name!r}")
    return trainers[name](X, y, seed=seed, **kw)
