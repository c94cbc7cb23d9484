"""Cross-validated comparison of feature, embedding and GCN detectors.

Folds are stratified over labeled center nodes and re-drawn for every
repetition seed (model initialization is reseeded too). Embeddings are
trained once per (dataset, seed) on the whole network and shared by folds.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import classify, embed, gcn
from .features import N_FEATURES, extract_features, fit_standardizer
from .graph import NetworkStats, SubTransactionNetwork, build_subnetwork, normalize_adjacency, stats
from .ingest import LabelSet, TransactionStore

log = logging.getLogger(__name__)

METHODS = (
    "feature_rf",
    "feature_lr",
    "feature_svm",
    "feature_mlp",
    "line_rf",
    "deepwalk_rf",
    "node2vec_rf",
    "gcn_feature",
)
FEATURE_CLASSIFIER = {"feature_rf": "rf", "feature_lr": "lr", "feature_svm": "svm", "feature_mlp": "mlp"}
EMBEDDING_OF = {"line_rf": "line2", "deepwalk_rf": "deepwalk", "node2vec_rf": "node2vec"}

FOLD_POLICY = "folds and model initialization reseeded per repetition"


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    features_per_split: int | None = None


@dataclass(frozen=True)
class LinearParams:
    logreg_l2: float = 1e-3
    logreg_lr: float = 0.1
    logreg_epochs: int = 500
    svm_C: float = 10.0
    svm_lr: float = 0.1
    svm_epochs: int = 500
    mlp_hidden: int = 32
    mlp_lr: float = 0.01
    mlp_epochs: int = 1000


@dataclass(frozen=True)
class EvalConfig:
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    k: int = 5
    val_fraction: float = 0.2
    node2vec_grid: tuple = (0.5, 1.0, 2.0)
    walk: embed.WalkConfig = field(default_factory=embed.WalkConfig)
    gcn: gcn.TrainConfig = field(default_factory=gcn.TrainConfig)
    forest: ForestParams = field(default_factory=ForestParams)
    linear: LinearParams = field(default_factory=LinearParams)


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # k arrays of labeled node ids
    seed: int

    def split(self, i):
        test = self.folds[i]
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, test


@dataclass(frozen=True)
class EvalRow:
    dataset: str
    method: str
    seed: int
    fold: int
    precision: float
    recall: float
    f1: float


@dataclass
class Dataset:
    name: str
    store: TransactionStore
    labels: LabelSet
    net: SubTransactionNetwork
    X: np.ndarray
    S: object  # normalized adjacency

    @property
    def stats(self) -> NetworkStats:
        return stats(self.net)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    importances: dict = field(default_factory=dict)  # dataset -> list of MDI vectors
    table1: dict = field(default_factory=dict)  # dataset -> NetworkStats
    metadata: dict = field(default_factory=dict)


def prepare_dataset(name, store: TransactionStore, labels: LabelSet) -> Dataset:
    labels.require_both()
    net = build_subnetwork(store, labels.addresses, labels)
    X = extract_features(net, store)
    return Dataset(name, store, labels, net, X, normalize_adjacency(net))


# -- folds and metrics ------------------------------------------------------------


def make_folds(ids, y, k=5, seed=0) -> FoldPlan:
    """Stratified k-fold plan over ``ids`` (labels ``y``), deterministic in ``seed``.

    Each class is shuffled and dealt round-robin; the deal continues across
    classes so total fold sizes also differ by at most one.
    """
    ids = np.asarray(ids, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng([seed, 0xF01D])
    buckets = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(y):
        members = ids[y == cls]
        if members.size < k:
            raise ValueError(f"class {cls} has {members.size} samples, fewer than k={k}")
        for node in rng.permutation(members):
            buckets[pos % k].append(int(node))
            pos += 1
    return FoldPlan(tuple(np.array(sorted(b), dtype=np.int64) for b in buckets), seed)


def metrics(y_true, y_pred, positive=1):
    """(precision, recall, f1) for the positive class; zero denominators give 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    tp = int(np.sum((y_pred == positive) & (y_true == positive)))
    fp = int(np.sum((y_pred == positive) & (y_true != positive)))
    fn = int(np.sum((y_pred != positive) & (y_true == positive)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def inner_split(train_ids, y_train, fraction, seed):
    """Stratified (fit, validation) split of training ids."""
    rng = np.random.default_rng([seed, 0x5A1])
    fit, val = [], []
    for cls in np.unique(y_train):
        members = rng.permutation(train_ids[y_train == cls])
        n_val = max(1, int(round(fraction * members.size))) if members.size > 1 else 0
        val.extend(members[:n_val])
        fit.extend(members[n_val:])
    return np.array(sorted(fit), dtype=np.int64), np.array(sorted(val), dtype=np.int64)


# -- per-fold fitting (never reads test rows) ------------------------------------


def _fit_classifier(name, X, y, seed, cfg: EvalConfig):
    if name == "rf":
        f = cfg.forest
        return classify.train_forest(X, y, n_trees=f.n_trees, max_depth=f.max_depth,
                                     features_per_split=f.features_per_split, seed=seed)
    p = cfg.linear
    if name == "lr":
        return classify.train_logreg(X, y, l2=p.logreg_l2, lr=p.logreg_lr, epochs=p.logreg_epochs, seed=seed)
    if name == "svm":
        return classify.train_linear_svm(X, y, C=p.svm_C, lr=p.svm_lr, epochs=p.svm_epochs, seed=seed)
    if name == "mlp":
        return classify.train_mlp_adam(X, y, hidden=p.mlp_hidden, lr=p.mlp_lr, epochs=p.mlp_epochs, seed=seed)
    raise ValueError(f"unknown classifier {name!r}")


def fit_feature_fold(clf, X, y, train_rows, seed, cfg: EvalConfig, scale=True):
    """Fit scaler + classifier on ``train_rows`` only; returns (predict_fn, model)."""
    scaler = fit_standardizer(X, train_rows) if scale else None
    Xt = scaler.transform(X[train_rows]) if scale else X[train_rows]
    model = _fit_classifier(clf, Xt, y[train_rows], seed, cfg)

    def predict(rows_X):
        Z = scaler.transform(rows_X) if scale else np.asarray(rows_X)
        return model.predict(Z)

    return predict, model


def gcn_fold(ds: Dataset, train_ids, test_ids, seed, cfg: EvalConfig):
    """Train the GCN on one fold; returns (predictions for test_ids, model, log)."""
    y_all = np.zeros(ds.net.n, dtype=np.int64)
    for i, lab in ds.net.labels.items():
        y_all[i] = lab
    fit_ids, val_ids = inner_split(train_ids, y_all[train_ids], cfg.val_fraction, seed)
    keep = np.ones(ds.net.n, dtype=bool)
    keep[test_ids] = False
    scaler = fit_standardizer(ds.X, np.flatnonzero(keep))
    Xs = scaler.transform(ds.X)
    model, tlog = gcn.train(ds.S, Xs, y_all, fit_ids, val_ids, cfg.gcn, seed=seed)
    pred, _ = gcn.predict(model, ds.S, Xs)
    return pred[test_ids], model, tlog


# -- method runners ---------------------------------------------------------------


class EmbeddingCache:
    """Embeddings keyed by (dataset, method, p, q, seed); trained on first use."""

    def __init__(self):
        self._store = {}

    def get(self, ds: Dataset, method, seed, cfg: embed.WalkConfig):
        key = (ds.name, method, cfg.p, cfg.q, seed)
        if key not in self._store:
            t0 = time.perf_counter()
            self._store[key] = embed.embed(ds.net, method, cfg, seed).vectors
            log.info("embedding %s seed=%s p=%s q=%s on %s: %.1fs", method, seed, cfg.p, cfg.q,
                     ds.name, time.perf_counter() - t0)
        return self._store[key]


def _row(ds, method, seed, fold, y_true, y_pred):
    p, r, f = metrics(y_true, y_pred)
    return EvalRow(ds.name, method, int(seed), int(fold), p, r, f)


def run_method(method, ds: Dataset, seeds, cfg: EvalConfig = EvalConfig(), cache=None, importances=None):
    """All (seed, fold) rows of one method on one dataset."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cache = cache if cache is not None else EmbeddingCache()
    ids = ds.net.labeled_ids()
    y_nodes = np.zeros(ds.net.n, dtype=np.int64)
    y_nodes[ids] = ds.net.label_array(ids)
    rows = []
    for seed in seeds:
        plan = make_folds(ids, y_nodes[ids], cfg.k, seed)
        for fold in range(cfg.k):
            train, test = plan.split(fold)
            fold_seed = int(seed) * 1000 + fold
            if method in FEATURE_CLASSIFIER:
                predict, model = fit_feature_fold(FEATURE_CLASSIFIER[method], ds.X, y_nodes, train, fold_seed, cfg)
                pred = predict(ds.X[test])
                if method == "feature_rf" and importances is not None:
                    importances.setdefault(ds.name, []).append(classify.mdi_importance(model, N_FEATURES))
            elif method == "gcn_feature":
                pred, _, _ = gcn_fold(ds, train, test, fold_seed, cfg)
            elif method == "node2vec_rf":
                pred = _node2vec_fold(ds, y_nodes, train, test, seed, fold_seed, cfg, cache)
            else:
                E = cache.get(ds, EMBEDDING_OF[method], seed, cfg.walk)
                predict, _ = fit_feature_fold("rf", E, y_nodes, train, fold_seed, cfg, scale=False)
                pred = predict(E[test])
            rows.append(_row(ds, method, seed, fold, y_nodes[test], pred))
    return rows


def _node2vec_fold(ds, y_nodes, train, test, seed, fold_seed, cfg, cache):
    """Pick (p, q) on an inner validation split by F1, then refit on the fold."""
    fit_ids, val_ids = inner_split(train, y_nodes[train], cfg.val_fraction, fold_seed)
    best, best_E = -1.0, None
    for p in cfg.node2vec_grid:
        for q in cfg.node2vec_grid:
            E = cache.get(ds, "node2vec", seed, embed.with_pq(cfg.walk, p, q))
            predict, _ = fit_feature_fold("rf", E, y_nodes, fit_ids, fold_seed, cfg, scale=False)
            f1 = metrics(y_nodes[val_ids], predict(E[val_ids]))[2]
            if f1 > best:
                best, best_E = f1, E
    predict, _ = fit_feature_fold("rf", best_E, y_nodes, train, fold_seed, cfg, scale=False)
    return predict(best_E[test])


def _run_cell(args):
    method, ds, seed, cfg = args
    imps = {}
    rows = run_method(method, ds, [seed], cfg, EmbeddingCache(), imps)
    return rows, imps


def evaluate(datasets, cfg: EvalConfig = EvalConfig(), workers=1) -> EvalReport:
    """Run every configured method on every dataset; rows come back sorted."""
    report = EvalReport()
    report.metadata = {"fold_policy": FOLD_POLICY, "seeds": list(cfg.seeds), "k": cfg.k,
                       "methods": list(cfg.methods), "datasets": [ds.name for ds in datasets]}
    for ds in datasets:
        report.table1[ds.name] = ds.stats
    if workers > 1:
        import multiprocessing
        from concurrent.futures import ProcessPoolExecutor

        tasks = [(m, ds, s, cfg) for ds in datasets for m in cfg.methods for s in cfg.seeds]
        # fork after numba has spun up its thread pool can deadlock the children
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            for rows, imps in pool.map(_run_cell, tasks):
                report.rows.extend(rows)
                for k, v in imps.items():
                    report.importances.setdefault(k, []).extend(v)
    else:
        for ds in datasets:
            cache = EmbeddingCache()
            for m in cfg.methods:
                t0 = time.perf_counter()
                report.rows.extend(run_method(m, ds, cfg.seeds, cfg, cache, report.importances))
                log.info("%s on %s: %.1fs", m, ds.name, time.perf_counter() - t0)
    report.rows.sort(key=lambda r: (r.dataset, METHODS.index(r.method), r.seed, r.fold))
    return report


# -- aggregation --------------------------------------------------------------------


def aggregate(rows):
    """{(dataset, method): {metric: (mean, std, count)}} over seeds x folds (population std)."""
    groups = {}
    for r in sorted(rows, key=lambda r: (r.dataset, r.method, r.seed, r.fold)):
        groups.setdefault((r.dataset, r.method), []).append(r)
    out = {}
    for key, rs in groups.items():
        out[key] = {}
        for m in ("precision", "recall", "f1"):
            v = np.array([getattr(r, m) for r in rs], dtype=np.float64)
            out[key][m] = (float(v.mean()), float(v.std()), len(v))
    return out


def mean_importance(report: EvalReport, dataset=None) -> np.ndarray:
    vecs = []
    for name in sorted(report.importances):
        if dataset is None or name == dataset:
            vecs.extend(report.importances[name])
    if not vecs:
        return np.full(N_FEATURES, np.nan)
    return np.mean(np.array(vecs), axis=0)


def config_dict(cfg: EvalConfig) -> dict:
    d = asdict(cfg)
    d["methods"] = list(cfg.methods)
    d["seeds"] = list(cfg.seeds)
    d["node2vec_grid"] = list(cfg.node2vec_grid)
    return d


def with_seeds(cfg: EvalConfig, seeds) -> EvalConfig:
    return replace(cfg, seeds=tuple(int(s) for s in seeds))
