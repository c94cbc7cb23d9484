"""Per-account transaction features (counts, amount statistics, lifetimes)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import SubTransactionNetwork, induced_records
from .ingest import TransactionStore

FEATURE_NAMES = (
    "count_in",
    "count_out",
    "value_total_in",
    "value_max_in",
    "value_min_in",
    "value_mean_in",
    "value_var_in",
    "value_total_out",
    "value_max_out",
    "value_min_out",
    "value_mean_out",
    "value_var_out",
    "lifetime_in",
    "lifetime_out",
)
N_FEATURES = len(FEATURE_NAMES)


def feature_names() -> list:
    return list(FEATURE_NAMES)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale


def _direction_stats(node, amount, ts, n):
    """count, total, max, min, mean, population var, lifetime for one direction."""
    # canonical reduction order: sums do not depend on record order
    order = np.lexsort((ts, amount, node))
    node, amount, ts = node[order], amount[order], ts[order]
    count = np.bincount(node, minlength=n).astype(np.float64)
    total = np.bincount(node, weights=amount, minlength=n)
    has = count > 0
    mean = np.zeros(n)
    mean[has] = total[has] / count[has]
    dev = amount - mean[node]
    var = np.zeros(n)
    var[has] = np.bincount(node, weights=dev * dev, minlength=n)[has] / count[has]

    vmax = np.full(n, -np.inf)
    vmin = np.full(n, np.inf)
    np.maximum.at(vmax, node, amount)
    np.minimum.at(vmin, node, amount)
    tmax = np.full(n, np.iinfo(np.int64).min)
    tmin = np.full(n, np.iinfo(np.int64).max)
    np.maximum.at(tmax, node, ts)
    np.minimum.at(tmin, node, ts)
    life = np.zeros(n)
    life[has] = (tmax[has] - tmin[has]).astype(np.float64)
    vmax[~has] = 0.0
    vmin[~has] = 0.0
    return count, total, vmax, vmin, mean, var, life


def extract_features(net: SubTransactionNetwork, store: TransactionStore) -> np.ndarray:
    """n x 14 feature matrix in :data:`FEATURE_NAMES` order, row i = node i."""
    src, dst, ether, ts = induced_records(net, store)
    n = net.n
    cin, tin, xin, nin, min_, vin, lin = _direction_stats(dst, ether, ts, n)
    cout, tout, xout, nout, mout, vout, lout = _direction_stats(src, ether, ts, n)
    X = np.column_stack([cin, cout, tin, xin, nin, min_, vin, tout, xout, nout, mout, vout, lin, lout])
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("non-finite feature value")
    return X


def fit_standardizer(X, fit_rows) -> Standardizer:
    fit_rows = np.asarray(fit_rows)
    if fit_rows.size == 0:
        raise ValueError("standardize needs at least one fit row")
    ref = np.asarray(X, dtype=np.float64)[fit_rows]
    mean = ref.mean(axis=0)
    std = ref.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return Standardizer(mean, scale)


def standardize(X, fit_rows):
    """Center/scale every column with statistics of ``fit_rows`` only.

    Returns ``(X_standardized, standardizer)``; zero-variance columns are
    centered and left unscaled.
    """
    st = fit_standardizer(X, fit_rows)
    return st.transform(X), st


def write_features(X, addresses, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", *FEATURE_NAMES])
        for a, row in zip(addresses, X):
            w.writerow([a, *(repr(float(v)) for v in row)])


def read_features(path):
    """Returns ``(addresses, X)``."""
    addrs, rows = [], []
    with open(Path(path), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["address", *FEATURE_NAMES]:
            raise ValueError("unexpected feature header")
        for row in reader:
            addrs.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return addrs, np.array(rows, dtype=np.float64).reshape(-1, N_FEATURES)
