"""Three-layer graph convolutional network with analytic backprop and Adam.

    Z = softmax(S relu(S relu(S X W0) W1) W2),   S = normalized adjacency

Full-batch training on a sparse propagation operator; loss is masked mean
cross-entropy plus ``weight_decay * sum ||W||^2``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"PZGCN\x00"
CHECKPOINT_VERSION = 1


class NumericAbort(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, message="non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    hidden: int = 32
    n_classes: int = 2
    dropout: float = 0.5
    max_epochs: int = 1000
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    patience: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class GcnModel:
    weights: list  # [W0 (f x h), W1 (h x h), W2 (h x y)]
    config: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    @property
    def shapes(self):
        return [w.shape for w in self.weights]


@dataclass
class ForwardCache:
    inputs: list  # dropped-out layer inputs H0, H1, H2
    masks: list  # inverted-dropout masks (None when off)
    propagated: list  # S @ H_k
    pre: list  # pre-activations P0, P1, P2
    Z: np.ndarray


def glorot(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(n_features, cfg: TrainConfig = TrainConfig(), seed=0, rng=None) -> GcnModel:
    rng = rng if rng is not None else np.random.default_rng(seed)
    dims = [n_features, cfg.hidden, cfg.hidden, cfg.n_classes]
    weights = [glorot(dims[i], dims[i + 1], rng) for i in range(3)]
    return GcnModel(weights, cfg, seed)


def softmax(P):
    P = P - P.max(axis=1, keepdims=True)
    E = np.exp(P)
    return E / E.sum(axis=1, keepdims=True)


def _check_shapes(model, S, X):
    n = X.shape[0]
    if S.shape != (n, n):
        raise ValueError(f"adjacency is {S.shape[0]}x{S.shape[1]} but X has {n} rows")
    W0, W1, W2 = model.weights
    if X.shape[1] != W0.shape[0]:
        raise ValueError(f"X has {X.shape[1]} columns but W0 expects {W0.shape[0]}")
    if W0.shape[1] != W1.shape[0] or W1.shape[1] != W2.shape[0]:
        raise ValueError(f"inconsistent weight shapes {model.shapes}")


def forward(model: GcnModel, S, X, train_mode=False, seed=None, rng=None, dropout=None):
    """Class probabilities ``Z`` (n x y) and the cache needed by :func:`backward`.

    In train mode each layer input is dropped with probability ``dropout``
    and survivors are scaled by ``1 / (1 - dropout)``.
    """
    X = np.asarray(X, dtype=np.float64)
    _check_shapes(model, S, X)
    rate = model.config.dropout if dropout is None else dropout
    if train_mode and rate > 0 and rng is None:
        rng = np.random.default_rng(seed)
    H = X
    inputs, masks, propagated, pre = [], [], [], []
    for k, W in enumerate(model.weights):
        if train_mode and rate > 0:
            mask = (rng.random(H.shape) >= rate) / (1.0 - rate)
            H = H * mask
        else:
            mask = None
        inputs.append(H)
        masks.append(mask)
        SH = S @ H
        propagated.append(SH)
        P = SH @ W
        pre.append(P)
        if k < 2:
            H = np.maximum(P, 0.0)
    Z = softmax(pre[-1])
    return Z, ForwardCache(inputs, masks, propagated, pre, Z)


def cross_entropy(Z, labels, mask) -> float:
    """Mean negative log-probability of the true class over masked nodes."""
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("loss needs a non-empty mask")
    y = np.asarray(labels)[idx]
    p = Z[idx, y]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def l2_penalty(weights, weight_decay) -> float:
    return float(weight_decay * sum(np.sum(W * W) for W in weights))


def loss(Z, labels, mask, weights=None, weight_decay=0.0) -> float:
    val = cross_entropy(Z, labels, mask)
    if weights is not None and weight_decay:
        val += l2_penalty(weights, weight_decay)
    return val


def backward(model: GcnModel, S, cache: ForwardCache, labels, mask, weight_decay=None) -> list:
    """Gradients of :func:`loss` w.r.t. W0, W1, W2 for the cached forward pass."""
    wd = model.config.weight_decay if weight_decay is None else weight_decay
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("loss needs a non-empty mask")
    y = np.asarray(labels)[idx]
    Z = cache.Z
    dP = np.zeros_like(Z)
    dP[idx] = Z[idx]
    dP[idx, y] -= 1.0
    # the probability floor is flat below PROB_FLOOR
    dP[idx[Z[idx, y] < PROB_FLOOR]] = 0.0
    dP /= idx.size

    grads = [None, None, None]
    for k in (2, 1, 0):
        W = model.weights[k]
        grads[k] = cache.propagated[k].T @ dP + 2.0 * wd * W
        if k == 0:
            break
        dH = S.T @ (dP @ W.T)
        if cache.masks[k] is not None:
            dH = dH * cache.masks[k]
        dP = dH * (cache.pre[k - 1] > 0)
    return grads


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _binary_f1(y_true, y_pred):
    tp = int(np.sum((y_pred == 1) & (y_true == 1)))
    fp = int(np.sum((y_pred == 1) & (y_true == 0)))
    fn = int(np.sum((y_pred == 0) & (y_true == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class TrainLog:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    best_epoch: int = -1
    initial_val_loss: float = float("nan")

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
            for row in zip(self.epoch, self.train_loss, self.val_loss, self.val_f1):
                w.writerow([row[0], *(f"{v:.10g}" for v in row[1:])])


def train(S, X, labels, train_mask, val_mask=None, cfg: TrainConfig = TrainConfig(), seed=0):
    """Full-batch Adam training; keeps the weights of the best validation epoch.

    All randomness (Glorot init, then per-epoch dropout masks) comes from a
    single generator seeded with ``seed``. Without a validation mask the
    training loss drives early stopping.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_idx = np.flatnonzero(train_mask) if np.asarray(train_mask).dtype == bool else np.asarray(train_mask)
    if val_mask is not None:
        val_idx = np.flatnonzero(val_mask) if np.asarray(val_mask).dtype == bool else np.asarray(val_mask)
        if np.intersect1d(train_idx, val_idx).size:
            raise ValueError("train and validation masks overlap")
        if val_idx.size == 0:
            val_idx = None
    else:
        val_idx = None
    if train_idx.size == 0:
        raise ValueError("empty training mask")

    rng = np.random.default_rng(seed)
    model = init_model(X.shape[1], cfg, seed, rng=rng)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    log = TrainLog()
    monitor = val_idx if val_idx is not None else train_idx

    def evaluate_loss():
        Z, _ = forward(model, S, X, train_mode=False)
        return Z, loss(Z, labels, monitor, model.weights, cfg.weight_decay)

    _, best = evaluate_loss()
    log.initial_val_loss = best
    best_weights = [W.copy() for W in model.weights]
    best_epoch, since = 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        Z, cache = forward(model, S, X, train_mode=True, rng=rng)
        tr = loss(Z, labels, train_idx, model.weights, cfg.weight_decay)
        if not np.isfinite(tr):
            raise NumericAbort(epoch)
        grads = backward(model, S, cache, labels, train_idx, cfg.weight_decay)
        opt.step(model.weights, grads)
        Zv, vl = evaluate_loss()
        if not np.isfinite(vl):
            raise NumericAbort(epoch, "non-finite validation loss")
        pred = np.argmax(Zv[monitor], axis=1)
        log.epoch.append(epoch)
        log.train_loss.append(tr)
        log.val_loss.append(vl)
        log.val_f1.append(_binary_f1(labels[monitor], pred))
        if vl < best:
            best, best_epoch, since = vl, epoch, 0
            best_weights = [W.copy() for W in model.weights]
        else:
            since += 1
            if since >= cfg.patience:
                break
    model.weights = best_weights
    log.best_epoch = best_epoch
    return model, log


def predict(model: GcnModel, S, X):
    """Argmax class per node (ties resolve to class 0) and the probabilities."""
    Z, _ = forward(model, S, X, train_mode=False)
    return np.argmax(Z, axis=1), Z


def hidden_representation(model: GcnModel, S, X) -> np.ndarray:
    """Layer-2 activations relu(S relu(S X W0) W1), for use as downstream features."""
    _, cache = forward(model, S, X, train_mode=False)
    return np.maximum(cache.pre[1], 0.0)


# -- checkpoint ----------------------------------------------------------------


def save_checkpoint(model: GcnModel, path) -> None:
    """Magic, version, JSON header (shapes, config, seed), then little-endian float64 weights."""
    header = json.dumps({
        "shapes": [list(w.shape) for w in model.weights],
        "config": asdict(model.config),
        "seed": model.seed,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for w in model.weights:
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def load_checkpoint(path) -> GcnModel:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError("not a GCN checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<HI", data, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += struct.calcsize("<HI")
    header = json.loads(data[off:off + hlen])
    off += hlen
    weights = []
    for shape in header["shapes"]:
        count = int(np.prod(shape))
        w = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        weights.append(w)
        off += 8 * count
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return GcnModel(weights, TrainConfig(**header["config"]), header["seed"])
