import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph, two_cliques
from ponzinet import gcn
from ponzinet.gcn import GcnModel, TrainConfig
from ponzinet.graph import normalize_adjacency


def instance(seed, n=8, f=5, h=4, p=0.4):
    rng = np.random.default_rng(seed)
    A = random_graph(rng, n, p)
    S = normalize_adjacency(sp.csr_matrix(A))
    X = rng.standard_normal((n, f))
    y = rng.integers(0, 2, n)
    model = gcn.init_model(f, TrainConfig(hidden=h), seed=seed)
    return S, X, y, model


def dense_forward(W, S, X):
    S = S.toarray() if sp.issparse(S) else S
    H1 = np.maximum(S @ X @ W[0], 0)
    H2 = np.maximum(S @ H1 @ W[1], 0)
    P = S @ H2 @ W[2]
    E = np.exp(P - P.max(axis=1, keepdims=True))
    return E / E.sum(axis=1, keepdims=True)


def naive_loss(Z, y, idx):
    return sum(-np.log(max(Z[i, y[i]], 1e-12)) for i in idx) / len(idx)


# -- forward ------------------------------------------------------------------


def test_zero_weights_uniform():
    S, X, _, model = instance(0)
    model.weights = [np.zeros_like(W) for W in model.weights]
    Z, _ = gcn.forward(model, S, X)
    assert np.all(Z == 0.5)


def test_single_isolated_node():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 3))
    model = gcn.init_model(3, TrainConfig(hidden=4), seed=1)
    Z, _ = gcn.forward(model, normalize_adjacency(sp.csr_matrix((1, 1))), x)
    W0, W1, W2 = model.weights
    assert np.allclose(Z, gcn.softmax(np.maximum(np.maximum(x @ W0, 0) @ W1, 0) @ W2), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_dense_oracle(seed):
    S, X, _, model = instance(seed, n=30, f=14, h=8, p=0.15)
    Z, _ = gcn.forward(model, S, X)
    assert np.max(np.abs(Z - dense_forward(model.weights, S, X))) < 1e-10


def test_shape_errors():
    S, X, _, model = instance(0)
    with pytest.raises(ValueError, match="columns"):
        gcn.forward(model, S, X[:, :3])
    with pytest.raises(ValueError, match="rows"):
        gcn.forward(model, S, X[:5])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 40))
def test_row_stochastic_and_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    A = random_graph(rng, n, 0.2)
    X = rng.standard_normal((n, 14)) * 3
    model = gcn.init_model(14, TrainConfig(), seed=seed)
    S = normalize_adjacency(sp.csr_matrix(A))
    Z, _ = gcn.forward(model, S, X)
    assert np.all(np.abs(Z.sum(axis=1) - 1) < 1e-9) and np.all(Z >= 0)
    perm = rng.permutation(n)
    Sp = normalize_adjacency(sp.csr_matrix(A[np.ix_(perm, perm)]))
    Zp, _ = gcn.forward(model, Sp, X[perm])
    assert np.max(np.abs(Zp - Z[perm])) < 1e-9
    Zt, _ = gcn.forward(model, S, X, train_mode=True, seed=seed)
    assert np.all(np.abs(Zt.sum(axis=1) - 1) < 1e-9)


def test_dropout_expectation():
    """Inverted dropout keeps the first pre-activation unbiased (it is linear in the mask)."""
    S, X, _, model = instance(3, n=6, f=4, h=3)
    _, ref = gcn.forward(model, S, X)
    rng = np.random.default_rng(0)
    draws = np.array([gcn.forward(model, S, X, train_mode=True, rng=rng)[1].pre[0] for _ in range(10_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - ref.pre[0]) <= 3 * se + 1e-12)
    masks = gcn.forward(model, S, X, train_mode=True, rng=rng)[1].masks
    assert all(set(np.unique(m)) <= {0.0, 2.0} for m in masks)


def test_dropout_off_in_eval():
    S, X, _, model = instance(0)
    a, cache = gcn.forward(model, S, X)
    assert all(m is None for m in cache.masks)
    assert np.array_equal(a, gcn.forward(model, S, X, train_mode=False, seed=9)[0])


# -- loss ---------------------------------------------------------------------


def test_loss_perfect_and_uniform():
    y = np.array([0, 1, 1])
    assert gcn.loss(np.eye(2)[y], y, [0, 1, 2]) <= 1e-6
    assert gcn.loss(np.full((3, 2), 0.5), y, [0, 1, 2]) == pytest.approx(np.log(2), abs=1e-15)


def test_loss_naive_oracle(rng):
    Z = gcn.softmax(rng.standard_normal((50, 2)) * 4)
    y = rng.integers(0, 2, 50)
    mask = rng.random(50) < 0.5
    assert gcn.loss(Z, y, mask) == pytest.approx(naive_loss(Z, y, np.flatnonzero(mask)), abs=1e-10)


def test_loss_empty_mask():
    with pytest.raises(ValueError):
        gcn.loss(np.full((2, 2), 0.5), [0, 1], np.zeros(2, dtype=bool))


def test_l2_penalty():
    W = [np.ones((2, 2)), np.full((2, 1), 2.0)]
    assert gcn.loss(np.full((1, 2), 0.5), [0], [0], W, 0.1) == pytest.approx(np.log(2) + 0.1 * (4 + 8))


# -- gradients ----------------------------------------------------------------


def numeric_grads(model, S, X, y, idx, wd, cache, eps=1e-5):
    """Central differences with the dropout masks of ``cache`` held fixed."""
    def f():
        H = X
        for k, W in enumerate(model.weights):
            if cache.masks[k] is not None:
                H = H * cache.masks[k]
            P = S @ H @ W
            H = np.maximum(P, 0) if k < 2 else P
        return gcn.loss(gcn.softmax(H), y, idx, model.weights, wd)

    out = []
    for W in model.weights:
        G = np.zeros_like(W)
        for i in np.ndindex(W.shape):
            old = W[i]
            W[i] = old + eps
            up = f()
            W[i] = old - eps
            down = f()
            W[i] = old
            G[i] = (up - down) / (2 * eps)
        out.append(G)
    return out


def rel_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("train_mode", [False, True])
def test_gradient_check(seed, train_mode):
    S, X, y, model = instance(seed)
    idx = np.arange(0, 8, 2)
    wd = 5e-4
    _, cache = gcn.forward(model, S, X, train_mode=train_mode, seed=seed)
    analytic = gcn.backward(model, S, cache, y, idx, wd)
    numeric = numeric_grads(model, S, X, y, idx, wd, cache)
    for a, b in zip(analytic, numeric):
        assert a.shape == b.shape
        assert rel_error(a, b) < 1e-4


def test_l2_gradient_alone():
    S, X, y, model = instance(0)
    _, cache = gcn.forward(model, S, X)
    g0 = gcn.backward(model, S, cache, y, [0], 0.0)
    g1 = gcn.backward(model, S, cache, y, [0], 0.3)
    for a, b, W in zip(g0, g1, model.weights):
        assert np.allclose(b - a, 0.6 * W, atol=1e-15)


def test_stationary_point():
    S, X, _, model = instance(0)
    model.weights = [np.zeros_like(W) for W in model.weights]
    y = np.array([0, 1] * 4)
    _, cache = gcn.forward(model, S, X)
    grads = gcn.backward(model, S, cache, y, np.arange(8), 0.0)
    assert sum(np.linalg.norm(g) for g in grads) < 1e-8


# -- training -----------------------------------------------------------------


def planted(seed, size=40):
    rng = np.random.default_rng(seed)
    A = two_cliques(size, bridge=True)
    y = np.repeat([0, 1], size)
    X = rng.standard_normal((2 * size, 14)) + 1.5 * y[:, None]
    return normalize_adjacency(sp.csr_matrix(A)), X, y


def test_planted_reaches_full_accuracy():
    S, X, y = planted(0)
    rng = np.random.default_rng(1)
    val = np.sort(rng.choice(80, 16, replace=False))
    train = np.setdiff1d(np.arange(80), val)
    model, log = gcn.train(S, X, y, train, val, TrainConfig(max_epochs=200), seed=0)
    pred, Z = gcn.predict(model, S, X)
    assert np.mean(pred[train] == y[train]) == 1.0
    assert len(log.epoch) <= 200
    assert min(log.val_loss) < log.initial_val_loss
    assert np.allclose(Z.sum(axis=1), 1)


def test_train_deterministic():
    S, X, y = planted(2)
    cfg = TrainConfig(max_epochs=30)
    a, _ = gcn.train(S, X, y, np.arange(0, 80, 2), np.arange(1, 80, 4), cfg, seed=5)
    b, _ = gcn.train(S, X, y, np.arange(0, 80, 2), np.arange(1, 80, 4), cfg, seed=5)
    assert all(np.array_equal(u, v) for u, v in zip(a.weights, b.weights))


def test_zero_learning_rate():
    S, X, y = planted(3)
    cfg = TrainConfig(max_epochs=20, learning_rate=0.0, patience=1000)
    model, log = gcn.train(S, X, y, np.arange(60), None, cfg, seed=4)
    init = gcn.init_model(14, cfg, seed=4, rng=np.random.default_rng(4))
    assert all(np.array_equal(u, v) for u, v in zip(model.weights, init.weights))
    assert len(log.epoch) == 20


def test_masks_must_be_disjoint():
    S, X, y = planted(0)
    with pytest.raises(ValueError, match="overlap"):
        gcn.train(S, X, y, np.arange(10), np.arange(5, 15), TrainConfig(max_epochs=1))


def test_numeric_abort():
    S, X, y = planted(0)
    X[3, 2] = np.inf
    with np.errstate(all="ignore"), pytest.raises(gcn.NumericAbort) as exc:
        gcn.train(S, X, y, np.arange(40), None, TrainConfig(max_epochs=5), seed=0)
    assert exc.value.epoch >= 1


def test_predict_tie_is_class_zero():
    S, X, _, model = instance(0)
    model.weights = [np.zeros_like(W) for W in model.weights]
    pred, _ = gcn.predict(model, S, X)
    assert np.all(pred == 0)


def test_predict_matches_oracle(rng):
    S, X, _, model = instance(7, n=20, f=6, h=5)
    pred, _ = gcn.predict(model, S, X)
    assert np.array_equal(pred, np.argmax(dense_forward(model.weights, S, X), axis=1))


def test_hidden_representation_shape():
    S, X, _, model = instance(0)
    H = gcn.hidden_representation(model, S, X)
    assert H.shape == (8, 4) and np.all(H >= 0)


def test_checkpoint_roundtrip(tmp_path):
    S, X, _, model = instance(0)
    model.seed = 17
    path = tmp_path / "m.pzgcn"
    gcn.save_checkpoint(model, path)
    raw = path.read_bytes()
    assert raw.startswith(gcn.CHECKPOINT_MAGIC)
    back = gcn.load_checkpoint(path)
    assert back.seed == 17 and back.config == model.config
    assert all(np.array_equal(u, v) for u, v in zip(back.weights, model.weights))
    # weights are stored little-endian float64 at the end of the file
    tail = np.frombuffer(raw[-8 * model.weights[2].size:], dtype="<f8")
    assert np.array_equal(tail, model.weights[2].ravel())
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        gcn.load_checkpoint(path)


def test_training_log_csv(tmp_path):
    S, X, y = planted(0)
    _, log = gcn.train(S, X, y, np.arange(0, 80, 2), np.arange(1, 80, 2), TrainConfig(max_epochs=3))
    log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_f1" and len(lines) == 4


def test_adam_first_step():
    p = [np.array([1.0, -1.0])]
    opt = gcn.Adam(0.1)
    opt.step(p, [np.array([0.5, -2.0])])
    # bias-corrected first step moves each coordinate by lr * sign(g)
    assert np.allclose(p[0], [0.9, -0.9], atol=1e-8)


def test_model_shapes():
    m = gcn.init_model(14, TrainConfig(), seed=0)
    assert m.shapes == [(14, 32), (32, 32), (32, 2)]
    limit = np.sqrt(6 / (14 + 32))
    assert np.all(np.abs(m.weights[0]) <= limit)
    assert isinstance(m, GcnModel)
