import numpy as np
import pytest
from scipy import stats as sps

from ponzinet import synth
from ponzinet.features import FEATURE_NAMES, extract_features
from ponzinet.graph import build_subnetwork, stats
from ponzinet.ingest import parse_labels, parse_transactions
from ponzinet.synth import SynthConfig


def center_features(cfg):
    store, labels = synth.generate(cfg)
    net = build_subnetwork(store, labels.addresses, labels)
    ids = net.labeled_ids()
    return extract_features(net, store)[ids], net.label_array(ids)


def pooled(signal, seeds=range(20), **kw):
    Xs, ys = zip(*(center_features(SynthConfig(signal_strength=signal, seed=s, **kw)) for s in seeds))
    return np.vstack(Xs), np.concatenate(ys)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_ponzi=0)
    with pytest.raises(ValueError):
        SynthConfig(signal_strength=1.5)


def test_interpolation_endpoints():
    assert synth.interpolate(0.0) == synth.NORMAL_PROFILE
    assert synth.interpolate(1.0) == synth.PONZI_PROFILE


def test_deterministic(tmp_path):
    a, la = synth.generate(SynthConfig(seed=4))
    b, lb = synth.generate(SynthConfig(seed=4))
    assert a == b and la == lb
    synth.write_fixture(a, la, tmp_path / "a")
    synth.write_fixture(b, lb, tmp_path / "b")
    for name in ("transactions.csv", "labels.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c, _ = synth.generate(SynthConfig(seed=5))
    assert a != c


def test_labels_and_counts():
    store, labels = synth.generate(SynthConfig(n_ponzi=7, n_normal=11, seed=1))
    assert (len(labels.ponzi), len(labels.normal)) == (7, 11)
    assert all(r.value >= 0 and synth.T_MIN <= r.timestamp <= synth.T_MAX for r in store)


def test_fixture_roundtrip(tmp_path):
    store, labels = synth.generate(SynthConfig(n_ponzi=10, n_normal=10, seed=2))
    paths = synth.write_fixture(store, labels, tmp_path)
    raw = paths["transactions"].read_bytes()
    assert raw.startswith(b"tx_id,from,to,value,timestamp\n") and b"\r" not in raw
    assert paths["labels"].read_bytes().startswith(b"address,label\n")
    back = parse_transactions(paths["transactions"])
    assert back == list(store.records) and len(back) == len(store)
    assert parse_labels(paths["labels"]) == labels


def test_unwritable_dir(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    store, labels = synth.generate(SynthConfig(n_ponzi=2, n_normal=2))
    with pytest.raises(OSError):
        synth.write_fixture(store, labels, blocker / "sub")


@pytest.mark.parametrize("seed", range(3))
def test_average_degree_range(seed):
    store, labels = synth.generate(SynthConfig(seed=seed))
    s = stats(build_subnetwork(store, labels.addresses, labels))
    assert 2 <= s.avg_degree <= 20


def test_null_signal_ks():
    X, y = pooled(0.0)
    for j, name in enumerate(FEATURE_NAMES):
        p = sps.ks_2samp(X[y == 1, j], X[y == 0, j]).pvalue
        assert p > 0.01, name


def test_separation_monotone():
    designed = ["count_in", "count_out", "value_total_in", "value_mean_in", "value_mean_out", "lifetime_in"]
    cols = [FEATURE_NAMES.index(n) for n in designed]
    gaps = []
    for s in (0.0, 0.5, 1.0):
        X, y = pooled(s)
        gaps.append(np.abs(X[y == 1][:, cols].mean(0) - X[y == 0][:, cols].mean(0)))
    assert np.all(gaps[1] >= gaps[0]) and np.all(gaps[2] >= gaps[1])
