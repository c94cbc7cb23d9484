"""Exit criteria. Each test records one PASS/FAIL line (shown in the terminal summary).

Criterion 10 runs the real CLI on a synthetic dump of the full reference size and,
when ``PONZINET_DS1`` points at a directory holding the original DS1 dump
(transactions.csv + labels.csv), also checks the reference statistics and scores.
"""

import json
import os
import subprocess
import sys
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import addr, random_graph, random_store, record_criterion, two_cliques
from ponzinet import cli, embed, evaluation, gcn, graph, synth
from ponzinet.classify import mdi_importance, train_forest
from ponzinet.embed import WalkConfig
from ponzinet.evaluation import EvalConfig, aggregate, metrics
from ponzinet.features import extract_features
from ponzinet.gcn import TrainConfig
from test_classify import planted_importance_hits
from test_embed import connected_graphs, linear_probe_accuracy, net_of
from test_gcn import numeric_grads, rel_error

# walk budget for the end-to-end benchmarks; every other parameter stays at its default
BENCH_WALK = WalkConfig(walk_length=40, walks_per_node=5, window=5, epochs=1)

# reference sizes: ~3.5e4 nodes, ~1e5 edges
SCALE_SYNTH = synth.SynthConfig(n_ponzi=1270, n_normal=1270, noise_edge_rate=2.0, seed=0)
SCALE_BUDGET_S = 30 * 60
DS1_STATS = (34699, 99745, 7.562, 0.386)
DS1_SCORES = {("feature_rf", "precision"): 0.8042, ("gcn_feature", "recall"): 0.9159}


def test_criterion_1_normalization_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 201))
        A = random_graph(rng, n, rng.uniform(0.0, 0.3))
        S = graph.normalize_adjacency(sp.csr_matrix(A)).toarray()
        At = A + np.eye(n)
        d = At.sum(axis=1)
        oracle = np.array([[At[i, j] / np.sqrt(d[i] * d[j]) for j in range(n)] for i in range(n)])
        worst = max(worst, float(np.max(np.abs(S - oracle))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-12 and dt < 5
    record_criterion(1, ok, f"max |S - dense| = {worst:.2e} (tol 1e-12) over 50 graphs in {dt:.2f}s (< 5s)")
    assert ok


def test_criterion_2_gcn_gradient_check():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        A = random_graph(rng, 8, 0.4)
        S = graph.normalize_adjacency(sp.csr_matrix(A))
        X = rng.standard_normal((8, 5))
        y = rng.integers(0, 2, 8)
        model = gcn.init_model(5, TrainConfig(hidden=4), seed=seed)
        idx = np.arange(8)
        _, cache = gcn.forward(model, S, X)
        analytic = gcn.backward(model, S, cache, y, idx, 5e-4)
        numeric = numeric_grads(model, S, X, y, idx, 5e-4, cache)
        worst = max(worst, *(rel_error(a, b) for a, b in zip(analytic, numeric)))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 10
    record_criterion(2, ok, f"max relative gradient error {worst:.2e} (< 1e-4), 5 seeds, n=8 h=4, {dt:.2f}s (< 10s)")
    assert ok


def test_criterion_3_output_stochasticity():
    rng = np.random.default_rng(303)
    row_err = perm_err = 0.0
    for seed in range(50):
        n = int(rng.integers(1, 60))
        A = random_graph(rng, n, rng.uniform(0.05, 0.5))
        X = rng.standard_normal((n, 14)) * rng.uniform(0.1, 10)
        model = gcn.init_model(14, TrainConfig(), seed=seed)
        S = graph.normalize_adjacency(sp.csr_matrix(A))
        Z, _ = gcn.forward(model, S, X)
        Zt, _ = gcn.forward(model, S, X, train_mode=True, seed=seed)
        row_err = max(row_err, float(np.max(np.abs(Z.sum(axis=1) - 1))), float(np.max(np.abs(Zt.sum(axis=1) - 1))))
        perm = rng.permutation(n)
        Zp, _ = gcn.forward(model, graph.normalize_adjacency(sp.csr_matrix(A[np.ix_(perm, perm)])), X[perm])
        perm_err = max(perm_err, float(np.max(np.abs(Zp - Z[perm]))))
    ok = row_err <= 1e-9 and perm_err <= 1e-9
    record_criterion(3, ok, f"row-sum error {row_err:.1e}, permutation error {perm_err:.1e} (tol 1e-9), 50 graphs")
    assert ok


def grouped_oracle(net, store):
    """One pass over records grouping by endpoint, then plain-Python statistics."""
    idx = net.index()
    groups = defaultdict(lambda: ([], [], [], []))  # in values, in times, out values, out times
    for r in store:
        if r.sender in idx and r.receiver in idx:
            g_in, g_out = groups[r.receiver], groups[r.sender]
            g_in[0].append(r.value / 1e18)
            g_in[1].append(r.timestamp)
            g_out[2].append(r.value / 1e18)
            g_out[3].append(r.timestamp)

    def side(vals, times):
        if not vals:
            return [0.0] * 7
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        return [len(vals), sum(vals), max(vals), min(vals), mean, var, max(times) - min(times)]

    rows = []
    for node in net.nodes:
        vi, ti, vo, to = groups[node]
        a, b = side(vi, ti), side(vo, to)
        rows.append([a[0], b[0], *a[1:6], *b[1:6], a[6], b[6]])
    return np.array(rows, dtype=np.float64)


def test_criterion_4_feature_oracle():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 201))
        store = random_store(rng, n, int(rng.integers(1, 2001)))
        net = graph.build_subnetwork(store, [addr(i) for i in range(int(rng.integers(1, min(n, 20) + 1)))])
        X = extract_features(net, store)
        O = grouped_oracle(net, store)
        worst = max(worst, float(np.max(np.abs(X - O) / np.maximum(1.0, np.abs(O)))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 10
    record_criterion(4, ok, f"max scaled deviation {worst:.1e} (tol 1e-9) over 100 stores in {dt:.2f}s (< 10s)")
    assert ok


def test_criterion_5_node2vec_reduction():
    mismatches = checked = 0
    for A in connected_graphs(50, 8, 505):
        net = net_of(A)
        first = embed.first_order_law(net)
        for (t, v, x), pr in embed.second_order_law(net, 1.0, 1.0).items():
            checked += 1
            mismatches += pr != first[(v, x)]
    ok = mismatches == 0 and checked > 0
    record_criterion(5, ok, f"{checked} second-order transitions at p=q=1, {mismatches} differ from the uniform law")
    assert ok


def test_criterion_6_embedding_separability():
    y = np.repeat([0, 1], 50)
    net = net_of(two_cliques(50))
    t0 = time.perf_counter()
    accs = {}
    for method in ("deepwalk", "node2vec", "line2"):
        for seed in range(3):
            E = embed.embed(net, method, WalkConfig(), seed)
            accs[(method, seed)] = linear_probe_accuracy(E.vectors, y, seed)
    dt = time.perf_counter() - t0
    worst = min(accs.values())
    ok = worst >= 0.95 and dt < 60
    record_criterion(6, ok, f"min linear-probe accuracy {worst:.3f} (>= 0.95), 3 methods x 3 seeds in {dt:.1f}s (< 60s)")
    assert ok


def test_criterion_7_forest_correctness():
    rng = np.random.default_rng(707)
    X = rng.standard_normal((200, 6))
    y = (X[:, 0] - 0.5 * X[:, 4] > 0).astype(int)
    forest = train_forest(X, y, n_trees=100, seed=0)
    train_acc = float(np.mean(forest.predict(X) == y))
    sums = []
    for seed in range(20):
        Xr = rng.standard_normal((80, 6))
        yr = rng.integers(0, 2, 80)
        sums.append(abs(mdi_importance(train_forest(Xr, yr, n_trees=10, seed=seed)).sum() - 1))
    hits = planted_importance_hits(40)
    ok = train_acc == 1.0 and max(sums) <= 1e-9 and hits >= 38
    record_criterion(7, ok, f"train accuracy {train_acc:.3f}, max |sum MDI - 1| {max(sums):.1e}, "
                            f"planted features recovered {hits}/40 (>= 38)")
    assert ok


def bench(signal, workers):
    store, labels = synth.generate(synth.SynthConfig(signal_strength=signal))
    ds = evaluation.prepare_dataset(f"synth_s{signal:g}", store, labels)
    cfg = EvalConfig(seeds=(0, 1, 2), walk=BENCH_WALK)
    return aggregate(evaluation.evaluate([ds], cfg, workers=workers).rows), ds.name


@pytest.mark.slow
def test_criterion_8_synthetic_benchmark():
    workers = cli.default_workers()
    t0 = time.perf_counter()
    strong, name = bench(1.0, workers)
    null, null_name = bench(0.0, workers)
    dt = time.perf_counter() - t0
    rf_f1 = strong[(name, "feature_rf")]["f1"][0]
    gcn_rec, rf_rec = strong[(name, "gcn_feature")]["recall"][0], strong[(name, "feature_rf")]["recall"][0]
    null_f1 = {m: null[(null_name, m)]["f1"][0] for m in evaluation.METHODS}
    outside = {m: round(v, 3) for m, v in null_f1.items() if not 0.35 <= v <= 0.65}
    ok = rf_f1 >= 0.95 and gcn_rec >= rf_rec and not outside and dt < 300
    record_criterion(8, ok, f"feature_rf F1 {rf_f1:.3f} (>= 0.95); gcn recall {gcn_rec:.3f} vs rf {rf_rec:.3f}; "
                            f"null F1 range [{min(null_f1.values()):.3f}, {max(null_f1.values()):.3f}] "
                            f"(within [0.35, 0.65]{'' if not outside else f'; outside: {outside}'}); "
                            f"{dt:.0f}s on {workers} core(s) (< 300s)")
    assert ok


def test_criterion_9_metric_arithmetic():
    cases = [
        (([1, 1, 1, 1, 1, 0, 0], [1, 1, 1, 0, 0, 1, 0]), (0.75, 0.6, 2 / 3)),
        (([1, 0, 1], [1, 0, 1]), (1.0, 1.0, 1.0)),
        (([1, 0, 1], [0, 0, 0]), (0.0, 0.0, 0.0)),
        (([0, 0], [1, 1]), (0.0, 0.0, 0.0)),
        (([0, 0], [0, 0]), (0.0, 0.0, 0.0)),
    ]
    bad = [(args, metrics(*args)) for args, want in cases
           if any(abs(a - b) > 1e-15 for a, b in zip(metrics(*args), want))]
    ok = not bad
    record_criterion(9, ok, f"{len(cases) - len(bad)}/{len(cases)} hand-computed metric triples reproduced")
    assert ok


def _run_cli(args, timeout):
    return subprocess.run([sys.executable, "-m", "ponzinet", *args], capture_output=True, text=True, timeout=timeout)


def _ds1_check(root, tmp):
    """Reference statistics and scores on the original DS1 dump; returns (ok, detail)."""
    build = _run_cli(["build", "--data", str(root), "--out", str(tmp / "ds1_net")], SCALE_BUDGET_S)
    if build.returncode != 0:
        return False, f"DS1 build failed ({build.returncode})"
    s = json.loads((tmp / "ds1_net" / "stats.json").read_text())
    got = (s["n_nodes"], s["n_edges"], round(s["avg_degree"], 3), round(s["clustering"], 3))
    ok = got == DS1_STATS
    detail = f"DS1 stats {got} vs {DS1_STATS}"
    out = tmp / "ds1_eval"
    run = _run_cli(["evaluate", "--data", f"DS1={root}", "--seed", "0,1,2,3,4", "--out", str(out)], None)
    if run.returncode != 0:
        return False, detail + f"; DS1 evaluate failed ({run.returncode})"
    rows = [evaluation.EvalRow(**r) for r in json.loads((out / "report.json").read_text())["rows"]]
    summary = aggregate(rows)
    for (method, metric), ref in DS1_SCORES.items():
        mean, std, _ = summary[("DS1", method)][metric]
        within = abs(mean - ref) <= 2 * std
        ok &= within
        detail += f"; {method} {metric} {mean:.4f} ± {std:.4f} vs {ref}"
    return ok, detail


@pytest.mark.slow
def test_criterion_10_reference_scale(tmp_path):
    data = tmp_path / "scale"
    store, labels = synth.generate(SCALE_SYNTH)
    synth.write_fixture(store, labels, data)
    s = graph.stats(graph.build_subnetwork(store, labels.addresses, labels))
    size = f"|V|={s.n_nodes}, |E|={s.n_edges}"
    out = tmp_path / "report"
    t0 = time.perf_counter()
    try:
        proc = _run_cli(["evaluate", "--data", f"scale={data}", "--seed", "0", "--out", str(out)], SCALE_BUDGET_S)
        finished, code = True, proc.returncode
    except subprocess.TimeoutExpired:
        finished, code = False, None
    dt = time.perf_counter() - t0
    files = ["table1.csv", "table2.csv", "table3.csv", "importance.csv", "figures/importance.png"]
    ok = finished and code == 0 and dt < SCALE_BUDGET_S and all((out / f).exists() for f in files)
    detail = (f"evaluate, all 8 methods on {size}: "
              + (f"exit {code} in {dt / 60:.1f} min" if finished else f"not finished after {dt / 60:.0f} min")
              + f" on {cli.default_workers()} core(s) (< 30 min)")
    ds1 = os.environ.get("PONZINET_DS1")
    if ds1:
        ds1_ok, ds1_detail = _ds1_check(Path(ds1), tmp_path)
        ok &= ds1_ok
        detail += "; " + ds1_detail
    else:
        detail += "; DS1 reference check not run (set PONZINET_DS1 to the original dump)"
    record_criterion(10, ok, detail)
    assert ok


def test_criterion_11_manifest_determinism(tmp_path):
    data = tmp_path / "data"
    store, labels = synth.generate(synth.SynthConfig(n_ponzi=20, n_normal=20, seed=11))
    synth.write_fixture(store, labels, data)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"walk": {"walk_length": 20, "walks_per_node": 3, "window": 5, "dim": 32, "epochs": 1},
                               "forest": {"n_trees": 30}}))
    first = tmp_path / "first"
    assert cli.main(["evaluate", "--data", str(data), "--seed", "0", "--config", str(cfg), "--out", str(first)]) == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"rerun{k}"
        assert cli.main(["evaluate", "--manifest", str(first / "manifest.json"), "--out", str(out)]) == 0
        outs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same = outs[0] == outs[1]
    matches_first = all((first / name).read_bytes() == blob for name, blob in outs[0].items())
    ok = same and matches_first and len(outs[0]) >= 10
    record_criterion(11, ok, f"{len(outs[0])} report files byte-identical across two manifest reruns: {same}; "
                             f"identical to the original run: {matches_first}")
    assert ok
