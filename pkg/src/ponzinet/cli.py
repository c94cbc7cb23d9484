"""``ponzinet`` command line: fetch, build, features, embed, train-gcn, evaluate, report, synth.

Stages talk through files. Exit codes: 0 ok, 1 usage error, 2 data error,
3 numeric abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config, embed, gcn, graph, ingest, report, synth
from .evaluation import evaluate, inner_split, prepare_dataset
from .features import extract_features, fit_standardizer, write_features

log = logging.getLogger("ponzinet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- argument parsing -----------------------------------------------------------------


def _common(p):
    p.add_argument("--config", type=Path, help="JSON run configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable; VALUE parsed as JSON)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _data_arg(p, many=False):
    if many:
        p.add_argument("--data", action="append", required=False, default=[], metavar="[NAME=]DIR",
                       help="directory with transactions.csv and labels.csv (repeatable)")
    else:
        p.add_argument("--data", required=True, type=Path, metavar="DIR",
                       help="directory with transactions.csv (or .jsonl) and labels.csv")
    p.add_argument("--lenient", action="store_true", help="skip malformed transaction rows instead of failing")


def _walk_flags(p):
    g = p.add_argument_group("walk/embedding parameters (override config)")
    g.add_argument("--walk-length", type=int)
    g.add_argument("--walks-per-node", type=int)
    g.add_argument("--window", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--p", type=float)
    g.add_argument("--q", type=float)
    g.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ponzinet", description="Ponzi contract detection on sub-transaction networks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("fetch", help="download account histories from an Etherscan-style API")
    _common(p)
    p.add_argument("--addresses", required=True, type=Path,
                   help="file with one address per line, or a labels CSV")
    p.add_argument("--out", required=True, type=Path, help="output transactions file")
    p.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    p.add_argument("--endpoint", help="API endpoint URL")
    p.add_argument("--api-key", help=f"API key (default: ${ingest.API_KEY_ENV})")
    p.add_argument("--cache-dir", type=Path, help="on-disk response cache")
    p.add_argument("--rate-limit", type=float, help="requests per second")
    p.add_argument("--neighbors", action="store_true",
                   help="also fetch histories of every counterparty of the listed addresses")
    p.add_argument("--workers", type=int, help="concurrent requests")

    p = sub.add_parser("build", help="build the sub-transaction network and its statistics")
    _common(p)
    _data_arg(p)
    p.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("features", help="extract the 14 account features")
    _common(p)
    _data_arg(p)
    p.add_argument("--out", required=True, type=Path, help="output features CSV")

    p = sub.add_parser("embed", help="train a node embedding")
    _common(p)
    _data_arg(p)
    p.add_argument("--method", required=True, choices=["deepwalk", "node2vec", "line2"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, type=Path, help="output embedding CSV")
    _walk_flags(p)

    p = sub.add_parser("train-gcn", help="train the GCN on all labeled centers")
    _common(p)
    _data_arg(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--hidden", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("evaluate", help="cross-validated comparison of all methods")
    _common(p)
    _data_arg(p, many=True)
    p.add_argument("--seed", dest="seeds", action="append", default=[], metavar="SEED",
                   help="repetition seed (repeatable, or comma separated); required unless --manifest")
    p.add_argument("--manifest", type=Path, help="rerun exactly from a previous manifest.json")
    p.add_argument("--out", required=True, type=Path, help="report directory")
    p.add_argument("--methods", help="comma separated subset of methods")
    p.add_argument("--folds", type=int)
    p.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    p.add_argument("--no-figures", action="store_true")
    _walk_flags(p)

    p = sub.add_parser("report", help="re-render tables and figures from a report.json")
    _common(p)
    p.add_argument("--in", dest="src", required=True, type=Path, help="directory holding report.json")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--format", choices=["csv", "markdown"], default="csv")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic labeled fixture")
    _common(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--n-ponzi", type=int)
    p.add_argument("--n-normal", type=int)
    p.add_argument("--signal", type=float, help="signal strength in [0, 1]")
    p.add_argument("--seed", type=int)
    return parser


# -- config assembly ----------------------------------------------------------------


def _flag_overrides(args) -> dict:
    """Explicit CLI flags, as a partial config document."""
    doc = {}

    def put(section, key, value):
        if value is not None:
            doc.setdefault(section, {})[key] = value

    for key in ("walk_length", "walks_per_node", "window", "dim", "p", "q", "epochs"):
        put("walk", key, getattr(args, key, None))
    for key in ("hidden", "max_epochs", "learning_rate", "dropout"):
        put("gcn", key, getattr(args, key, None))
    if args.command == "synth":
        put("synth", "n_ponzi", args.n_ponzi)
        put("synth", "n_normal", args.n_normal)
        put("synth", "signal_strength", args.signal)
        put("synth", "seed", args.seed)
    if args.command == "fetch":
        put("fetch", "endpoint", args.endpoint)
        put("fetch", "rate_limit", args.rate_limit)
        put("fetch", "cache_dir", str(args.cache_dir) if args.cache_dir else None)
    if args.command == "evaluate":
        if args.methods:
            put("evaluate", "methods", [m.strip() for m in args.methods.split(",") if m.strip()])
        put("evaluate", "k", args.folds)
        seeds = []
        for s in args.seeds:
            for part in s.split(","):
                try:
                    seeds.append(int(part))
                except ValueError:
                    raise UsageError(f"--seed expects integers, got {part!r}") from None
        if seeds:
            put("evaluate", "seeds", seeds)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise UsageError("--workers must be positive")
        doc["workers"] = args.workers
    return doc


def effective_config(args, base: dict | None = None) -> config.RunConfig:
    """defaults <- manifest <- config file <- --set <- explicit flags."""
    cfg = config.RunConfig()
    if base is not None:
        cfg = config.merge(cfg, base)
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        cfg = config.merge(cfg, json.loads(args.config.read_text(encoding="utf-8")))
    for text in args.overrides:
        cfg = config.merge(cfg, config.parse_override(text))
    return config.merge(cfg, _flag_overrides(args))


# -- data loading -----------------------------------------------------------------


def _transactions_path(directory: Path):
    for name, fmt in (("transactions.csv", "csv"), ("transactions.jsonl", "jsonl")):
        if (directory / name).exists():
            return directory / name, fmt
    raise ingest.IngestError(f"{directory}: no transactions.csv or transactions.jsonl")


def load_data(directory: Path, lenient=False):
    directory = Path(directory)
    if not directory.is_dir():
        raise ingest.IngestError(f"data directory not found: {directory}")
    path, fmt = _transactions_path(directory)
    stats = {}
    store = ingest.TransactionStore(ingest.parse_transactions(path, fmt, strict=not lenient, stats=stats))
    if stats.get("skipped"):
        log.warning("skipped %d malformed rows in %s", stats["skipped"], path)
    labels_path = directory / "labels.csv"
    if not labels_path.exists():
        raise ingest.IngestError(f"{directory}: labels.csv missing")
    labels = ingest.parse_labels(labels_path)
    log.info("loaded %d transactions, %d ponzi / %d normal labels from %s",
             len(store), len(labels.ponzi), len(labels.normal), directory)
    return store, labels


def _read_addresses(path: Path) -> list:
    if not path.exists():
        raise ingest.IngestError(f"address file not found: {path}")
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        token = line.split(",")[0].strip()
        if not token or token.lower() == "address" or token.startswith("#"):
            continue
        out.append(ingest.Address(token))
    return out


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8", newline="\n")


# -- subcommands ----------------------------------------------------------------------


def cmd_fetch(args, cfg: config.RunConfig):
    f = cfg.fetch
    client = ingest.EtherscanClient(f.endpoint, api_key=args.api_key, rate_limit=f.rate_limit,
                                    cache_dir=f.cache_dir, page_size=f.page_size, attempts=f.attempts,
                                    backoff=f.backoff, timeout=f.timeout)
    workers = cfg.workers or 4
    addresses = _read_addresses(args.addresses)
    store = ingest.fetch_many(client, addresses, workers)
    if args.neighbors:
        seen = set(addresses)
        extra = sorted({a for r in store for a in (r.sender, r.receiver)} - seen)
        log.info("fetching %d counterparties", len(extra))
        store = ingest.store_merge([list(store), list(ingest.fetch_many(client, extra, workers))])
    args.out.parent.mkdir(parents=True, exist_ok=True)
    ingest.serialize_transactions(store, args.out, args.format)
    log.info("wrote %d transactions to %s (%d requests)", len(store), args.out, client.requests_made)


def cmd_build(args, cfg):
    store, labels = load_data(args.data, args.lenient)
    net = graph.build_subnetwork(store, labels.addresses, labels)
    graph.write_network(net, args.out)
    s = graph.stats(net)
    _write_json(args.out / "stats.json", {"n_nodes": s.n_nodes, "n_edges": s.n_edges,
                                          "avg_degree": s.avg_degree, "clustering": s.clustering})
    log.info("network: %d nodes, %d edges, K=%.3f, C=%.3f", s.n_nodes, s.n_edges, s.avg_degree, s.clustering)


def cmd_features(args, cfg):
    store, labels = load_data(args.data, args.lenient)
    net = graph.build_subnetwork(store, labels.addresses, labels)
    X = extract_features(net, store)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_features(X, net.nodes, args.out)
    log.info("wrote %d x %d features to %s", *X.shape, args.out)


def cmd_embed(args, cfg):
    store, labels = load_data(args.data, args.lenient)
    net = graph.build_subnetwork(store, labels.addresses, labels)
    E = embed.embed(net, args.method, cfg.walk, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    embed.write_embedding(E, net.nodes, args.out)
    log.info("wrote %s embedding %s to %s", args.method, E.vectors.shape, args.out)


def cmd_train_gcn(args, cfg):
    store, labels = load_data(args.data, args.lenient)
    ds = prepare_dataset(args.data.name, store, labels)
    ids = ds.net.labeled_ids()
    y = np.zeros(ds.net.n, dtype=np.int64)
    y[ids] = ds.net.label_array(ids)
    fit_ids, val_ids = inner_split(ids, y[ids], cfg.evaluate.val_fraction, args.seed)
    Xs = fit_standardizer(ds.X, np.arange(ds.net.n)).transform(ds.X)
    model, tlog = gcn.train(ds.S, Xs, y, fit_ids, val_ids, cfg.gcn, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    gcn.save_checkpoint(model, args.out / "model.pzgcn")
    tlog.write_csv(args.out / "training_log.csv")
    pred, Z = gcn.predict(model, ds.S, Xs)
    with open(args.out / "predictions.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("address,predicted,p_ponzi\n")
        for a, k, p in zip(ds.net.nodes, pred, Z[:, 1]):
            fh.write(f"{a},{int(k)},{p:.10g}\n")
    H = gcn.hidden_representation(model, ds.S, Xs)
    with open(args.out / "hidden.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("address," + ",".join(f"h{i}" for i in range(H.shape[1])) + "\n")
        for a, row in zip(ds.net.nodes, H):
            fh.write(a + "," + ",".join(f"{v:.10g}" for v in row) + "\n")
    if not args.no_figures:
        from . import plotting

        (args.out / "figures").mkdir(exist_ok=True)
        plotting.plot_training_curve(tlog, args.out / "figures" / "training_curve.png")
    log.info("best epoch %d of %d; checkpoint in %s", tlog.best_epoch, len(tlog.epoch), args.out)


def _parse_data_specs(specs) -> list:
    out = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        out.append((name, Path(path)))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise UsageError("dataset names must be unique (use NAME=DIR)")
    return out


def _dataset_entry(name, directory: Path) -> dict:
    tx, fmt = _transactions_path(directory)
    return {"name": name, "path": str(directory.resolve()), "transactions": sha256_file(tx),
            "labels": sha256_file(directory / "labels.csv")}


def cmd_evaluate(args, cfg):
    if args.manifest is not None:
        manifest = json.loads(args.manifest.read_text(encoding="utf-8"))
        specs = [(d["name"], Path(d["path"])) for d in manifest["datasets"]]
        expected = {d["name"]: d for d in manifest["datasets"]}
        if args.data:
            specs = _parse_data_specs(args.data)
    else:
        specs = _parse_data_specs(args.data)
        expected = {}
    if not specs:
        raise UsageError("evaluate needs at least one --data DIR (or --manifest)")
    if not cfg.evaluate.seeds:
        raise UsageError("evaluate requires --seed")

    datasets, entries = [], []
    for name, directory in specs:
        store, labels = load_data(directory, getattr(args, "lenient", False))
        entry = _dataset_entry(name, directory)
        want = expected.get(name)
        if want is not None and (want["transactions"], want["labels"]) != (entry["transactions"], entry["labels"]):
            raise ingest.IngestError(f"dataset {name!r} no longer matches the manifest hashes")
        entries.append(entry)
        datasets.append(prepare_dataset(name, store, labels))

    workers = cfg.workers or default_workers()
    t0 = time.perf_counter()
    rep = evaluate(datasets, cfg.eval_config(), workers=workers)
    log.info("evaluation finished in %.1fs with %d workers", time.perf_counter() - t0, workers)
    out = args.out
    written = report.write_report(rep, out, figures=not args.no_figures)
    config.dump(cfg, out / "config.json")
    written.append(out / "config.json")
    artifacts = {p.relative_to(out).as_posix(): sha256_file(p) for p in sorted(written)}
    _write_json(out / MANIFEST, {
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": list(cfg.evaluate.seeds),
        "datasets": entries,
        "artifacts": artifacts,
    })
    log.info("report written to %s", out)


def cmd_report(args, cfg):
    rep = report.read_report(args.src)
    args.out.mkdir(parents=True, exist_ok=True)
    for name, text in report.render_report(rep, args.format).items():
        (args.out / name).write_text(text, encoding="utf-8", newline="\n")
    (args.out / "summary.md").write_text(report.summary_markdown(rep), encoding="utf-8", newline="\n")
    if not args.no_figures:
        report.write_figures(rep, args.out)
    log.info("rendered %s tables into %s", args.format, args.out)


def cmd_synth(args, cfg):
    store, labels = synth.generate(cfg.synth)
    synth.write_fixture(store, labels, args.out)
    log.info("synthetic fixture: %d transactions, %d ponzi / %d normal centers in %s",
             len(store), len(labels.ponzi), len(labels.normal), args.out)


COMMANDS = {
    "fetch": cmd_fetch,
    "build": cmd_build,
    "features": cmd_features,
    "embed": cmd_embed,
    "train-gcn": cmd_train_gcn,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "synth": cmd_synth,
}


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    _setup_logging(args.log_level)
    try:
        base = None
        if args.command == "evaluate" and args.manifest is not None:
            if not args.manifest.exists():
                raise UsageError(f"manifest not found: {args.manifest}")
            base = json.loads(args.manifest.read_text(encoding="utf-8"))["config"]
        cfg = effective_config(args, base)
        COMMANDS[args.command](args, cfg)
    except (UsageError, config.ConfigError) as e:
        parser.print_usage(sys.stderr)
        log.error("%s", e)
        return EXIT_USAGE
    except gcn.NumericAbort as e:
        log.error("numeric abort: %s", e)
        return EXIT_NUMERIC
    except (ingest.IngestError, ingest.FetchError, ValueError, OSError, KeyError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
