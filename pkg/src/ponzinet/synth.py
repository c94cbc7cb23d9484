"""Synthetic Ponzi-like / normal-like transaction histories.

Each center contract gets investors who deposit ether and recipients who are
paid out. Class-conditional parameters interpolate linearly between the
normal profile (signal 0) and the Ponzi profile (signal 1); at
``signal_strength=0`` both classes come from the same generator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .ingest import (
    Address,
    LabelSet,
    TransactionRecord,
    TransactionStore,
    serialize_transactions,
    write_labels,
)

DAY = 86_400
T_MIN = 1_451_606_400  # 2016-01-01
T_MAX = 1_585_699_199  # 2020-03-31


@dataclass(frozen=True)
class ClassProfile:
    investors: float  # mean investors per center (Poisson + 1)
    deposits_per_investor: float  # mean extra deposits per investor (Poisson)
    deposit_log_mean: float  # ln ether
    payout_fraction: float  # share of investors who also get paid
    extra_recipients: float  # mean recipients outside the investor set
    payout_log_mean: float
    lifetime_days: float
    deposit_skew: float  # >1 concentrates deposits early in the lifetime


NORMAL_PROFILE = ClassProfile(
    investors=8.0, deposits_per_investor=0.5, deposit_log_mean=np.log(0.5),
    payout_fraction=0.3, extra_recipients=2.0, payout_log_mean=np.log(0.5),
    lifetime_days=400.0, deposit_skew=1.0,
)
PONZI_PROFILE = ClassProfile(
    investors=18.0, deposits_per_investor=1.5, deposit_log_mean=np.log(2.0),
    payout_fraction=0.6, extra_recipients=1.0, payout_log_mean=np.log(4.0),
    lifetime_days=90.0, deposit_skew=3.0,
)


@dataclass(frozen=True)
class SynthConfig:
    n_ponzi: int = 50
    n_normal: int = 50
    signal_strength: float = 1.0
    amount_log_sd: float = 0.6
    shared_investor_fraction: float = 0.25  # investors drawn from a pool shared by all centers
    noise_edge_rate: float = 0.5  # background transfers per non-center node
    seed: int = 0

    def __post_init__(self):
        if self.n_ponzi <= 0 or self.n_normal <= 0:
            raise ValueError("n_ponzi and n_normal must be positive")
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")


def interpolate(signal: float) -> ClassProfile:
    """Ponzi-class profile at a given signal strength."""
    a, b = asdict(NORMAL_PROFILE), asdict(PONZI_PROFILE)
    return ClassProfile(**{k: (1.0 - signal) * a[k] + signal * b[k] for k in a})


class _Gen:
    def __init__(self, rng):
        self.rng = rng
        self.used = set()
        self.records = []

    def address(self):
        while True:
            a = Address("0x" + self.rng.bytes(20).hex())
            if a not in self.used:
                self.used.add(a)
                return a

    def tx(self, sender, receiver, ether, ts):
        wei = int(round(ether * 1e9)) * 10**9
        tx_id = "0x" + self.rng.bytes(32).hex()
        self.records.append(TransactionRecord(tx_id, sender, receiver, wei, int(ts)))


def _center_history(g: _Gen, center, prof: ClassProfile, cfg: SynthConfig, pool):
    rng = g.rng
    life = max(1.0, prof.lifetime_days * np.exp(rng.normal(0.0, 0.3))) * DAY
    t0 = rng.uniform(T_MIN, T_MAX - 800 * DAY)
    n_inv = 1 + rng.poisson(prof.investors)
    investors = []
    for _ in range(n_inv):
        if pool and rng.random() < cfg.shared_investor_fraction:
            investors.append(pool[rng.integers(len(pool))])
        else:
            investors.append(g.address())
    for inv in investors:
        for _ in range(1 + rng.poisson(prof.deposits_per_investor)):
            ts = t0 + life * rng.random() ** prof.deposit_skew
            g.tx(inv, center, np.exp(rng.normal(prof.deposit_log_mean, cfg.amount_log_sd)), ts)
    recipients = [inv for inv in investors if rng.random() < prof.payout_fraction]
    recipients += [g.address() for _ in range(rng.poisson(prof.extra_recipients))]
    for r in recipients:
        ts = t0 + life * rng.random()
        g.tx(center, r, np.exp(rng.normal(prof.payout_log_mean, cfg.amount_log_sd)), ts)
    return investors + recipients


def generate(cfg: SynthConfig = SynthConfig()):
    """Returns ``(TransactionStore, LabelSet)``; deterministic in ``cfg``."""
    rng = np.random.default_rng([cfg.seed, 0x5717])
    g = _Gen(rng)
    ponzi_prof = interpolate(cfg.signal_strength)
    n_centers = cfg.n_ponzi + cfg.n_normal
    pool = [g.address() for _ in range(max(1, int(n_centers * NORMAL_PROFILE.investors * 0.1)))]
    # classes interleaved in a seeded order so neither class systematically goes first
    classes = np.array([1] * cfg.n_ponzi + [0] * cfg.n_normal)
    rng.shuffle(classes)
    ponzi, normal = set(), set()
    neighbors = []
    for cls in classes:
        center = g.address()
        (ponzi if cls == 1 else normal).add(center)
        neighbors += _center_history(g, center, ponzi_prof if cls == 1 else NORMAL_PROFILE, cfg, pool)
    others = sorted(set(neighbors))
    n_noise = rng.poisson(cfg.noise_edge_rate * len(others))
    for _ in range(n_noise):
        a, b = rng.choice(len(others), size=2, replace=False)
        ts = rng.uniform(T_MIN, T_MAX)
        g.tx(others[a], others[b], np.exp(rng.normal(np.log(0.3), 1.0)), ts)
    records = sorted(g.records, key=lambda r: (r.timestamp, r.tx_id))
    return TransactionStore(records), LabelSet(frozenset(ponzi), frozenset(normal))


def write_fixture(store: TransactionStore, labels: LabelSet, directory) -> dict:
    """Write ``transactions.csv`` and ``labels.csv`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tx_path = directory / "transactions.csv"
    label_path = directory / "labels.csv"
    serialize_transactions(store, tx_path, "csv")
    write_labels(labels, label_path)
    return {"transactions": tx_path, "labels": label_path}
