"""Transaction and label ingestion.

Reads CSV/JSONL transaction dumps and label files, fetches account histories
from an Etherscan-compatible ``account/txlist`` endpoint, and merges batches
into an immutable, de-duplicated :class:`TransactionStore`.
"""

from __future__ import annotations

import bisect
import csv
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import requests

log = logging.getLogger(__name__)

TX_HEADER = ["tx_id", "from", "to", "value", "timestamp"]
LABEL_HEADER = ["address", "label"]
API_KEY_ENV = "PONZINET_API_KEY"
WEI_PER_ETHER = 10**18

_HEX40 = re.compile(r"^0x[0-9a-f]{40}$")


class IngestError(ValueError):
    """Malformed input data (bad row, bad label, bad API payload)."""


class FetchError(RuntimeError):
    """Network fetch failed after retries."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class Address(str):
    """Canonical lowercase ``0x``-prefixed 40-hex-digit account address."""

    __slots__ = ()

    def __new__(cls, value):
        if isinstance(value, Address):
            return value
        s = str(value).strip().lower()
        if not s.startswith("0x"):
            s = "0x" + s
        if not _HEX40.match(s):
            raise IngestError(f"invalid address {value!r}")
        return super().__new__(cls, s)


@dataclass(frozen=True)
class TransactionRecord:
    tx_id: str
    sender: Address
    receiver: Address
    value: int  # wei, arbitrary precision
    timestamp: int

    def __post_init__(self):
        if self.value < 0:
            raise IngestError(f"negative value in {self.tx_id}")
        if self.timestamp < 0:
            raise IngestError(f"negative timestamp in {self.tx_id}")

    @property
    def is_self(self) -> bool:
        return self.sender == self.receiver


@dataclass(frozen=True)
class LabelSet:
    ponzi: frozenset
    normal: frozenset

    def __post_init__(self):
        both = self.ponzi & self.normal
        if both:
            raise IngestError(f"address in both label sets: {sorted(both)[0]}")

    def label_of(self, address):
        if address in self.ponzi:
            return 1
        if address in self.normal:
            return 0
        return None

    @property
    def addresses(self) -> list:
        return sorted(self.ponzi | self.normal)

    def require_both(self):
        if not self.ponzi or not self.normal:
            raise IngestError("supervised runs need both ponzi and normal labels")


class TransactionStore:
    """Immutable, tx_id-unique sequence of transaction records."""

    __slots__ = ("_records", "_columns")

    def __init__(self, records: Iterable[TransactionRecord] = ()):
        seen = set()
        kept = []
        for r in records:
            if r.tx_id in seen:
                continue
            seen.add(r.tx_id)
            kept.append(r)
        object.__setattr__(self, "_records", tuple(kept))
        object.__setattr__(self, "_columns", None)

    def __setattr__(self, name, value):
        raise AttributeError("TransactionStore is immutable")

    def __reduce__(self):
        return (TransactionStore, (self._records,))

    @property
    def records(self) -> tuple:
        return self._records

    def __len__(self):
        return len(self._records)

    def columns(self) -> "StoreColumns":
        """Columnar view (address codes, ether amounts, timestamps); computed once."""
        if self._columns is None:
            object.__setattr__(self, "_columns", StoreColumns.from_records(self._records))
        return self._columns

    def __iter__(self) -> Iterator[TransactionRecord]:
        return iter(self._records)

    def __getitem__(self, i):
        return self._records[i]

    def __eq__(self, other):
        return isinstance(other, TransactionStore) and self._records == other._records

    def __hash__(self):
        return hash(self._records)

    def __repr__(self):
        return f"TransactionStore({len(self)} records)"


@dataclass(frozen=True)
class StoreColumns:
    addresses: list  # sorted unique addresses; code i -> addresses[i]
    src: np.ndarray
    dst: np.ndarray
    ether: np.ndarray  # float64, wei / 1e18
    timestamp: np.ndarray

    @classmethod
    def from_records(cls, records):
        addresses = sorted({r.sender for r in records} | {r.receiver for r in records})
        code = {a: i for i, a in enumerate(addresses)}
        n = len(records)
        src = np.fromiter((code[r.sender] for r in records), dtype=np.int64, count=n)
        dst = np.fromiter((code[r.receiver] for r in records), dtype=np.int64, count=n)
        ether = np.fromiter((r.value / WEI_PER_ETHER for r in records), dtype=np.float64, count=n)
        ts = np.fromiter((r.timestamp for r in records), dtype=np.int64, count=n)
        for arr in (src, dst, ether, ts):
            arr.setflags(write=False)
        return cls(addresses, src, dst, ether, ts)

    def code_of(self, address):
        i = bisect.bisect_left(self.addresses, address)
        if i < len(self.addresses) and self.addresses[i] == address:
            return i
        return -1


def store_merge(batches: Sequence[Sequence[TransactionRecord]]) -> TransactionStore:
    """Concatenate batches in order and keep the first record per tx_id."""
    return TransactionStore(r for batch in batches for r in batch)


# -- file formats -------------------------------------------------------------


def _record_from_fields(fields: dict, lineno: int) -> TransactionRecord:
    try:
        value = int(str(fields["value"]).strip())
    except (KeyError, ValueError):
        raise IngestError(f"bad value at line {lineno}") from None
    if value < 0:
        raise IngestError(f"negative value at line {lineno}")
    try:
        ts = int(str(fields["timestamp"]).strip())
    except (KeyError, ValueError):
        raise IngestError(f"bad timestamp at line {lineno}") from None
    if ts < 0:
        raise IngestError(f"negative timestamp at line {lineno}")
    try:
        tx_id = str(fields["tx_id"])
        sender = Address(fields["from"])
        receiver = Address(fields["to"])
    except KeyError as e:
        raise IngestError(f"missing field {e.args[0]} at line {lineno}") from None
    except IngestError as e:
        raise IngestError(f"{e} at line {lineno}") from None
    if not tx_id:
        raise IngestError(f"empty tx_id at line {lineno}")
    return TransactionRecord(tx_id, sender, receiver, value, ts)


def _iter_csv_rows(text: str):
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = next(reader)
    except StopIteration:
        raise IngestError("missing header at line 1") from None
    if header != TX_HEADER:
        raise IngestError(f"bad header at line 1: expected {','.join(TX_HEADER)}")
    for row in reader:
        lineno = reader.line_num
        if not row:
            continue
        if len(row) != len(TX_HEADER):
            yield lineno, None, f"expected {len(TX_HEADER)} fields, got {len(row)} at line {lineno}"
            continue
        yield lineno, dict(zip(TX_HEADER, row)), None


def _iter_jsonl_rows(text: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            yield lineno, None, f"invalid JSON ({e.msg}) at line {lineno}"
            continue
        if not isinstance(obj, dict) or set(obj) != set(TX_HEADER):
            yield lineno, None, f"expected keys {TX_HEADER} at line {lineno}"
            continue
        yield lineno, obj, None


def parse_transactions(path, format: str = "csv", strict: bool = True, stats: dict | None = None):
    """Parse a transaction dump into a list of records.

    In lenient mode (``strict=False``) malformed rows are skipped and counted
    in ``stats["skipped"]``. Negative values are rejected in both modes.
    """
    text = Path(path).read_text(encoding="utf-8")
    if format == "csv":
        rows = _iter_csv_rows(text)
    elif format == "jsonl":
        rows = _iter_jsonl_rows(text)
    else:
        raise IngestError(f"unknown transaction format {format!r}")
    out = []
    skipped = 0
    for lineno, fields, problem in rows:
        if problem is None:
            try:
                out.append(_record_from_fields(fields, lineno))
                continue
            except IngestError as e:
                if "negative value" in str(e):
                    raise
                problem = str(e)
        if strict:
            raise IngestError(problem)
        skipped += 1
        log.warning("skipping malformed row: %s", problem)
    if stats is not None:
        stats["skipped"] = skipped
    return out


def serialize_transactions(records: Iterable[TransactionRecord], path, format: str = "csv"):
    path = Path(path)
    if format == "csv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TX_HEADER)
            for r in records:
                w.writerow([r.tx_id, r.sender, r.receiver, r.value, r.timestamp])
    elif format == "jsonl":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            for r in records:
                obj = {"tx_id": r.tx_id, "from": r.sender, "to": r.receiver,
                       "value": r.value, "timestamp": r.timestamp}
                fh.write(json.dumps(obj) + "\n")
    else:
        raise IngestError(f"unknown transaction format {format!r}")


def parse_labels(path) -> LabelSet:
    ponzi, normal = set(), set()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise IngestError("bad label header at line 1: expected address,label")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 2:
                raise IngestError(f"expected 2 fields at line {lineno}")
            try:
                addr = Address(row[0])
            except IngestError as e:
                raise IngestError(f"{e} at line {lineno}") from None
            token = row[1].strip().lower()
            if token == "ponzi":
                target, other = ponzi, normal
            elif token == "normal":
                target, other = normal, ponzi
            else:
                raise IngestError(f"unknown label {row[1]!r} at line {lineno}")
            if addr in other:
                raise IngestError(f"conflicting labels for {addr} at line {lineno}")
            target.add(addr)
    return LabelSet(frozenset(ponzi), frozenset(normal))


def write_labels(labels: LabelSet, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for a in sorted(labels.ponzi):
            w.writerow([a, "ponzi"])
        for a in sorted(labels.normal):
            w.writerow([a, "normal"])


# -- Etherscan-compatible fetching --------------------------------------------


class RateLimiter:
    """Thread-safe minimum-interval limiter."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate_limit must be > 0")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def wait(self):
        with self._lock:
            now = self._clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self._sleep(start - now)


_REQUIRED_TX_KEYS = ("hash", "from", "to", "value", "timeStamp")


def _records_from_api(items) -> list:
    out = []
    for item in items:
        for key in _REQUIRED_TX_KEYS:
            if key not in item:
                raise IngestError(f"API transaction missing key {key!r}")
        receiver = item["to"] or item.get("contractAddress", "")
        out.append(TransactionRecord(
            tx_id=str(item["hash"]),
            sender=Address(item["from"]),
            receiver=Address(receiver),
            value=int(item["value"]),
            timestamp=int(item["timeStamp"]),
        ))
    return out


class EtherscanClient:
    """Paginated ``account/txlist`` client with disk cache, rate limit and retries.

    ``requests_made`` counts HTTP requests actually issued (cache hits add 0).
    """

    def __init__(self, endpoint, api_key=None, rate_limit=5.0, cache_dir=None,
                 page_size=1000, attempts=3, backoff=0.5, timeout=30.0, session=None):
        self.endpoint = endpoint
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.limiter = RateLimiter(rate_limit)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.page_size = page_size
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self.requests_made = 0
        self._count_lock = threading.Lock()

    def _cache_path(self, address: Address) -> Path:
        key = hashlib.sha256(f"{self.endpoint}\n{address}".encode()).hexdigest()[:32]
        return self.cache_dir / f"{address}-{key}.json"

    def _get(self, params) -> dict:
        status = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            self.limiter.wait()
            with self._count_lock:
                self.requests_made += 1
            try:
                resp = self.session.get(self.endpoint, params=params, timeout=self.timeout)
            except requests.RequestException as e:
                status = type(e).__name__
                continue
            status = resp.status_code
            if resp.status_code != 200:
                continue
            try:
                return resp.json()
            except ValueError:
                status = "invalid JSON"
        raise FetchError(f"request failed after {self.attempts} attempts (last status: {status})", status)

    def fetch_pages(self, address: Address) -> list:
        pages = []
        page = 1
        while True:
            params = {
                "module": "account", "action": "txlist", "address": str(address),
                "startblock": 0, "endblock": 99999999, "page": page,
                "offset": self.page_size, "sort": "asc", "apikey": self.api_key,
            }
            data = self._get(params)
            for key in ("status", "result"):
                if key not in data:
                    raise IngestError(f"API response missing key {key!r}")
            pages.append(data)
            result = data["result"]
            if str(data["status"]) != "1":
                if isinstance(result, list) and not result:
                    break
                raise FetchError(f"API error: {data.get('message')}: {result}")
            if len(result) < self.page_size:
                break
            page += 1
        return pages

    def account_transactions(self, address) -> list:
        address = Address(address)
        pages = None
        if self.cache_dir is not None:
            path = self._cache_path(address)
            if path.exists():
                pages = json.loads(path.read_text(encoding="utf-8"))
        if pages is None:
            pages = self.fetch_pages(address)
            if self.cache_dir is not None:
                self.cache_dir.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_text(json.dumps(pages), encoding="utf-8")
                tmp.replace(path)
        items = []
        for data in pages:
            if str(data.get("status")) == "1":
                items.extend(data["result"])
        # stable sort keeps API order within a block
        items.sort(key=lambda it: (int(it.get("blockNumber", 0) or 0), int(it.get("timeStamp", 0) or 0)))
        return _records_from_api(items)


def fetch_account_transactions(endpoint, address, api_key=None, rate_limit=5.0,
                               cache_dir=None, client=None, **kwargs) -> list:
    client = client or EtherscanClient(endpoint, api_key=api_key, rate_limit=rate_limit,
                                       cache_dir=cache_dir, **kwargs)
    return client.account_transactions(address)


def fetch_many(client: EtherscanClient, addresses, workers: int = 4) -> TransactionStore:
    """Fetch several accounts concurrently; batches merge in input order."""
    from concurrent.futures import ThreadPoolExecutor

    addresses = [Address(a) for a in addresses]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        batches = list(pool.map(client.account_transactions, addresses))
    return store_merge(batches)
