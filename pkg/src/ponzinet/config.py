"""Run configuration: a JSON document with one object per section.

Example::

    {
      "evaluate": {"seeds": [0, 1, 2], "k": 5, "methods": ["feature_rf", "gcn_feature"]},
      "walk": {"walk_length": 40, "dim": 64},
      "gcn": {"max_epochs": 500},
      "forest": {"n_trees": 50},
      "linear": {"svm_C": 1.0},
      "synth": {"signal_strength": 0.5},
      "fetch": {"rate_limit": 2.0},
      "workers": 2
    }

Sections and keys mirror the library dataclasses; anything unknown is
rejected. Missing keys keep their defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .embed import WalkConfig
from .evaluation import METHODS, EvalConfig, ForestParams, LinearParams
from .gcn import TrainConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FetchParams:
    endpoint: str = "https://api.etherscan.io/api"
    rate_limit: float = 5.0
    page_size: int = 1000
    attempts: int = 3
    backoff: float = 0.5
    timeout: float = 30.0
    cache_dir: str | None = None


@dataclass(frozen=True)
class EvaluateParams:
    methods: tuple = METHODS
    seeds: tuple = ()
    k: int = 5
    val_fraction: float = 0.2
    node2vec_grid: tuple = (0.5, 1.0, 2.0)


SECTIONS = {
    "evaluate": EvaluateParams,
    "walk": WalkConfig,
    "gcn": TrainConfig,
    "forest": ForestParams,
    "linear": LinearParams,
    "synth": SynthConfig,
    "fetch": FetchParams,
}
_TUPLE_KEYS = {"methods", "seeds", "node2vec_grid"}


@dataclass(frozen=True)
class RunConfig:
    evaluate: EvaluateParams = field(default_factory=EvaluateParams)
    walk: WalkConfig = field(default_factory=WalkConfig)
    gcn: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestParams = field(default_factory=ForestParams)
    linear: LinearParams = field(default_factory=LinearParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fetch: FetchParams = field(default_factory=FetchParams)
    workers: int | None = None

    def eval_config(self) -> EvalConfig:
        e = self.evaluate
        return EvalConfig(methods=e.methods, seeds=e.seeds, k=e.k, val_fraction=e.val_fraction,
                          node2vec_grid=e.node2vec_grid, walk=self.walk, gcn=self.gcn,
                          forest=self.forest, linear=self.linear)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        out["workers"] = self.workers
        return out


def _section(name, values, base):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    clean = {k: tuple(v) if k in _TUPLE_KEYS and v is not None else v for k, v in values.items()}
    try:
        return replace(base, **clean)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"section {name!r}: {e}") from None


def merge(cfg: RunConfig, data: dict) -> RunConfig:
    """Apply a (possibly partial) config document on top of ``cfg``."""
    if not isinstance(data, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = sorted(set(data) - set(SECTIONS) - {"workers"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    updates = {name: _section(name, data[name], getattr(cfg, name)) for name in SECTIONS if name in data}
    if "workers" in data:
        w = data["workers"]
        if w is not None and (not isinstance(w, int) or w < 1):
            raise ConfigError("workers must be a positive integer")
        updates["workers"] = w
    bad = [m for m in updates.get("evaluate", cfg.evaluate).methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s): {', '.join(bad)}")
    return replace(cfg, **updates)


def from_dict(data: dict) -> RunConfig:
    return merge(RunConfig(), data)


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(data)


def parse_override(text: str) -> dict:
    """``section.key=value`` or ``workers=N`` (value parsed as JSON, else taken as a string)."""
    key, sep, raw = text.partition("=")
    section, dot, name = key.partition(".")
    if not sep or not (dot or key == "workers"):
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {section: {name: value}} if dot else {key: value}


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8", newline="\n")
