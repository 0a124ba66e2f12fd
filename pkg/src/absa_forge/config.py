"""Run configuration: JSON file + CLI flags + per-strategy loss-weight defaults.

Precedence, highest first: CLI flag, config file, strategy default, built-in default.

Config file schema (every key optional)::

    {
      "seed": 0,
      "strategy": "cada", "verify": false,
      "backend": "mock" | "openai", "endpoint": "...", "model": "gpt-3.5-turbo",
      "max_verify_retries": 5, "max_aug_retries": 2, "max_transport_retries": 3,
      "max_in_flight": 4,
      "hyperparams": {"alpha": .., "beta": .., "tau": .., "learning_rate": .., "batch_size": ..,
                      "max_epochs": .., "patience": .., "dropout_rate": .., "proj_dim": ..},
      "embed_dim": 512,
      "encoder": {"kind": "hash"} | {"kind": "remote", "endpoint": .., "model": .., "d": ..},
      "held_out_fraction": 0.1,
      "paths": {"xml", "triplets", "augmented", "cache", "checkpoint", "log", "report", "test", "monitor", "out"},
      "exemplars": {"<domain>": [{"source_sentence": .., "augmented_sentence": .., "aspect": ..}, x2]},
      "mock": {"repeat_original": 0, "drop_aspect": false, "domain": null, "canned_cda": {}, "canned_ada": {}},
      "grid_alpha": [..], "grid_beta": [..], "workers": 1
    }
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from absa_forge.augment import DEFAULT_MAX_AUG_RETRIES, DEFAULT_MAX_VERIFY_RETRIES, Strategy
from absa_forge.gateway import DEFAULT_ENDPOINT, DEFAULT_MODEL
from absa_forge.model import Hyperparams
from absa_forge.prompts import ExemplarPair
from absa_forge.sweep import DEFAULT_GRID
from absa_forge.train import STRATEGY_DEFAULTS

HP_KEYS = tuple(f.name for f in fields(Hyperparams))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "cada"
    verify: bool = False
    backend: str = "mock"
    endpoint: str = DEFAULT_ENDPOINT
    model: str = DEFAULT_MODEL
    max_verify_retries: int = DEFAULT_MAX_VERIFY_RETRIES
    max_aug_retries: int = DEFAULT_MAX_AUG_RETRIES
    max_transport_retries: int = 3
    max_in_flight: int = 4
    hyperparams: dict = field(default_factory=dict)
    embed_dim: int = 512
    encoder: dict = field(default_factory=lambda: {"kind": "hash"})
    held_out_fraction: float = 0.1
    paths: dict = field(default_factory=dict)
    exemplars: dict = field(default_factory=dict)
    mock: dict = field(default_factory=dict)
    grid_alpha: list = field(default_factory=lambda: list(DEFAULT_GRID))
    grid_beta: list = field(default_factory=lambda: list(DEFAULT_GRID))
    workers: int = 1

    @property
    def strategy_obj(self) -> Strategy:
        return Strategy(self.strategy, self.verify)

    def hp(self) -> Hyperparams:
        return Hyperparams(**self.hyperparams)

    def exemplar_pairs(self) -> dict[str, list[ExemplarPair]]:
        out = {}
        for domain, pairs in self.exemplars.items():
            out[domain] = [ExemplarPair(p["source_sentence"], p["augmented_sentence"], domain, p.get("aspect", ""))
                           for p in pairs]
        return out

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = set(doc) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
    return doc


def resolve(cli: dict, file_cfg: dict) -> RunConfig:
    """Merge ``cli`` (None means unset) over ``file_cfg`` over defaults.

    ``cli`` may carry hyperparameter names (alpha, beta, ...) at top level and
    path names under ``paths``.
    """
    cli = {k: v for k, v in cli.items() if v is not None}
    merged = RunConfig().as_dict()
    for key, value in file_cfg.items():
        if key in ("hyperparams", "paths", "mock", "encoder", "exemplars"):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    hp = dict(merged["hyperparams"])
    for key in HP_KEYS:
        if key in cli and key != "seed":
            hp[key] = cli.pop(key)
    paths = {**merged["paths"], **{k: v for k, v in cli.pop("paths", {}).items() if v is not None}}
    merged.update(cli)
    merged["paths"] = paths

    cfg = RunConfig(**merged)
    try:
        strategy = cfg.strategy_obj
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    alpha, beta = STRATEGY_DEFAULTS[strategy.name]
    hp.setdefault("alpha", alpha)
    hp.setdefault("beta", beta)
    # one root seed drives everything
    hp["seed"] = cfg.seed
    unknown = set(hp) - set(HP_KEYS)
    if unknown:
        raise ConfigError(f"unknown hyperparameters {sorted(unknown)}")
    cfg.hyperparams = hp
    try:
        cfg.hp()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg
