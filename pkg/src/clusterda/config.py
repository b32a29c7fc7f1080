"""Flat run configuration: defaults, YAML file, flag overrides and validation.

Every key is a field of :class:`RunConfig`. A config file is a flat YAML
mapping of those keys; command-line flags override file values. All problems
found while loading are collected and reported together.
"""

from __future__ import annotations

import dataclasses
import difflib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .adapt import VALIDATION_SOURCES, AdaptConfig, TrainConfig
from .data import SynthConfig
from .wsclust import STAGES, WscConfig

MODES = ("gen-data", "s", "s+t", "adapt", "ablate", "eval", "report")


class ConfigError(ValueError):
    """One or more configuration problems; ``errors`` lists each of them."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    mode: str = "adapt"
    seed: int = 0
    data: Optional[str] = None
    out: str = "runs/out"
    checkpoint: Optional[str] = None
    runs: tuple = ()
    # synthetic benchmark
    num_classes: int = 3
    dim: int = 2
    n_max: int = 600
    pareto_alpha: float = 1.0
    class_separation: float = 2.0
    noise_sigma: float = 1.0
    rotation_deg: float = 30.0
    shift_scale: float = 2.0
    train_frac: float = 0.6
    val_frac: float = 0.1
    labeled_fraction: float = 0.02
    # clustering
    k: int = 30
    must_penalty: float = 1.0
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 5
    tol: float = 1e-6
    # training
    margin: float = 1.0
    lam: float = 1.0
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size_ce: int = 32
    triplets_per_step: int = 32
    epochs_per_round: int = 5
    pretrain_multiplier: int = 4
    hidden: tuple = (64,)
    embed_dim: int = 32
    # adaptation loop
    max_rounds: int = 50
    patience: int = 5
    val_fraction_of_dt: float = 0.5
    source_holdout_fraction: float = 0.1
    validation: str = "auto"
    stage: str = "full"

    def synth(self) -> SynthConfig:
        return SynthConfig(
            num_classes=self.num_classes, dim=self.dim, n_max=self.n_max,
            pareto_alpha=self.pareto_alpha, class_separation=self.class_separation,
            noise_sigma=self.noise_sigma, rotation_deg=self.rotation_deg,
            shift_scale=self.shift_scale, train_frac=self.train_frac,
            val_frac=self.val_frac, seed=self.seed,
        )

    def wsc(self) -> WscConfig:
        return WscConfig(self.k, self.must_penalty, self.kmeans_max_iter, self.kmeans_restarts,
                         self.tol, seed=self.seed)

    def train(self) -> TrainConfig:
        return TrainConfig(
            margin=self.margin, lam=self.lam, learning_rate=self.learning_rate,
            momentum=self.momentum, batch_size_ce=self.batch_size_ce,
            triplets_per_step=self.triplets_per_step, epochs_per_round=self.epochs_per_round,
            pretrain_multiplier=self.pretrain_multiplier, hidden=tuple(self.hidden),
            embed_dim=self.embed_dim, seed=self.seed,
        )

    def adapt(self, stage: Optional[str] = None) -> AdaptConfig:
        return AdaptConfig(
            train=self.train(), wsc=self.wsc(), max_rounds=self.max_rounds, patience=self.patience,
            val_fraction_of_dt=self.val_fraction_of_dt,
            source_holdout_fraction=self.source_holdout_fraction,
            validation=self.validation, stage=stage or self.stage,
        )

    def echo(self) -> dict:
        """Resolved config for provenance. ``out`` is left out so results do not depend on where they land."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d["hidden"] = list(self.hidden)
        d["runs"] = list(self.runs)
        return d


# alternative spellings accepted in files and on the command line
ALIASES = {"K": "k", "lambda": "lam", "epsilon": "margin", "alpha": "pareto_alpha",
           "dataset_path": "data", "output_dir": "out"}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def valid_keys() -> list[str]:
    return sorted(set(_FIELDS) | set(ALIASES))


def canonical_key(key: str) -> Optional[str]:
    key = ALIASES.get(key, key)
    return key if key in _FIELDS else None


def _unknown(key: str) -> str:
    close = difflib.get_close_matches(key, valid_keys(), n=1, cutoff=0.6)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return f"unknown key {key!r}{hint}"


def _coerce(name: str, value: Any):
    """Check ``value`` against the type of field ``name``. Returns (value, error)."""
    default = getattr(_DEFAULTS, name)
    if name in ("data", "checkpoint"):
        if value is None or isinstance(value, str):
            return value, None
        return None, f"{name}: expected a path, got {value!r}"
    if name in ("hidden", "runs"):
        items = value if isinstance(value, (list, tuple)) else [value]
        kind = int if name == "hidden" else str
        if all(isinstance(v, kind) and not isinstance(v, bool) for v in items):
            return tuple(items), None
        return None, f"{name}: expected a list of {kind.__name__}, got {value!r}"
    if isinstance(default, bool) or value is None:
        return None, f"{name}: expected {type(default).__name__}, got {value!r}"
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value, None
        return None, f"{name}: expected an integer, got {value!r}"
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value), None
        return None, f"{name}: expected a number, got {value!r}"
    if isinstance(value, str):
        return value, None
    return None, f"{name}: expected a string, got {value!r}"


def _semantic_errors(cfg: RunConfig) -> list[str]:
    errs = []
    if cfg.mode not in MODES:
        errs.append(f"mode: must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if cfg.validation not in VALIDATION_SOURCES:
        errs.append(f"validation: must be one of {', '.join(VALIDATION_SOURCES)}")
    if cfg.stage not in STAGES:
        errs.append(f"stage: must be one of {', '.join(STAGES)}")
    if cfg.seed < 0:
        errs.append("seed: must be >= 0")
    positive = ("num_classes", "dim", "n_max", "pareto_alpha", "class_separation", "noise_sigma",
                "k", "kmeans_max_iter", "kmeans_restarts", "tol", "margin", "learning_rate",
                "batch_size_ce", "triplets_per_step", "epochs_per_round", "pretrain_multiplier",
                "embed_dim", "max_rounds", "patience")
    for name in positive:
        if not getattr(cfg, name) > 0:
            errs.append(f"{name}: must be > 0")
    for name in ("must_penalty", "lam", "val_fraction_of_dt"):
        if getattr(cfg, name) < 0:
            errs.append(f"{name}: must be >= 0")
    if not 0 <= cfg.momentum < 1:
        errs.append("momentum: must lie in [0, 1)")
    if not 0 < cfg.labeled_fraction < 1:
        errs.append("labeled_fraction: must lie in (0, 1)")
    if not 0 < cfg.source_holdout_fraction < 1:
        errs.append("source_holdout_fraction: must lie in (0, 1)")
    if any(h < 1 for h in cfg.hidden):
        errs.append("hidden: layer widths must be >= 1")
    if cfg.num_classes >= 2 and cfg.k < cfg.num_classes:
        errs.append(f"k: must be >= num_classes ({cfg.num_classes})")
    if cfg.mode == "eval":
        if cfg.checkpoint is None:
            errs.append("checkpoint: eval mode needs --checkpoint")
        if cfg.data is None:
            errs.append("data: eval mode needs --data")
    if cfg.mode == "report" and not cfg.runs:
        errs.append("runs: report mode needs at least one run directory")
    for name in ("data", "checkpoint"):
        path = getattr(cfg, name)
        if path is not None and not Path(path).is_file():
            errs.append(f"{name}: file not found: {path}")
    for run in cfg.runs:
        if not Path(run).exists():
            errs.append(f"runs: not found: {run}")
    return errs


def read_config_file(path) -> dict:
    """Parse a flat YAML mapping. An empty file means all defaults."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config file {path}: {exc.strerror or exc}"]) from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config file {path}: not valid YAML ({exc})"]) from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError([f"config file {path}: expected a mapping of key: value pairs"])
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError([f"config file {path}: nested section {k!r}; keys must be flat" for k in nested])
    return {str(k): v for k, v in raw.items()}


def resolve(file_values: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then file values, then overrides (flags win). Raises :class:`ConfigError`."""
    errors: list[str] = []
    values: dict = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            name = canonical_key(key)
            if name is None:
                errors.append(_unknown(key))
                continue
            coerced, err = _coerce(name, value)
            if err:
                errors.append(err)
            else:
                values[name] = coerced
    if errors:
        raise ConfigError(errors)
    cfg = RunConfig(**values)
    errors = _semantic_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    return resolve(read_config_file(path) if path is not None else {}, overrides)
