"""Flat key=value run configuration.

One ``key = value`` pair per line, ``#`` starts a comment.  Unknown keys
are rejected.  Every key has a default, so an empty file is a valid
configuration; the fully resolved set is echoed into each run directory.
Environment variables ``FEWSHOT_<KEY>`` override file values, and CLI
flags override both.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .data import augment_rotations, load_image_dataset, split_classes, synth_dataset
from .episodes import EpisodeSpec, TrainConfig, substream
from .errors import ConfigError
from .model import ModelConfig

ENV_PREFIX = "FEWSHOT_"
TAG_DATA_SPLIT = 8


@dataclass
class RunConfig:
    # dataset source: "synth" or a class-folder image root
    data: str = "synth"
    image_size: int = 28
    grayscale: bool = True
    invert: bool = False
    augment: bool = False
    split_train: int = 0
    split_val: int = 0
    split_test: int = 0
    # synthetic dataset shape (used when data = synth)
    synth_train_classes: int = 20
    synth_val_classes: int = 5
    synth_test_classes: int = 5
    synth_per_class: int = 20
    synth_noise_sd: float = 0.1
    synth_outlier_rate: float = 0.0
    synth_seed: int = 12345
    # task family
    ways: int = 5
    shots: int = 1
    queries: int = 5
    # meta-training
    episodes: int = 2000
    meta_batch: int = 4
    lr: float = 0.001
    lr_halve_every: int = 20000
    val_every: int = 1000
    val_tasks: int = 200
    dropout_keep: float = 0.5
    # model
    aggregation: str = "attention"
    channels: int = 64
    attention_channels: int = 32
    last_pool: str = "auto"
    oneshot_softmax: bool = False
    # evaluation
    eval_seeds: int = 10
    eval_tasks: int = 100
    # run
    seed: int = 0
    out_dir: str = "run"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    if kind == "bool":
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got '{text}'")
    if kind == "int":
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects an integer, got '{text}'") from None
    if kind == "float":
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"key '{key}' expects a number, got '{text}'") from None
    return text


def parse_config_text(text: str) -> dict:
    """Parse key=value lines; unknown keys raise ConfigError."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}' (line {lineno})")
        values[key] = _parse_value(key, val)
    return values


def _env_overrides(environ) -> dict:
    values = {}
    for key in _FIELD_TYPES:
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is not None:
            values[key] = _parse_value(key, raw)
    return values


def _validate(cfg: RunConfig) -> None:
    if cfg.aggregation not in ("attention", "mean"):
        raise ConfigError(f"aggregation must be 'attention' or 'mean', got '{cfg.aggregation}'")
    if cfg.last_pool not in ("auto", "on", "off"):
        raise ConfigError(f"last_pool must be auto/on/off, got '{cfg.last_pool}'")
    if not 0.0 < cfg.dropout_keep <= 1.0:
        raise ConfigError(f"dropout_keep must be in (0, 1], got {cfg.dropout_keep}")
    if cfg.ways < 2 or cfg.shots < 1 or cfg.queries < 1:
        raise ConfigError("ways must be >= 2, shots and queries >= 1")
    if cfg.episodes < 0:
        raise ConfigError("episodes must be >= 0")
    for name in ("meta_batch", "lr_halve_every", "val_every", "val_tasks",
                 "eval_seeds", "eval_tasks", "image_size", "channels",
                 "attention_channels", "synth_per_class"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if not 0.0 <= cfg.synth_outlier_rate < 1.0:
        raise ConfigError("synth_outlier_rate must lie in [0, 1)")


def load_run_config(path=None, overrides=None, environ=None) -> RunConfig:
    """Resolve file values, then environment, then explicit overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                values.update(parse_config_text(f.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(_env_overrides(environ if environ is not None else os.environ))
    if overrides:
        for key, val in overrides.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key '{key}'")
            values[key] = val
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical echo of a resolved configuration."""
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def build_dataset(cfg: RunConfig):
    """Materialize the configured dataset with split tags."""
    if cfg.data == "synth":
        total = cfg.synth_train_classes + cfg.synth_val_classes + cfg.synth_test_classes
        ds = synth_dataset(
            num_classes=total,
            per_class=cfg.synth_per_class,
            image_size=cfg.image_size,
            noise_sd=cfg.synth_noise_sd,
            outlier_rate=cfg.synth_outlier_rate,
            seed=cfg.synth_seed,
        )
        rng = substream(cfg.synth_seed, TAG_DATA_SPLIT)
        ds = split_classes(ds, (cfg.synth_train_classes, cfg.synth_val_classes, cfg.synth_test_classes), rng)
        return ds
    ds = load_image_dataset(cfg.data, cfg.image_size, grayscale=cfg.grayscale, invert=cfg.invert)
    n = len(ds.class_ids())
    counts = (cfg.split_train, cfg.split_val, cfg.split_test)
    if counts == (0, 0, 0):
        counts = (n, 0, 0)
    rng = substream(cfg.seed, TAG_DATA_SPLIT)
    ds = split_classes(ds, counts, rng)
    if cfg.augment:
        ds = augment_rotations(ds)
    return ds


def build_model_config(cfg: RunConfig) -> ModelConfig:
    if cfg.last_pool == "auto":
        last_pool = cfg.image_size >= 48
    else:
        last_pool = cfg.last_pool == "on"
    in_channels = 1 if (cfg.data == "synth" or cfg.grayscale) else 3
    return ModelConfig(
        in_channels=in_channels,
        image_size=cfg.image_size,
        embed_channels=cfg.channels,
        attn_channels=cfg.attention_channels,
        m_max=max(cfg.ways, cfg.shots),
        last_pool=last_pool,
        dropout_keep=cfg.dropout_keep,
        oneshot_softmax=cfg.oneshot_softmax,
    )


def build_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        spec=EpisodeSpec(cfg.ways, cfg.shots, cfg.queries, split="train"),
        episodes=cfg.episodes,
        meta_batch=cfg.meta_batch,
        lr=cfg.lr,
        lr_halve_every=cfg.lr_halve_every,
        val_every=cfg.val_every,
        val_tasks=cfg.val_tasks,
        dropout_keep=cfg.dropout_keep,
        aggregation=cfg.aggregation,
        seed=cfg.seed,
    )
