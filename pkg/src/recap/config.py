"""Run configuration: declarative defaults, YAML loading, dotted overrides.

A run is described by one config file. Every key has a default below, the
loader rejects unknown keys, and the fully resolved config is persisted
next to every artifact so a run can be reproduced from its output
directory alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

OUTPUT_DIR_ENV = "RECAP_OUTPUT_DIR"


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


@dataclass
class DataConfig:
    path: str = "data/checkins.csv"
    delimiter: str = ","
    timestamp_format: str = "epoch"   # "epoch" or a strptime pattern
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    gap_threshold_hours: float = 24.0
    suffix_len: int = 10
    store_file: str = "instances.npz"


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    poi_dim: int = 128
    category_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    feedforward_dim: int = 512
    dropout: float = 0.1
    embedding_dropout: float = 0.3
    output_dropout: float = 0.2
    graph_hops: int = 2
    graph_dropout: float = 0.1
    use_graph: bool = True      # ablation switch: zero graph token for the whole run
    use_history: bool = True    # ablation switch: disable revisit prior + calibration


@dataclass
class RevisitConfig:
    window_len: int = 10
    candidate_cap: int = 256
    calibration_hidden: int = 128
    time_embedding_dim: int = 8
    prior_clip: float = 5.0
    recency_tau_init: float = 10.0


@dataclass
class GraphConfig:
    # Count transitions within trajectories only (default), or across every
    # consecutive pair of a user's training check-ins.
    count_across_trajectories: bool = False


@dataclass
class TrainingConfig:
    epochs: int = 130
    batch_size: int = 512
    learning_rate: float = 3e-5
    weight_decay: float = 5e-6
    graph_start_epoch: int = 60
    graph_ramp_epochs: int = 20
    prior_start_epoch: int = 80
    corr_start_epoch: int = 120
    warm_start_epoch: int = 0         # 0 means "same as corr_start_epoch"
    warm_ramp_epochs: int = 10
    warm_weight_max: float = 0.5
    backbone_lr_scale: float = 0.1
    grad_clip_norm: float = 5.0       # 0 disables clipping
    log_file: str = "training_log.jsonl"
    checkpoint_file: str = "checkpoint.pt"

    def resolved_warm_start(self) -> int:
        return self.warm_start_epoch if self.warm_start_epoch > 0 else self.corr_start_epoch


@dataclass
class EvalConfig:
    tail_threshold: int = 1
    cutoffs: tuple = (1, 20)
    hop_values: tuple = (1, 2, 3, 4, 5)
    report_file: str = "eval_report.json"


@dataclass
class SynthConfig:
    num_users: int = 50
    num_pois: int = 200
    num_checkins: int = 20000
    num_withheld_pairs: int = 100
    num_clusters: int = 6
    revisit_prob: float = 0.35
    away_favorite_prob: float = 0.30
    traversals_per_triple: int = 8
    burst_len_min: int = 3
    burst_len_max: int = 8
    output_file: str = "synthetic_checkins.csv"
    sidecar_file: str = "synthetic_truth.json"


@dataclass
class RunConfig:
    seed: int = 3407
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    revisit: RevisitConfig = field(default_factory=RevisitConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> None:
        d = self.data
        if not (d.train_ratio > 0 and d.val_ratio > 0 and d.test_ratio > 0):
            raise ConfigError("split ratios must be positive")
        if abs(d.train_ratio + d.val_ratio + d.test_ratio - 1.0) > 1e-9:
            raise ConfigError("split ratios must sum to 1")
        if d.suffix_len < 1:
            raise ConfigError("data.suffix_len must be >= 1")
        t = self.training
        stages = (t.graph_start_epoch, t.prior_start_epoch, t.corr_start_epoch,
                  t.resolved_warm_start())
        if not (1 <= stages[0] <= stages[1] <= stages[2] <= stages[3] <= t.epochs):
            raise ConfigError(
                "curriculum epochs must satisfy 1 <= graph <= prior <= corr <= warm <= epochs"
            )
        if self.model.hidden_dim % self.model.num_heads != 0:
            raise ConfigError("model.hidden_dim must be divisible by model.num_heads")
        if self.model.graph_hops < 0:
            raise ConfigError("model.graph_hops must be >= 0")
        if self.revisit.candidate_cap < 1:
            raise ConfigError("revisit.candidate_cap must be >= 1")
        if self.eval.tail_threshold < 0:
            raise ConfigError("eval.tail_threshold must be >= 0")

    def resolved_output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_DIR_ENV, self.output_dir))


def _coerce(value: Any, target_type: Any, key: str) -> Any:
    """Coerce a YAML/CLI value to the declared field type."""
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
        raise ConfigError(f"cannot interpret {value!r} as bool for key {key!r}")
    if target_type is int:
        if isinstance(value, bool):
            raise ConfigError(f"expected int for key {key!r}, got bool")
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return str(value)
    if target_type is tuple:
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list for key {key!r}")
        return tuple(int(v) for v in value)
    return value


def _apply_mapping(cfg: Any, mapping: dict, prefix: str = "") -> None:
    known = {f.name for f in fields(cfg)}
    for key, value in mapping.items():
        full = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key: {full!r}")
        current = getattr(cfg, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {full!r} must be a mapping")
            _apply_mapping(current, value, prefix=f"{full}.")
        else:
            setattr(cfg, key, _coerce(value, type(current), full))


def _nest_dotted(flat: dict) -> dict:
    """Turn {"training.epochs": 2} into {"training": {"epochs": 2}}."""
    nested: dict = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = nested
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"conflicting override path {dotted!r}")
        node[parts[-1]] = value
    return nested


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional YAML file, and overrides.

    Overrides use flat dotted keys (e.g. ``training.epochs``). Unknown keys
    raise ConfigError.
    """
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        _apply_mapping(cfg, loaded)
    if overrides:
        _apply_mapping(cfg, _nest_dotted(overrides))
    cfg.validate()
    return cfg


def parse_override(text: str) -> tuple[str, Any]:
    """Parse a single ``key=value`` override; values go through YAML rules."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)

    def listify(node):
        if isinstance(node, dict):
            return {k: listify(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return list(node)
        return node

    return listify(out)


def save_resolved_config(cfg: RunConfig, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "resolved_config.yaml"
    with open(target, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    return target


def model_fingerprint(cfg: RunConfig, num_pois: int, num_users: int,
                      num_categories: int) -> str:
    """Stable hash of everything that fixes checkpoint tensor shapes."""
    payload = {
        "data": {"suffix_len": cfg.data.suffix_len},
        "model": dataclasses.asdict(cfg.model),
        "revisit": dataclasses.asdict(cfg.revisit),
        "vocab": {"pois": num_pois, "users": num_users, "categories": num_categories},
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
