"""Experiment configuration: a flat key/value schema with validated defaults.

Config files are YAML mappings (JSON is accepted too, so an emitted run
manifest can be fed straight back in).  Keys:

scene                 ``<dataset>[C]-<K>-<S>`` shorthand, e.g. ``synthetic4-20-2``;
                      fills num_classes / num_clients / classes_per_client
source                ``synthetic`` or ``idx``
num_classes           C
num_clients           K
classes_per_client    S
samples_per_class     n, samples per assigned class per client
input_dim, spread     synthetic data: input dimension and blob std
test_per_class        synthetic data: test samples per class
train_images, train_labels, test_images, test_labels   IDX file paths
rounds                R
sample_fraction       fraction of clients selected per round
local_epochs          E
batch_size            B
lr, momentum, weight_decay
                      heavy-ball SGD; the batch loss is a *sum* over samples
mode                  ``etf`` (frozen classifier) or ``baseline`` (learnable)
etf_scale             scale of the frozen frame
gmv_enabled, gmv_alpha, gmv_warm_round
                      global memory vectors; memory aggregation starts one
                      round before ``gmv_warm_round`` so the first warm round
                      reads a fresh vector
hidden_dims           hidden layer widths of the backbone
feature_dim           backbone output dimension d (>= C)
weighting             ``uniform`` over selected clients or by ``samples``
seed                  the only source of randomness
eval_window           trailing window for summaries
max_parallel_clients  worker threads for local training
checkpoint_every      write a checkpoint every N rounds (0 = never)
output_dir            where metrics.csv / manifest.json / checkpoints go;
                      the FEDETF_OUTPUT_DIR environment variable overrides it
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import parse_scene_name
from .errors import ConfigError, SceneError

OUTPUT_DIR_ENV = "FEDETF_OUTPUT_DIR"
REQUIRED = ("num_classes", "num_clients", "classes_per_client", "samples_per_class")
# keys that may differ between the two arms of a paired comparison (or the seed)
COMPARE_AXES = ("mode", "gmv_enabled", "gmv_alpha", "gmv_warm_round", "etf_scale")


@dataclass
class FedConfig:
    scene: str | None = None
    source: str = "synthetic"
    num_classes: int | None = None
    num_clients: int | None = None
    classes_per_client: int | None = None
    samples_per_class: int | None = None
    input_dim: int = 32
    spread: float = 0.5
    test_per_class: int = 200
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    rounds: int = 1000
    sample_fraction: float = 0.1
    local_epochs: int = 2
    batch_size: int = 64
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    mode: str = "etf"
    etf_scale: float = 1.0
    gmv_enabled: bool = False
    gmv_alpha: float = 0.5
    gmv_warm_round: int = 500
    hidden_dims: list[int] = field(default_factory=lambda: [256, 128])
    feature_dim: int = 64
    weighting: str = "uniform"
    seed: int = 0
    eval_window: int = 10
    max_parallel_clients: int = 1
    checkpoint_every: int = 0
    output_dir: str = "runs/default"

    def problems(self) -> list[str]:
        """Every invariant violation, not just the first."""
        out = []
        for key in REQUIRED:
            if getattr(self, key) is None:
                out.append(f"missing required key {key!r}")
        if self.source not in ("synthetic", "idx"):
            out.append(f"source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if not getattr(self, key):
                    out.append(f"source 'idx' needs {key!r}")
        if self.mode not in ("etf", "baseline"):
            out.append(f"mode must be 'etf' or 'baseline', got {self.mode!r}")
        if self.weighting not in ("uniform", "samples"):
            out.append(f"weighting must be 'uniform' or 'samples', got {self.weighting!r}")
        if self.mode == "baseline" and self.gmv_enabled:
            out.append("gmv_enabled requires mode 'etf' (memory vectors are defined for the frozen classifier)")
        if self.gmv_enabled and self.gmv_warm_round > self.rounds:
            out.append(f"gmv_warm_round ({self.gmv_warm_round}) exceeds rounds ({self.rounds})")
        if not 0.0 < self.sample_fraction <= 1.0:
            out.append(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        for key in ("lr", "weight_decay", "gmv_alpha", "spread"):
            if getattr(self, key) < 0:
                out.append(f"{key} must be non-negative, got {getattr(self, key)}")
        if not 0.0 <= self.momentum < 1.0:
            out.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.etf_scale <= 0:
            out.append(f"etf_scale must be positive, got {self.etf_scale}")
        for key in ("rounds", "local_epochs", "gmv_warm_round", "checkpoint_every"):
            if getattr(self, key) < 0:
                out.append(f"{key} must be >= 0, got {getattr(self, key)}")
        for key in ("batch_size", "input_dim", "test_per_class", "eval_window", "max_parallel_clients", "feature_dim"):
            if getattr(self, key) < 1:
                out.append(f"{key} must be >= 1, got {getattr(self, key)}")
        if any(h < 1 for h in self.hidden_dims):
            out.append(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.seed < 0:
            out.append("seed must be non-negative")
        if self.num_classes is not None:
            if self.num_classes < 2:
                out.append(f"num_classes must be >= 2, got {self.num_classes}")
            if self.feature_dim < self.num_classes:
                out.append(f"feature_dim ({self.feature_dim}) must be >= num_classes ({self.num_classes})")
            if self.classes_per_client is not None and not 1 <= self.classes_per_client <= self.num_classes:
                out.append(
                    f"classes_per_client ({self.classes_per_client}) must lie in [1, num_classes={self.num_classes}]"
                )
        for key in ("num_clients", "samples_per_class"):
            value = getattr(self, key)
            if value is not None and value < 1:
                out.append(f"{key} must be >= 1, got {value}")
        return out

    def validate(self) -> "FedConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    @property
    def backbone_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects the computed trajectory."""
        d = self.to_dict()
        for key in ("output_dir", "checkpoint_every", "max_parallel_clients"):
            d.pop(key)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "FedConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(FedConfig)}


def _coerce(key: str, value):
    default = FedConfig.__dataclass_fields__[key]
    kind = default.type
    if value is None:
        return None
    try:
        if key == "hidden_dims":
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [int(v) for v in value]
        if "bool" in kind:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: cannot interpret {value!r} as {kind}") from None


def _expand(raw: dict, problems: list[str]) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _FIELDS:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            out[key] = _coerce(key, value)
        except ConfigError as exc:
            problems.extend(exc.problems)
    return out


def _apply_scene(values: dict, problems: list[str]) -> None:
    scene = values.get("scene")
    if not scene:
        return
    try:
        parsed = parse_scene_name(scene)
    except SceneError as exc:
        problems.append(str(exc))
        return
    for key in ("num_classes", "num_clients", "classes_per_client"):
        if key not in parsed:
            continue
        if values.get(key) is not None and values[key] != parsed[key]:
            problems.append(f"scene {scene!r} implies {key}={parsed[key]} but {key}={values[key]} is set")
        else:
            values[key] = parsed[key]


def parse_overrides(pairs) -> dict:
    """``["key=value", ...]`` -> dict with YAML-typed values."""
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, text = pair.partition("=")
        out[key.strip()] = yaml.safe_load(text) if text.strip() else None
    return out


def load_mapping(path) -> dict:
    text = Path(path).read_text()
    raw = yaml.safe_load(text) if text.strip() else {}
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a key/value mapping")
    # a run manifest nests the resolved config
    if "manifest_version" in raw and isinstance(raw.get("config"), dict):
        raw = raw["config"]
    return raw


def parse_config(path=None, overrides=None, env=None) -> FedConfig:
    """Defaults, then the file, then ``overrides`` (dict or ``key=value`` list), then env."""
    problems: list[str] = []
    values: dict = {}
    if path is not None:
        values.update(_expand(load_mapping(path), problems))
    if overrides:
        if not isinstance(overrides, dict):
            overrides = parse_overrides(overrides)
        values.update(_expand(overrides, problems))
    env = os.environ if env is None else env
    if env.get(OUTPUT_DIR_ENV):
        values["output_dir"] = env[OUTPUT_DIR_ENV]
    _apply_scene(values, problems)
    config = FedConfig(**values)
    problems.extend(config.problems())
    if problems:
        raise ConfigError(problems)
    return config
