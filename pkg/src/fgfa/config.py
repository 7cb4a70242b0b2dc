"""Pipeline configuration with flat dotted keys (``"train.lr": 0.01``)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

MODES = ("single", "naive", "adaptive", "fgfa", "fgfa-composed")


@dataclass
class ModelConfig:
    in_channels: int = 1
    feature_widths: list = field(default_factory=lambda: [8, 16])
    feature_strides: list = field(default_factory=lambda: [2, 2])
    feature_kernel: int = 3
    embed_widths: list = field(default_factory=lambda: [8, 8, 16])
    num_classes: int = 3
    anchor_size: float = 14.0


@dataclass
class HeadConfig:
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass
class AggregationConfig:
    k_infer: int = 10
    mode: str = "fgfa"
    record_weights: bool = False
    flow_noise_std: float = 0.0
    flow_noise_seed: int = 0

    @property
    def aggregate(self) -> bool:
        return self.mode != "single"

    @property
    def use_flow(self) -> bool:
        return self.mode in ("fgfa", "fgfa-composed")

    @property
    def use_adaptive_weights(self) -> bool:
        return self.mode in ("adaptive", "fgfa", "fgfa-composed")

    @property
    def flow_mode(self) -> str:
        return "composed-adjacent" if self.mode == "fgfa-composed" else "per-pair direct"


@dataclass
class TrainConfig:
    k_train: int = 2
    sample_range: int | None = None  # None -> aggregation.k_infer
    mode: str = "fgfa"
    iterations: int = 600
    lr: float = 0.02
    lr_decay_at: float = 2.0 / 3.0  # fraction of iterations before the 10x drop
    lr_decay: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    trainable: str = "all"  # "all" | "embedding"
    init_checkpoint: str | None = None
    clip_grad: float = 10.0
    log_every: int = 1


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    seq_nms: bool = False
    seq_nms_link_iou: float = 0.5
    seq_nms_suppress_iou: float = 0.3
    group_convention: str = "exclude"  # "exclude" | "false-positive"
    ap_mode: str = "all-points"  # "all-points" | "11-point"
    motion_slow_min: float = 0.9
    motion_fast_max: float = 0.7
    motion_window: int = 10
    size_small_max_area: float = 50.0**2
    size_large_min_area: float = 150.0**2


@dataclass
class RuntimeConfig:
    threads: int = 1


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)

    def to_flat(self) -> dict:
        out = {}
        for section in dataclasses.fields(self):
            obj = getattr(self, section.name)
            for f in dataclasses.fields(obj):
                out[f"{section.name}.{f.name}"] = getattr(obj, f.name)
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "PipelineConfig":
        cfg = cls()
        cfg.update(values)
        return cfg

    def update(self, values: dict) -> None:
        for key, value in flatten(values).items():
            self.set(key, value)
        self.validate()

    def set(self, key: str, value) -> None:
        section, _, name = key.partition(".")
        obj = getattr(self, section, None)
        if obj is None or not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key '{key}'", key=key)
        current = getattr(obj, name)
        setattr(obj, name, _coerce(key, value, current, obj, name))

    def validate(self) -> None:
        a, t, e = self.aggregation, self.train, self.eval
        if a.mode not in MODES:
            raise ConfigError(f"aggregation.mode must be one of {MODES}, got '{a.mode}'", key="aggregation.mode")
        if t.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got '{t.mode}'", key="train.mode")
        if a.k_infer < 0:
            raise ConfigError("aggregation.k_infer must be >= 0", key="aggregation.k_infer")
        if t.k_train < 0:
            raise ConfigError("train.k_train must be >= 0", key="train.k_train")
        if t.sample_range is not None and t.sample_range < t.k_train and t.mode != "single":
            raise ConfigError("train.sample_range must be >= train.k_train", key="train.sample_range")
        if t.lr < 0 or t.iterations < 0:
            raise ConfigError("train.lr and train.iterations must be non-negative", key="train.lr")
        if t.trainable not in ("all", "embedding"):
            raise ConfigError("train.trainable must be 'all' or 'embedding'", key="train.trainable")
        if not 0 <= e.motion_fast_max <= e.motion_slow_min <= 1:
            raise ConfigError("need 0 <= eval.motion_fast_max <= eval.motion_slow_min <= 1", key="eval.motion_fast_max")
        if not e.size_small_max_area < e.size_large_min_area:
            raise ConfigError("eval.size_small_max_area must be < eval.size_large_min_area", key="eval.size_small_max_area")
        for key in ("seq_nms_link_iou", "seq_nms_suppress_iou", "iou_threshold"):
            if not 0 <= getattr(e, key) <= 1:
                raise ConfigError(f"eval.{key} must be in [0, 1]", key=f"eval.{key}")
        if e.group_convention not in ("exclude", "false-positive"):
            raise ConfigError("eval.group_convention must be 'exclude' or 'false-positive'", key="eval.group_convention")
        if e.ap_mode not in ("all-points", "11-point"):
            raise ConfigError("eval.ap_mode must be 'all-points' or '11-point'", key="eval.ap_mode")
        if len(self.model.embed_widths) != 3:
            raise ConfigError("model.embed_widths needs exactly 3 entries", key="model.embed_widths")
        if self.runtime.threads < 1:
            raise ConfigError("runtime.threads must be >= 1", key="runtime.threads")

    @property
    def sample_range(self) -> int:
        t = self.train
        return self.aggregation.k_infer if t.sample_range is None else t.sample_range

    def copy(self) -> "PipelineConfig":
        return PipelineConfig.from_flat(self.to_flat())


def flatten(values: dict, prefix: str = "") -> dict:
    """Accept nested sections or dotted keys; return dotted keys."""
    out = {}
    for k, v in values.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and "." not in k and not prefix:
            out.update(flatten(v, prefix=f"{key}."))
        else:
            out[key] = v
    return out


def _coerce(key, value, current, obj, name):
    hint = {f.name: f.type for f in dataclasses.fields(obj)}[name]
    try:
        if isinstance(current, bool) or hint == "bool":
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(current, list):
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return [type(current[0])(v) if current else v for v in value]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            if "None" in str(hint):
                return None
            raise ValueError(value)
        if hint in ("int", "int | None"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint == "float":
            return float(value)
        if "str" in str(hint):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for '{key}': {value!r}", key=key) from exc
    return value


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return PipelineConfig.from_flat(data)
