"""Run configuration: strict JSON <-> nested dataclasses.

Unknown keys are rejected at every level, and :func:`resolve` expands all
defaults so the saved file fully determines a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .adapt import AdaptConfig
from .augment import BatchAugConfig, SampleAugConfig
from .nn import ModelConfig
from .trainers import BaselineConfig, JointTrainConfig, MetaTrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    preset: str = "toy"
    resolution: int | None = None
    widths: tuple[int, ...] | None = None
    blocks_per_stage: int | None = None
    gn_groups: int | None = None
    hidden_dim: int | None = None
    proj_dim: int | None = None
    num_classes: int | None = None

    def build(self, ssl_heads: bool = True) -> ModelConfig:
        if self.preset not in ("toy", "full"):
            raise ConfigError(f"model.preset must be 'toy' or 'full', got {self.preset!r}")
        over = {k: v for k, v in dataclasses.asdict(self).items() if k != "preset" and v is not None}
        factory = ModelConfig.toy if self.preset == "toy" else ModelConfig.full
        try:
            return factory(ssl_heads=ssl_heads, **over)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None


@dataclass(frozen=True)
class DataSection:
    train: str = "synth"  # "synth" or "cifar10"
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_resolution: int = 16
    synth_seed: int = 0
    test_per_class: int = 20
    test_seed: int = 1
    train_files: tuple[str, ...] = ()
    test_file: str | None = None
    cifar10c_dir: str | None = None
    corruptions: tuple[str, ...] = ()
    severity: int = 5
    synth_corruptions: tuple[dict, ...] = ()
    eval_limit: int | None = None


@dataclass(frozen=True)
class AugmentSection:
    sample: SampleAugConfig = field(default_factory=SampleAugConfig)
    batch: BatchAugConfig = field(default_factory=BatchAugConfig)


@dataclass(frozen=True)
class RunConfig:
    regime: str = "mt3"
    seed: int = 0
    output: str | None = None
    precision: str = "float32"
    deterministic: bool = True
    checkpoint_every: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    meta: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    joint: JointTrainConfig = field(default_factory=JointTrainConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    ttt_lr: float = 0.01  # adaptation lr when evaluating ttt on a jt checkpoint
    augment: AugmentSection = field(default_factory=AugmentSection)
    data: DataSection = field(default_factory=DataSection)

    def model_config(self) -> ModelConfig:
        return self.model.build(ssl_heads=self.regime != "baseline")

    def trainer_config(self):
        return {"mt3": self.meta, "jt": self.joint, "baseline": self.baseline}[self.regime]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return from_dict(tp, value, path)
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(args[0], v, f"{path}[]") for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return dict(value)
    return value


def from_dict(cls, d: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {path or 'config'}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def to_dict(obj) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v
    return conv(obj)


def resolve(cfg: RunConfig) -> RunConfig:
    """Push the master seed into every section and validate cross-field rules."""
    if cfg.regime not in ("mt3", "jt", "baseline"):
        raise ConfigError(f"regime must be mt3, jt or baseline, got {cfg.regime!r}")
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError("precision must be float32 or float64")
    if cfg.data.train not in ("synth", "cifar10"):
        raise ConfigError("data.train must be 'synth' or 'cifar10'")
    rep = dataclasses.replace
    cfg = rep(cfg, meta=rep(cfg.meta, seed=cfg.seed), joint=rep(cfg.joint, seed=cfg.seed),
              baseline=rep(cfg.baseline, seed=cfg.seed), adapt=rep(cfg.adapt, seed=cfg.seed))
    if cfg.model.resolution is None:
        res = cfg.data.synth_resolution if cfg.data.train == "synth" else 32
        cfg = rep(cfg, model=rep(cfg.model, resolution=res))
    elif cfg.data.train == "synth" and cfg.model.resolution != cfg.data.synth_resolution:
        raise ConfigError(f"model.resolution {cfg.model.resolution} != "
                          f"data.synth_resolution {cfg.data.synth_resolution}")
    cfg.model_config()
    return cfg


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(from_dict(RunConfig, raw))


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: RunConfig, exclude=("output",)) -> str:
    d = to_dict(cfg)
    for k in exclude:
        d.pop(k, None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as JSON, else string)."""
    d = to_dict(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(RunConfig, d)
