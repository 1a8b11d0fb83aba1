"""Run configuration: parse, validate, freeze.

A config file is JSON with the same four sections as :class:`RunConfig`.
Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

from .geometry import BevGrid
from .scenegen import GeneratorConfig

STRATEGIES = ("self_attention", "mlp", "cross_attention", "optimal_transport")
SEQUENTIAL_MODES = ("inherit_feat", "reinit_feat")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 2
    points: int = 4
    levels: int = 4
    n_lidar: int = 16
    n_camera: int = 16
    depth_stride: int = 4
    depth_scale: float = 30.0
    depth_channels: int = 16
    strategy: str = "self_attention"
    sequential: str = ""
    # FCOS size bands at an 800 px reference width, rescaled to the image width
    level_thresholds: tuple = (0.0, 48.0, 96.0, 192.0)
    reference_width: float = 800.0
    nms_kernel: int = 3
    ipot_iters: int = 50
    stage1_semantic_transfer: bool = False

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown fusion strategy {self.strategy!r}")
        if self.sequential and self.sequential not in SEQUENTIAL_MODES:
            raise ConfigError(f"unknown sequential mode {self.sequential!r}")
        if len(self.level_thresholds) != self.levels:
            raise ConfigError("need one size threshold per pyramid level")
        if self.n_lidar < 1 or self.n_camera < 1:
            raise ConfigError("query counts must be positive")
        if self.nms_kernel % 2 != 1:
            raise ConfigError("nms_kernel must be odd")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 1.0
    cls_cost: float = 1.0
    l1_cost: float = 1.0
    cls_weight: float = 1.0
    l1_weight: float = 0.25


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    data_seed: int = 2024
    n_train: int = 512
    n_val: int = 64
    stage1_epochs: int = 10
    stage2_epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-2
    data_dir: str = ""
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def grid(self) -> BevGrid:
        return self.generator.grid

    @property
    def num_classes(self):
        return self.generator.num_classes

    def validate(self):
        try:
            self.generator.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.model.validate()
        if self.train.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        g = self.grid
        if self.model.n_lidar > g.width * g.height:
            raise ConfigError("n_lidar exceeds the number of BEV cells")
        return self

    def scaled_thresholds(self):
        s = self.generator.image_size[0] / self.model.reference_width
        return tuple(t * s for t in self.model.level_thresholds)

    def to_dict(self):
        return _to_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def replace(self, **sections):
        """Copy with some section fields replaced: ``cfg.replace(model={"strategy": "mlp"})``."""
        kwargs = {}
        for name, changes in sections.items():
            kwargs[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **kwargs).validate()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    return obj


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            kwargs[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean")
            kwargs[name] = value
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
                raise ConfigError(f"{where}: expected a number")
            kwargs[name] = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}: expected an integer")
            kwargs[name] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{where}: expected a string")
            kwargs[name] = value
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc.msg} at byte {exc.pos}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)
