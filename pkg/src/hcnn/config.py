"""Dataclass configs: network architecture, optimizer schedule, augmentation
and the top-level run document consumed by the CLI."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError, MissingFileError


def _from_dict(cls, d: dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for k, v in d.items():
        sub = _NESTED.get((cls.__name__, k))
        if sub is not None:
            v = _from_dict(sub, v, f"{where}.{k}")
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def canonical_json(d: dict) -> str:
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class NetworkConfig:
    J: int = 12
    K: int = 16
    Q: int = 32
    N: int = 32
    num_classes: int = 10
    in_channels: int = 3
    attribute_support: tuple = (7, 11)
    spatial_support: tuple = (3, 3)
    stride_depths: tuple = (5, 9)
    boundary: str = "zero"
    variant: str = "standard"

    def __post_init__(self):
        object.__setattr__(self, "attribute_support", tuple(self.attribute_support))
        object.__setattr__(self, "spatial_support", tuple(self.spatial_support))
        object.__setattr__(self, "stride_depths", tuple(sorted(self.stride_depths)))
        self.validate()

    def validate(self):
        if self.J < 4:
            raise ConfigError(f"J must be at least 4, got {self.J}")
        if self.K < 4 or self.K % 4:
            raise ConfigError(f"K must be a positive multiple of 4, got {self.K}")
        if self.Q < 1 or self.num_classes < 1 or self.in_channels < 1 or self.N < 1:
            raise ConfigError("Q, num_classes, in_channels and N must be positive")
        if len(self.attribute_support) != 2 or len(self.spatial_support) != 2:
            raise ConfigError("supports must have two entries")
        if min(self.attribute_support + self.spatial_support) < 1:
            raise ConfigError("supports must be positive")
        bad = [j for j in self.stride_depths if not 2 <= j <= self.J - 1]
        if bad or len(set(self.stride_depths)) != len(self.stride_depths):
            raise ConfigError(f"stride_depths must be distinct depths in [2, {self.J - 1}]")
        if self.boundary not in ("zero", "periodic"):
            raise ConfigError(f"boundary must be 'zero' or 'periodic', got {self.boundary!r}")
        if self.variant not in ("standard", "plus"):
            raise ConfigError(f"variant must be 'standard' or 'plus', got {self.variant!r}")
        if self.boundary == "periodic":
            sa, sb = self.attribute_support
            if sb > self.K or sa > self.K // 2:
                raise ConfigError(
                    f"periodic boundary needs attribute support <= ({self.K // 2}, {self.K}),"
                    f" got {self.attribute_support}"
                )
            n = self.N
            for j in range(1, self.J):
                if j in self.stride_depths:
                    n = math.ceil(n / 2)
                if max(self.spatial_support) > n:
                    raise ConfigError(f"spatial support exceeds spatial extent {n} at depth {j}")

    def spatial_stride(self, j: int) -> int:
        return 2 if j in self.stride_depths else 1

    def out_channels(self, j: int) -> int:
        """Extent of the attribute introduced at depth ``j``."""
        return self.num_classes if j == self.J - 1 else self.K

    def replace(self, **kw) -> "NetworkConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d) -> "NetworkConfig":
        return _from_dict(cls, d, "network")

    # presets -----------------------------------------------------------

    @classmethod
    def cifar10(cls, variant="standard", boundary="zero") -> "NetworkConfig":
        return cls(variant=variant, boundary=boundary)

    @classmethod
    def cifar100(cls, variant="standard", boundary="zero") -> "NetworkConfig":
        return cls(num_classes=100, attribute_support=(11, 11), variant=variant,
                   boundary=boundary)

    @classmethod
    def toy(cls, variant="standard", boundary="periodic") -> "NetworkConfig":
        return cls(J=6, K=8, Q=4, N=8, attribute_support=(3, 5), stride_depths=(4,),
                   variant=variant, boundary=boundary)

    @classmethod
    def desk(cls, variant="standard", boundary="zero") -> "NetworkConfig":
        return cls(K=8, Q=16, attribute_support=(3, 5), variant=variant, boundary=boundary)

    @classmethod
    def preset(cls, name: str, **kw) -> "NetworkConfig":
        try:
            return getattr(cls, {"cifar10": "cifar10", "cifar100": "cifar100",
                                 "toy": "toy", "desk": "desk"}[name])(**kw)
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}") from None


@dataclass(frozen=True)
class Schedule:
    lr: float = 0.25
    decay_factor: float = 10.0
    decay_every: int = 40
    epochs: int = 240
    batch_size: int = 50
    momentum: float = 0.9
    weight_decay: float = 2e-4
    max_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ConfigError("schedule needs lr > 0, batch_size >= 1, decay_every >= 1")

    def rate(self, epoch: int) -> float:
        return self.lr / self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class AugmentationPolicy:
    max_shift: int = 6
    flip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.max_shift < 0 or not 0 <= self.flip_prob <= 1:
            raise ConfigError("augmentation needs max_shift >= 0 and flip_prob in [0, 1]")


@dataclass(frozen=True)
class DataConfig:
    kind: str = "cifar10"
    path: str | None = None
    synthetic_kind: str = "easy"
    synthetic_train: int = 200
    synthetic_test: int = 100
    synthetic_seed: int = 0
    train_subset: int | None = None
    test_subset: int | None = None

    def __post_init__(self):
        if self.kind not in ("cifar10", "cifar100", "synthetic"):
            raise ConfigError(f"data.kind must be cifar10, cifar100 or synthetic, got {self.kind!r}")
        if self.kind != "synthetic" and not self.path:
            raise ConfigError(f"data.path is required for {self.kind}")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    schedule: Schedule = field(default_factory=Schedule)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    data: DataConfig = field(default_factory=lambda: DataConfig(kind="synthetic"))
    seed: int = 0
    output_dir: str = "runs/default"
    threads: int = 1
    checkpoint_every: int = 1
    log_wall_time: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.threads < 1 or self.checkpoint_every < 1:
            raise ConfigError("threads and checkpoint_every must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["network"] = self.network.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        return _from_dict(cls, d, "run")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except FileNotFoundError:
            raise MissingFileError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"malformed JSON in {path}: {e}") from None
        return cls.from_dict(d)

    @classmethod
    def desk_scale(cls, cifar_path, seed=0, output_dir="runs/desk") -> "RunConfig":
        """CIFAR-10 subset run: 5,000 train / 1,000 test images, K=8, 20 epochs."""
        return cls(network=NetworkConfig.desk(), schedule=Schedule(epochs=20),
                   data=DataConfig(kind="cifar10", path=str(cifar_path), train_subset=5000,
                                   test_subset=1000),
                   seed=seed, output_dir=output_dir, log_wall_time=True)

    @classmethod
    def overfit_smoke(cls, data: "DataConfig", network=None, seed=0,
                      output_dir="runs/overfit") -> "RunConfig":
        """Memorize 50 training images: no augmentation, batch 25, at most 500 steps."""
        data = dataclasses.replace(data, train_subset=50)
        return cls(network=network or NetworkConfig.desk(), data=data, seed=seed,
                   schedule=Schedule(lr=0.05, epochs=250, batch_size=25, max_steps=500),
                   augmentation=AugmentationPolicy(enabled=False), output_dir=output_dir)

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply non-None top-level overrides (CLI flags win over the file)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return dataclasses.replace(self, **kw)


_NESTED = {
    ("RunConfig", "network"): NetworkConfig,
    ("RunConfig", "schedule"): Schedule,
    ("RunConfig", "augmentation"): AugmentationPolicy,
    ("RunConfig", "data"): DataConfig,
}
