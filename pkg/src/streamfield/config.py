"""Configuration dataclasses and the TOML config-file reader."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


def load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open("rb") as fh:
        try:
            return tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e


@dataclass(frozen=True)
class FieldConfig:
    levels: int = 8
    table_size: int = 2**14
    features: int = 2
    base_resolution: int = 16
    per_level_scale: float = 1.5
    hidden_width: int = 64
    hidden_depth: int = 2
    # "projected-color" conditions on [mean, variance]; "space-time" on enc(t)
    conditioning: str = "projected-color"
    direction_octaves: int = 4
    time_octaves: int = 4

    def __post_init__(self):
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigError("table_size must be a power of two")
        if self.per_level_scale <= 1:
            raise ConfigError("per_level_scale must be > 1")
        if self.conditioning not in ("projected-color", "space-time"):
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if self.levels < 1 or self.features < 1 or self.hidden_depth < 1 or self.hidden_width < 1:
            raise ConfigError("field sizes must be positive")


@dataclass(frozen=True)
class TrainConfig:
    warmup_iters: int = 500
    iters_per_frame: int = 10
    rays_per_iter: int = 4096
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    depth_loss_weight: float = 1e-4  # set 0 for synthetic scenes
    model_variant: str = "projected-color"
    # projected-color conditioning channels; both off is the "no projected color" ablation
    use_mean: bool = True
    use_variance: bool = True
    occ_transition: bool = True
    occ_update: str = "decay-max"  # decay-max | monotone-max | literal | global
    n_samples: int = 128
    grid_resolution: int = 64
    kernel_size: int = 3
    kernel_stddev: float = 0.8
    keep_interval: int = 20
    sigma_min_start: float = 1.0
    sigma_min_end: float = 0.05
    sigma_min_end_frame: int = 10
    global_points_per_voxel: int = 1
    warmup_decay: float = 0.9  # per-touch decay of grid values during warm-up
    occ_decay: float = 0.8  # per-touch decay in "decay-max" streaming updates
    seed: int = 0
    deterministic: bool = False
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if not self.warmup_iters >= self.iters_per_frame >= 0:
            raise ConfigError("need warmup_iters >= iters_per_frame >= 0")
        if not (0 <= self.warmup_decay < 1 and 0 <= self.occ_decay < 1):
            raise ConfigError("warmup_decay and occ_decay must lie in [0, 1)")
        if self.rays_per_iter < 1:
            raise ConfigError("rays_per_iter must be >= 1")
        if min(self.lr_hash, self.lr_mlp, self.depth_loss_weight) < 0:
            raise ConfigError("learning rates and loss weights must be >= 0")
        if self.model_variant not in ("projected-color", "space-time"):
            raise ConfigError(f"unknown model_variant {self.model_variant!r}")
        if self.occ_update not in ("monotone-max", "literal", "decay-max", "global"):
            raise ConfigError(f"unknown occ_update {self.occ_update!r}")
        if self.field.conditioning != self.model_variant:
            object.__setattr__(self, "field", dataclasses.replace(self.field, conditioning=self.model_variant))

    def replace(self, **overrides) -> "TrainConfig":
        field_over = overrides.pop("field", None)
        cfg = dataclasses.replace(self, **overrides)
        if field_over:
            if isinstance(field_over, dict):
                field_over = dataclasses.replace(cfg.field, **field_over)
            cfg = dataclasses.replace(cfg, field=field_over)
        return cfg


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    fcfg = d.pop("field", {})
    fknown = {f.name for f in dataclasses.fields(FieldConfig)}
    if set(fcfg) - fknown:
        raise ConfigError(f"unknown field config keys: {sorted(set(fcfg) - fknown)}")
    fcfg.setdefault("conditioning", d.get("model_variant", "projected-color"))
    return TrainConfig(field=FieldConfig(**fcfg), **d)


def load_train_config(path) -> TrainConfig:
    return train_config_from_dict(load_toml(path))


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return dataclasses.asdict(cfg)
