"""Strict JSON run configuration shared by every CLI stage."""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError
from .fusion import FUSION_MODES, FusionConfig
from .grid import GridSpec, grid_for_range
from .mae import RANDOM_PATCH_CANDIDATES, MaeConfig, MaskSpec
from .nn.layers import AttentionConfig
from .synth import WorldSpec

SEED_ENV = "PMAP_SEED"


class ConfigError(DataError):
    pass


@dataclass(frozen=True)
class GridSection:
    range_forward_m: float = 128.0
    range_lateral_m: float = 64.0
    resolution_m: float = 0.5

    def build(self) -> GridSpec:
        return grid_for_range(self.range_forward_m, self.range_lateral_m, self.resolution_m)


@dataclass(frozen=True)
class DatasetSection:
    train_scenes: int = 512
    eval_scenes: int = 128
    sigma_translation_m: float = 0.5
    sigma_rotation_rad: float = 0.005
    include_service: bool = False
    sd_margin_m: float = 10.0
    # eval scenes come from a separate world seeded at world.seed + offset
    eval_world_offset: int = 1000


@dataclass(frozen=True)
class AttentionSection:
    num_heads: int = 2
    model_dim: int = 32
    head_dim: int = 16
    num_layers: int = 2
    dropout_rate: float = 0.1


@dataclass(frozen=True)
class FusionSection:
    downsample_factor: int = 8
    mode: str = "cross-attention"
    encoder_channels: int = 8
    positional_embedding: bool = True
    skip_connection: bool = True
    local_attention_init: bool = True
    attention: AttentionSection = field(default_factory=AttentionSection)

    def build(self, grid: GridSpec) -> FusionConfig:
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion.mode must be one of {FUSION_MODES}, got {self.mode!r}")
        a = self.attention
        return FusionConfig(grid, self.downsample_factor,
                            AttentionConfig(a.num_heads, a.model_dim, a.head_dim, a.num_layers,
                                            a.dropout_rate),
                            self.mode, self.encoder_channels, self.positional_embedding,
                            self.skip_connection,
                            local_attention_init=self.local_attention_init)


@dataclass(frozen=True)
class MaeSection:
    patch: int = 8
    dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    decoder_channels: int = 8
    input_skip: bool = True

    def build(self) -> MaeConfig:
        return MaeConfig(**dataclasses.asdict(self))


@dataclass(frozen=True)
class MaskSection:
    strategy: str = "random"
    mask_proportion: float = 0.5
    grid_patch: tuple[int, int] = (20, 20)
    random_patch_candidates: tuple[tuple[int, int], ...] = RANDOM_PATCH_CANDIDATES

    def build(self, seed: int) -> MaskSpec:
        return MaskSpec(self.strategy, tuple(self.grid_patch),
                        tuple(tuple(c) for c in self.random_patch_candidates),
                        self.mask_proportion, seed)


@dataclass(frozen=True)
class StageSection:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 4
    class_weights: tuple[float, ...] = (2.0, 2.0, 2.0, 1.0)


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 10
    lr: float = 5e-4
    batch_size: int = 4
    class_weights: tuple[float, ...] = (2.0, 2.0, 2.0, 1.0)
    freeze_fusion: bool = False


@dataclass(frozen=True)
class EvalSection:
    average_precision: bool = True
    figures: bool = True


@dataclass(frozen=True)
class AblationSection:
    modes: tuple[str, ...] = FUSION_MODES
    attention_layers: tuple[int, ...] = (1, 2, 4)
    downsample_factors: tuple[int, ...] = (2, 4, 8)
    epochs: int = 1
    train_scenes: int = 8
    eval_scenes: int = 4


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "runs/default"
    grid: GridSection = field(default_factory=GridSection)
    world: WorldSpec = field(default_factory=lambda: WorldSpec(line_thickness_m=1.0,
                                                                 range_decay_per_m=0.08))
    dataset: DatasetSection = field(default_factory=DatasetSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    mae: MaeSection = field(default_factory=MaeSection)
    mask: MaskSection = field(default_factory=MaskSection)
    train: StageSection = field(default_factory=StageSection)
    pretrain: StageSection = field(default_factory=lambda: StageSection(epochs=20))
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return _to_plain(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _convert(tp, value, where: str, default=None):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where, default)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, data, where: str, base=None):
    """``cls`` from ``data``; keys missing from ``data`` keep their values in ``base``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    base = cls() if base is None else base
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}" if where else k, getattr(base, k))
              for k, v in data.items()}
    try:
        return dataclasses.replace(base, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(data: dict, env: dict | None = None) -> RunConfig:
    """Validate ``data`` against the schema; ``PMAP_SEED`` overrides the seed."""
    cfg = _build(RunConfig, data, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
        cfg = dataclasses.replace(cfg, seed=seed)
    # a few cross-field checks that the sections cannot make alone
    try:
        grid = cfg.grid.build()
        cfg.fusion.build(grid)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.world.extent_m < 2 * max(grid.range_forward_m, grid.range_lateral_m):
        raise ConfigError("world.extent_m must be at least twice the largest grid range")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)
