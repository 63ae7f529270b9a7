"""Pipeline configuration: one YAML file, one section per stage.

Unknown keys are rejected with the dotted key path and source line. Every
default is the published setting where one exists; `desk.yaml` (shipped in
vsuda/configs) shrinks the run to CPU scale through the same machinery.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .conversion import ConversionTrainConfig, DiscriminatorConfig, GeneratorConfig, LossWeights
from .phantom import PhantomError, PhantomSpec
from .segmentation import ArchitectureError, SegTrainConfig, UNetConfig, unet_2d_default, unet_3d_default
from .self_training import SelfTrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    gan_range: Tuple[float, float] = (-1.0, 1.0)
    seg_range: Tuple[float, float] = (0.0, 1.0)
    # common spacing for combined training; None keeps native spacing
    target_spacing: Optional[Tuple[float, float, float]] = None


@dataclass
class PhantomSection:
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    n_annotated_a: int = 10
    n_unannotated_b: int = 10
    # extra labelled domain-B cases used only to train the frozen probe segmenter
    n_probe: int = 6

    def __post_init__(self):
        if self.n_annotated_a < 1 or self.n_unannotated_b < 1:
            raise ConfigError("phantom.n_annotated_a and phantom.n_unannotated_b must be >= 1")


@dataclass
class ConversionSection:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    train: ConversionTrainConfig = field(default_factory=ConversionTrainConfig)


@dataclass
class SegmentationSection:
    net_3d: UNetConfig = field(default_factory=unet_3d_default)
    net_2d: UNetConfig = field(default_factory=unet_2d_default)
    train_3d: SegTrainConfig = field(default_factory=SegTrainConfig)
    train_2d: SegTrainConfig = field(default_factory=SegTrainConfig)
    # stage-2 (synthetic-only) cross-validation folds; their ensemble makes the pseudo-labels
    stage2_k: int = 5


@dataclass
class ProbeSection:
    net: UNetConfig = field(default_factory=lambda: UNetConfig(dim=2, patch_size=(64, 64), strides=((2, 2),) * 3, base_channels=16))
    train: SegTrainConfig = field(default_factory=lambda: SegTrainConfig(epochs=10, iterations_per_epoch=30, batch_size=8))


@dataclass
class MetricsSection:
    classes: Tuple[int, ...] = (1, 2)


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    conversion: ConversionSection = field(default_factory=ConversionSection)
    segmentation: SegmentationSection = field(default_factory=SegmentationSection)
    self_training: SelfTrainingConfig = field(default_factory=SelfTrainingConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    seed: int = 0
    reproducible: bool = True
    output_root: Optional[str] = None


# ----------------------------------------------------------------- building


def _line_index(text: str) -> Dict[Tuple[str, ...], int]:
    """Map key paths to 1-based source lines."""
    out: Dict[Tuple[str, ...], int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = path + (str(k.value),)
                out[p] = k.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, ())
    return out


def _convert(tp, value, path, lines):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise _err(path, lines, f"expected a mapping, got {type(value).__name__}")
        return _build(tp, value, path, lines)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path, lines)
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise _err(path, lines, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, path, lines) for v in value)
        if args and len(args) != len(value):
            raise _err(path, lines, f"expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, path, lines) for a, v in zip(args, value)) if args else tuple(value)
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            raise _err(path, lines, f"expected a mapping, got {value!r}")
        return {k: (tuple(v) if isinstance(v, list) else v) for k, v in value.items()}
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _err(path, lines, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _err(path, lines, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise _err(path, lines, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        return str(value)
    return value


def _err(path, lines, msg):
    key = ".".join(path) or "<root>"
    line = lines.get(tuple(path))
    where = f" (line {line})" if line else ""
    return ConfigError(f"{key}{where}: {msg}")


def _build(cls, raw: Dict[str, Any], path=(), lines=None):
    lines = lines or {}
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = [k for k in raw if k not in names]
    if unknown:
        raise _err(tuple(path) + (unknown[0],), lines, f"unknown key (allowed: {', '.join(sorted(names))})")
    defaults = cls()
    kwargs = {}
    for name in names:
        if name in raw:
            kwargs[name] = _convert(hints[name], raw[name], tuple(path) + (name,), lines)
        else:
            kwargs[name] = getattr(defaults, name)
    # nested sections override only the keys given: merge onto the default instance
    for name in names:
        if name in raw and dataclasses.is_dataclass(hints.get(name)) and isinstance(raw[name], dict):
            base = asdict(getattr(defaults, name))
            merged = _deep_merge(base, raw[name])
            kwargs[name] = _convert(hints[name], merged, tuple(path) + (name,), lines)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError, PhantomError, ArchitectureError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise _err(tuple(path), lines, str(exc)) from exc


def _deep_merge(base: Dict[str, Any], over: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("table_a", "table_b"):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: Optional[Dict[str, Any]], text: str = "") -> PipelineConfig:
    return _build(PipelineConfig, raw or {}, (), _line_index(text) if text else {})


def load_config(path: Optional[str | Path] = None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: YAML syntax error: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return config_from_dict(raw, text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def desk_config_path() -> Path:
    return Path(str(resources.files("vsuda") / "configs" / "desk.yaml"))


def load_desk_config() -> PipelineConfig:
    return load_config(desk_config_path())


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: PipelineConfig) -> Dict[str, Any]:
    return _plain(asdict(cfg))


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)


def apply_overrides(cfg: PipelineConfig, overrides: Dict[str, Any]) -> PipelineConfig:
    """Apply dotted-key overrides such as {"conversion.train.epochs": 3}."""
    raw = config_to_dict(cfg)
    for key, value in overrides.items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"{key}: unknown key")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"{key}: unknown key")
        node[parts[-1]] = value
    return config_from_dict(raw)
