"""Strict, declarative run configuration (JSON on disk).

Every section is a dataclass whose defaults are the published constants.
Loading rejects unknown keys and wrong types, reporting every offending
field by its dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from .dataset import ISBI_ANNOTATORS, ISBI_NUM_LANDMARKS, PreprocessSpec
from .evaluation import SDR_THRESHOLDS
from .loss import LossConfig
from .pipeline import StageConfig
from .unet import UNetConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class UNetSection:
    depth: int = 4
    base_channels: int = 16
    kernel_size: int = 3
    out_channels: int = ISBI_NUM_LANDMARKS + 1


@dataclass
class DataSection:
    num_landmarks: int = ISBI_NUM_LANDMARKS
    # None: take the spacing recorded with the dataset
    pixel_spacing: Optional[float] = None
    annotators: dict[str, str] = field(default_factory=lambda: dict(ISBI_ANNOTATORS))
    train_splits: list[str] = field(default_factory=lambda: ["train"])
    test_splits: list[str] = field(default_factory=lambda: ["test1", "test2"])
    # training target: an annotator name or "average"
    source: str = "average"


@dataclass
class PreprocessSection:
    crop_top: int = 465
    global_scale: float = 0.15
    local_scale: float = 0.5


@dataclass
class GlobalSection:
    distribution_width: float = 40.0
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 4
    unet: UNetSection = field(default_factory=UNetSection)


@dataclass
class LocalSection:
    distribution_width: float = 30.0
    patch_size: int = 100
    inference_patch_size: int = 150
    expand_epsilon: float = 1.8
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 4
    samples_per_epoch: Optional[int] = None
    unet: UNetSection = field(default_factory=UNetSection)


@dataclass
class LossSection:
    alpha_t: float = 0.25
    gamma: float = 2.0
    target_gate: float = 0.01
    bce_weight: float = 0.5
    focal_weight: float = 0.5
    clamp_eps: float = 1e-7
    full_bce: bool = False
    focal_start_epoch: Optional[int] = None


@dataclass
class InferSection:
    mode: str = "full"
    threshold: float = 0.5
    all_channels: bool = False
    dump_heatmaps: bool = False


@dataclass
class EvalSection:
    thresholds: list[float] = field(default_factory=lambda: list(SDR_THRESHOLDS))
    source: str = "average"


@dataclass
class CrossvalSection:
    folds: int = 4
    source: str = "senior"


@dataclass
class SynthSection:
    count: int = 200
    canvas: int = 256
    num_landmarks: int = 5
    test_fraction: float = 0.25


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    global_stage: GlobalSection = field(default_factory=GlobalSection)
    local_stage: LocalSection = field(default_factory=LocalSection)
    loss: LossSection = field(default_factory=LossSection)
    infer: InferSection = field(default_factory=InferSection)
    eval: EvalSection = field(default_factory=EvalSection)
    crossval: CrossvalSection = field(default_factory=CrossvalSection)
    synth: SynthSection = field(default_factory=SynthSection)

    # -- conversion to the module-level configs

    def preprocess_spec(self) -> PreprocessSpec:
        p = self.preprocess
        return PreprocessSpec(p.crop_top, p.global_scale, p.local_scale)

    def global_config(self) -> StageConfig:
        g = self.global_stage
        return StageConfig(self.preprocess.global_scale, g.distribution_width, epochs=g.epochs,
                           learning_rate=g.learning_rate, batch_size=g.batch_size,
                           unet=UNetConfig(**dataclasses.asdict(g.unet)))

    def local_config(self) -> StageConfig:
        s = self.local_stage
        return StageConfig(self.preprocess.local_scale, s.distribution_width, s.patch_size,
                           s.inference_patch_size, s.expand_epsilon, s.epochs, s.learning_rate,
                           s.batch_size, s.samples_per_epoch, UNetConfig(**dataclasses.asdict(s.unet)))

    def loss_config(self) -> LossConfig:
        return LossConfig(**dataclasses.asdict(self.loss))

    def to_dict(self) -> dict:
        return {_key(f.name): _plain(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# JSON keys differ from attribute names only where the name is awkward in Python
_RENAMES = {"global_stage": "global", "local_stage": "local"}


def _key(attr: str) -> str:
    return _RENAMES.get(attr, attr)


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {_key(f.name): _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, list):
        return list(v)
    if isinstance(v, dict):
        return dict(v)
    return v


def _check(value, tp, path: str, problems: list[str]):
    """Coerce ``value`` to annotated type ``tp`` or record a problem."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _check(value, args[0], path, problems)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object, got {type(value).__name__}")
            return tp()
        return _build(tp, value, path, problems)
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            problems.append(f"{path}: expected a list, got {type(value).__name__}")
            return []
        return [_check(v, inner, f"{path}[{i}]", problems) for i, v in enumerate(value)]
    if origin is dict:
        _, inner = typing.get_args(tp)
        if not isinstance(value, dict):
            problems.append(f"{path}: expected an object, got {type(value).__name__}")
            return {}
        return {str(k): _check(v, inner, f"{path}.{k}", problems) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {tp}")


def _build(cls, data: dict, prefix: str, problems: list[str]):
    hints = typing.get_type_hints(cls)
    names = {_key(f.name): f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            problems.append(f"{path}: unknown key (allowed: {', '.join(sorted(names))})")
            continue
        kwargs[names[key]] = _check(value, hints[names[key]], path, problems)
    return cls(**kwargs)


def _validate(cfg: RunConfig, problems: list[str]) -> None:
    checks = [
        ("infer.mode", cfg.infer.mode in ("full", "no-expand", "stage1"), "must be full, no-expand or stage1"),
        ("infer.threshold", 0.0 < cfg.infer.threshold <= 1.0, "must lie in (0, 1]"),
        ("local.expand_epsilon", 1.0 < cfg.local_stage.expand_epsilon < 2.0, "must lie in (1, 2)"),
        ("local.inference_patch_size", cfg.local_stage.inference_patch_size >= cfg.local_stage.patch_size,
         "must be >= local.patch_size"),
        ("crossval.folds", cfg.crossval.folds >= 2, "must be >= 2"),
        ("preprocess.crop_top", cfg.preprocess.crop_top >= 0, "must be >= 0"),
        ("preprocess.global_scale", cfg.preprocess.global_scale > 0, "must be > 0"),
        ("preprocess.local_scale", cfg.preprocess.local_scale > 0, "must be > 0"),
        ("data.pixel_spacing", cfg.data.pixel_spacing is None or cfg.data.pixel_spacing > 0, "must be > 0"),
        ("eval.thresholds", len(cfg.eval.thresholds) > 0, "must not be empty"),
    ]
    for name, sec in (("global", cfg.global_stage), ("local", cfg.local_stage)):
        checks += [
            (f"{name}.unet.out_channels", sec.unet.out_channels == cfg.data.num_landmarks + 1,
             f"must equal data.num_landmarks + 1 = {cfg.data.num_landmarks + 1}"),
            (f"{name}.epochs", sec.epochs >= 0, "must be >= 0"),
            (f"{name}.batch_size", sec.batch_size >= 1, "must be >= 1"),
            (f"{name}.learning_rate", sec.learning_rate > 0, "must be > 0"),
        ]
    problems += [f"{path}: {msg}" for path, ok, msg in checks if not ok]
    if problems:
        return
    # the module-level constructors carry the remaining range checks
    for path, build in (("global", cfg.global_config), ("local", cfg.local_config), ("loss", cfg.loss_config)):
        try:
            build()
        except ValueError as exc:
            problems.append(f"{path}: {exc}")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` into a nested dict; the value is read as JSON when possible."""
    if "=" not in text:
        raise ConfigError([f"--set {text!r}: expected key=value"])
    key, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("cephreg.presets").iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("cephreg.presets") / f"{name}.json"
    if not path.is_file():
        raise ConfigError([f"preset {name!r} not found (available: {', '.join(preset_names())})"])
    return json.loads(path.read_text())


def load_config(path=None, preset: str | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then preset, then file, then ``--set`` overrides."""
    data: dict = {}
    if preset:
        data = _merge(data, load_preset(preset))
    if path:
        try:
            data = _merge(data, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    for o in overrides:
        data = _merge(data, parse_override(o))
    return config_from_dict(data)


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    if not isinstance(data, dict):
        raise ConfigError([f"top level: expected an object, got {type(data).__name__}"])
    cfg = _build(RunConfig, data, "", problems)
    if not problems:
        _validate(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg
