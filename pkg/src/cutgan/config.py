"""Training configuration, presets, override resolution and run directories.

Precedence, lowest to highest: preset defaults, YAML config file, ``key=value``
overrides. Keys may be given flat (``lambda_x``) or dotted
(``objective.lambda_x``); anything else is rejected by name.
"""

from __future__ import annotations

import json
import logging
import platform
import shutil
import subprocess
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np
import yaml

from . import EMBED_DIM, PATCHES_PER_LAYER, __version__
from .bank import MOMENTUM, QUEUE_CAPACITY
from .errors import ConfigError, InvalidArgument
from .networks import DISCRIMINATOR_VARIANTS, GENERATOR_VARIANTS, DiscriminatorSpec, GeneratorSpec
from .objectives import NEGATIVE_SOURCES, ObjectiveConfig, objective_preset

log = logging.getLogger(__name__)

PRESETS = ("cut", "fastcut", "sincut")


@dataclass
class TrainConfig:
    preset: str = "cut"
    epochs: int = 400
    iterations_per_epoch: Optional[int] = None
    learning_rate: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    checkpoint_interval: int = 5000
    negative_source: str = "internal"
    flip_equivariance: bool = False
    load_size: int = 286
    crop_size: int = 256
    generator: str = "resnet9"
    discriminator: str = "patchgan"
    base_width: int = 64
    n_blocks: Optional[int] = None
    tap_layers: Optional[list] = None
    embed_dim: int = EMBED_DIM
    patches_per_layer: int = PATCHES_PER_LAYER
    queue_capacity: int = QUEUE_CAPACITY
    momentum: float = MOMENTUM
    scale_width_min: int = 384
    scale_width_max: int = 1024
    crops_per_iteration: int = 16
    single_crop_size: int = 128
    tile_size: int = 64
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def validate(self) -> "TrainConfig":
        checks = [
            (self.preset in PRESETS, "preset", f"must be one of {PRESETS}"),
            (self.epochs >= 1, "epochs", "must be >= 1"),
            (self.iterations_per_epoch is None or self.iterations_per_epoch >= 1, "iterations_per_epoch", "must be >= 1"),
            (self.learning_rate > 0, "learning_rate", "must be positive"),
            (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "beta1", "betas must lie in [0, 1)"),
            (self.checkpoint_interval >= 1, "checkpoint_interval", "must be >= 1"),
            (self.negative_source in NEGATIVE_SOURCES, "negative_source", f"must be one of {NEGATIVE_SOURCES}"),
            (self.crop_size <= self.load_size, "crop_size", "cannot exceed load_size"),
            (self.generator in GENERATOR_VARIANTS, "generator", f"must be one of {GENERATOR_VARIANTS}"),
            (self.discriminator in DISCRIMINATOR_VARIANTS, "discriminator", f"must be one of {DISCRIMINATOR_VARIANTS}"),
            (self.base_width >= 1, "base_width", "must be >= 1"),
            (self.patches_per_layer >= 2, "patches_per_layer", "must be >= 2"),
            (self.queue_capacity >= 1, "queue_capacity", "must be >= 1"),
            (0 <= self.momentum <= 1, "momentum", "must lie in [0, 1]"),
            (self.single_crop_size % self.tile_size == 0, "tile_size", "must divide single_crop_size"),
            (0 < self.scale_width_min <= self.scale_width_max, "scale_width_min", "invalid width range"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        try:
            self.objective.validate()
            self.generator_spec()
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def generator_spec(self) -> GeneratorSpec:
        taps = tuple(self.tap_layers) if self.tap_layers else None
        return GeneratorSpec(self.generator, base_width=self.base_width, n_blocks=self.n_blocks, tap_layers=taps)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(self.discriminator, base_width=self.base_width, tile_size=self.tile_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        obj = ObjectiveConfig(**data.pop("objective", {}))
        return cls(objective=obj, **data)


def preset_config(name: str) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; expected one of {PRESETS}")
    cfg = TrainConfig(preset=name, objective=objective_preset(name))
    if name == "fastcut":
        cfg.epochs = 200
        cfg.flip_equivariance = True
    elif name == "sincut":
        cfg = replace(cfg, generator="singleimage", discriminator="tile64", epochs=100,
                      iterations_per_epoch=100, checkpoint_interval=1000)
    return cfg


# ----------------------------------------------------------------- resolution

_TOP_FIELDS = {f.name for f in fields(TrainConfig)} - {"objective"}
_OBJ_FIELDS = ObjectiveConfig.field_names()


def _hint(cls, name: str):
    return typing.get_type_hints(cls)[name]


def _coerce(key: str, value: Any, hint) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if value is None:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        if isinstance(value, bool):
            return value
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif hint is str:
        if isinstance(value, str):
            return value
    elif hint is list or origin is list:
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(f"{key}: invalid value {value!r}")


def _locate(key: str) -> tuple[str, str]:
    """Map a user key to (section, field); section is 'top' or 'objective'."""
    if key.startswith("objective."):
        name = key.split(".", 1)[1]
        if name in _OBJ_FIELDS:
            return "objective", name
    elif key in _TOP_FIELDS:
        return "top", key
    elif key in _OBJ_FIELDS:
        return "objective", key
    raise ConfigError(f"{key}: unknown configuration key")


def _flatten(data: dict) -> Iterable[tuple[str, Any]]:
    for k, v in data.items():
        if k == "objective" and isinstance(v, dict):
            for ok, ov in v.items():
                yield f"objective.{ok}", ov
        else:
            yield k, v


def _apply(cfg: TrainConfig, key: str, value: Any) -> tuple[Any, Any]:
    section, name = _locate(key)
    target = cfg.objective if section == "objective" else cfg
    hint = _hint(type(target), name)
    new = _coerce(key, value, hint)
    old = getattr(target, name)
    setattr(target, name, new)
    return old, new


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"{text}: overrides must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    return key, value


def resolve_config_verbose(preset: str, config_file: str | Path | None = None,
                           overrides: Iterable[str] = ()) -> tuple[TrainConfig, list[dict]]:
    """Resolve a config and report every value that differs from the preset."""
    cfg = preset_config(preset)
    changes: list[dict] = []
    if config_file is not None:
        data = yaml.safe_load(Path(config_file).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{config_file}: config file must be a mapping")
        for key, value in _flatten(data):
            if key == "preset":
                if value != preset:
                    raise ConfigError(f"preset: file declares {value!r} but {preset!r} was requested")
                continue
            old, new = _apply(cfg, key, value)
            if old != new:
                changes.append({"key": key, "source": "file", "previous": old, "value": new})
    for item in overrides:
        key, value = parse_override(item)
        if key == "preset":
            raise ConfigError("preset: choose the preset with --preset, not an override")
        old, new = _apply(cfg, key, value)
        changes.append({"key": key, "source": "override", "previous": old, "value": new})
    cfg.validate()
    for c in changes:
        log.info("config %s: %r -> %r (%s)", c["key"], c["previous"], c["value"], c["source"])
    return cfg, changes


def resolve_config(preset: str, config_file: str | Path | None = None, overrides: Iterable[str] = ()) -> TrainConfig:
    return resolve_config_verbose(preset, config_file, overrides)[0]


def dump_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def derive_seeds(master: int) -> dict[str, int]:
    """Independent seeds for the data, patch-sampler and parameter-init streams."""
    children = np.random.SeedSequence(master).spawn(3)
    return {name: int(c.generate_state(1)[0]) for name, c in zip(("data", "sampler", "init"), children)}


# ------------------------------------------------------------- run directories

@dataclass
class RunLayout:
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def samples(self) -> Path:
        return self.root / "samples"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def config(self) -> Path:
        return self.root / "config.yaml"


def _check_writable(root: Path, min_free_bytes: int = 16 * 2 ** 20) -> None:
    probe = root / ".write-probe"
    try:
        probe.write_bytes(b"ok")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {root} is not writable: {exc}") from exc
    if shutil.disk_usage(root).free < min_free_bytes:
        raise RuntimeError(f"less than {min_free_bytes >> 20} MiB free under {root}")


def run_dir_layout(out_root: str | Path, force: bool = False) -> RunLayout:
    """Create a fresh run directory.

    A non-empty ``out_root`` is an error unless ``force`` is set, in which case
    it is left untouched and the run goes to the first free ``out_root-N``.
    """
    root = Path(out_root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty; pass --force to start a new run beside it")
        n = 1
        while (candidate := root.with_name(f"{root.name}-{n}")).exists() and any(candidate.iterdir()):
            n += 1
        root = candidate
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create {root}: {exc}") from exc
    _check_writable(root)
    layout = RunLayout(root)
    for d in (layout.checkpoints, layout.samples, layout.logs):
        d.mkdir(exist_ok=True)
    layout.metrics.touch()
    return layout


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    config: dict
    seed: int
    dataset: dict
    overrides: list = field(default_factory=list)
    code_version: str = field(default_factory=code_version)
    start_time: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    environment: dict = field(default_factory=lambda: {"python": platform.python_version()})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, default=str))

    @classmethod
    def read(cls, path: str | Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))
