"""``key=value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .model import NetConfig
from .synth import SceneSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # dataset
    n_scenes: int = 29
    density_band: str = "0-50"
    speed_band: str = "mixed"
    data_seed: int = 0
    n_folds: int = 3
    n_test: int = -1  # -1: 15/50 of the scenes, rounded
    objects: Tuple[int, int] = (5, 40)
    H: int = 64
    W: int = 64
    n_frames: int = 5
    contrast: float = 0.3
    blob_radius: Tuple[float, float] = (2.0, 3.5)
    background_texture_scale: float = 8.0
    sigma: float = 3.0
    # network
    base_channels: int = 16
    fused_channels: int = 32
    stream_channels: int = 16
    motion_channels: int = 8
    precision: str = "float64"
    fusion: str = "adaptive"
    depth_enhanced: bool = True
    norm: str = "channel"
    head_init_scale: float = 0.1
    # optimisation
    seed: int = 0
    fold: int = 0
    epochs: int = 30
    lr: float = 1e-4
    weight_decay: float = 5e-4
    augment: bool = True
    out: str = "runs"

    def validate(self) -> "RunConfig":
        if self.n_scenes < 0:
            raise ConfigError("n_scenes must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        if not 0 <= self.fold < max(self.n_folds, 1):
            raise ConfigError(f"fold {self.fold} outside 0..{self.n_folds - 1}")
        if self.objects[0] > self.objects[1] or self.objects[0] < 0:
            raise ConfigError(f"objects range {self.objects} is invalid")
        try:
            self.scene_base().validate()
            self.net_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def test_size(self) -> Optional[int]:
        return None if self.n_test < 0 else self.n_test

    def scene_base(self) -> SceneSpec:
        return SceneSpec(
            H=self.H,
            W=self.W,
            n_frames=self.n_frames,
            contrast=self.contrast,
            blob_radius=self.blob_radius,
            background_texture_scale=self.background_texture_scale,
        )

    def net_config(self) -> NetConfig:
        return NetConfig(
            base_channels=self.base_channels,
            fused_channels=self.fused_channels,
            stream_channels=self.stream_channels,
            motion_channels=self.motion_channels,
            precision=self.precision,
            seed=self.seed,
            fusion=self.fusion,
            depth_enhanced=self.depth_enhanced,
            norm=self.norm,
            head_init_scale=self.head_init_scale,
        )

    def with_overrides(self, **kwargs) -> "RunConfig":
        unknown = set(kwargs) - set(FIELD_TYPES)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kwargs).validate()


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is tuple:
            item = type(getattr(RunConfig, key)[0])
            return tuple(item(v) for v in text.split(","))
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Read ``key=value`` lines over ``base``; ``#`` starts a comment, unknown keys are errors."""
    updates = {}
    for lineno, raw in enumerate(text.split("\n"), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _parse_value(key, value)
    return replace(base, **updates).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
