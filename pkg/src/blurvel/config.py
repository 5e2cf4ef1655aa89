"""Key/value config files for the synthesis pipeline.

The format is a flat ``key = value`` text file (one pair per line, ``#``
comments allowed). Unknown keys, duplicates, and out-of-range values are
rejected so a config either fully describes a run or fails loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

__all__ = ["ConfigError", "parse_key_values", "SynthConfig"]


class ConfigError(Exception):
    """Unreadable or invalid configuration."""


def parse_key_values(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


@dataclass
class SynthConfig:
    """Resolved synthesis parameters; defaults correspond to the small-motion
    setting (3 key frames with one interpolated frame per gap)."""

    seed: int = 0
    samples: int = 4
    width: int = 64
    height: int = 64
    focal_px: float = 60.0
    exposure_s: float = 1.0 / 30.0
    frame_gap_s: float = 1.0 / 30.0
    key_frames: int = 3
    per_gap: int = 1
    depth_source: str = "procedural"
    depth_file: str = ""
    depth_min: float = 1.0
    depth_max: float = 5.0
    trajectory: str = "random"
    trajectory_file: str = ""
    max_rotation_rad: float = 0.02
    max_translation_m: float = 0.05

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "SynthConfig":
        known = {f.name: f.type for f in fields(cls)}
        values: dict[str, object] = {}
        for key, raw in mapping.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = known[key]
            try:
                if kind == "int":
                    values[key] = int(raw)
                elif kind == "float":
                    values[key] = float(raw)
                else:
                    values[key] = raw
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_mapping(parse_key_values(text))

    def validate(self) -> None:
        if self.samples < 1:
            raise ConfigError(f"samples must be >= 1, got {self.samples}")
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"image size must be at least 8x8, got {self.width}x{self.height}")
        if self.focal_px <= 0.0:
            raise ConfigError(f"focal_px must be positive, got {self.focal_px}")
        if self.exposure_s <= 0.0 or self.frame_gap_s <= 0.0:
            raise ConfigError("exposure_s and frame_gap_s must be positive")
        if self.key_frames < 2:
            raise ConfigError(f"key_frames must be >= 2, got {self.key_frames}")
        if self.per_gap < 0:
            raise ConfigError(f"per_gap must be >= 0, got {self.per_gap}")
        if not (0.0 < self.depth_min <= self.depth_max):
            raise ConfigError(
                f"need 0 < depth_min <= depth_max, got {self.depth_min}..{self.depth_max}"
            )
        if self.depth_source not in ("procedural", "file"):
            raise ConfigError(f"depth_source must be 'procedural' or 'file', got {self.depth_source!r}")
        if self.depth_source == "file" and not self.depth_file:
            raise ConfigError("depth_source = file requires depth_file")
        if self.trajectory not in ("random", "tum"):
            raise ConfigError(f"trajectory must be 'random' or 'tum', got {self.trajectory!r}")
        if self.trajectory == "tum" and not self.trajectory_file:
            raise ConfigError("trajectory = tum requires trajectory_file")
        if self.max_rotation_rad < 0.0 or self.max_translation_m < 0.0:
            raise ConfigError("twist magnitude caps must be >= 0")

    def to_text(self) -> str:
        """Round-trippable text form with every field resolved. Empty string
        fields are omitted (the defaults restore them on parse)."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, str):
                if value:
                    lines.append(f"{f.name} = {value}")
            else:
                lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"
