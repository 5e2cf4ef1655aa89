"""Procedural scenes and trajectories: smooth random depth surfaces, textured
images, and bounded random twists. Shared by the synthesis CLI and the test
oracles; everything is driven by a caller-supplied generator so runs are
reproducible."""

from __future__ import annotations

import numpy as np

from .blur import SRGB, Image
from .geometry import DepthMap, Twist

__all__ = [
    "procedural_depth",
    "procedural_texture",
    "random_twist",
]


def _cosine_field(rng: np.random.Generator, height: int, width: int, waves: int, max_freq: float) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    xn = xs / max(width - 1, 1)
    yn = ys / max(height - 1, 1)
    field = np.zeros((height, width))
    for _ in range(waves):
        freq = rng.uniform(0.5, max_freq, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amplitude = rng.uniform(0.3, 1.0)
        field += amplitude * np.cos(2.0 * np.pi * (freq[0] * xn + freq[1] * yn) + phase)
    return field


def procedural_depth(
    rng: np.random.Generator, height: int, width: int, near: float, far: float
) -> DepthMap:
    """Smooth random depth surface with values spanning [near, far]."""
    if not (0.0 < near <= far):
        raise ValueError(f"need 0 < near <= far, got near={near} far={far}")
    field = _cosine_field(rng, height, width, waves=6, max_freq=3.0)
    span = field.max() - field.min()
    if span < 1e-12:
        return DepthMap.constant(height, width, 0.5 * (near + far))
    normalized = (field - field.min()) / span
    return DepthMap.from_values(near + normalized * (far - near))


def procedural_texture(
    rng: np.random.Generator, height: int, width: int, channels: int = 3
) -> Image:
    """Textured sRGB image: per-channel cosine mixtures with enough gradient
    structure for photometric direction checks."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    data = np.empty((height, width, channels))
    for c in range(channels):
        field = _cosine_field(rng, height, width, waves=10, max_freq=8.0)
        span = field.max() - field.min()
        if span < 1e-12:
            data[:, :, c] = 0.5
        else:
            data[:, :, c] = 0.05 + 0.9 * (field - field.min()) / span
    return Image(data, SRGB)


def random_twist(
    rng: np.random.Generator, max_rotation_rad: float, max_translation_m: float
) -> Twist:
    """Twist with uniformly random directions and magnitudes in
    [0.25, 1.0] times the caps (zero when a cap is zero)."""

    def _draw(cap: float) -> np.ndarray:
        if cap <= 0.0:
            return np.zeros(3)
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        while norm < 1e-12:
            direction = rng.normal(size=3)
            norm = np.linalg.norm(direction)
        return direction / norm * (cap * rng.uniform(0.25, 1.0))

    return Twist(_draw(max_translation_m), _draw(max_rotation_rad))
