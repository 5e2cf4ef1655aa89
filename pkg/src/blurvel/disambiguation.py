"""Resolve the 180-degree direction ambiguity of blur-derived motion.

Blur erases temporal order, so the solved twist is known only up to sign.
The exposure flow is linearly extrapolated to the neighbor-frame time gap,
the current frame is warped both ways, and the direction with the smaller
summed photometric error against the real neighbors wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blur import Image, bilinear_sample, luma
from .geometry import FlowField, Twist

__all__ = [
    "extrapolate_flow",
    "warp_image",
    "photometric_error",
    "DisambiguationResult",
    "disambiguate",
]

FORWARD = "forward"
BACKWARD = "backward"


def extrapolate_flow(flow: FlowField, exposure_s: float, frame_gap_s: float) -> FlowField:
    """Scale the exposure flow to the frame time gap: F' = (gap / exposure) F."""
    if not float(exposure_s) > 0.0:
        raise ValueError(f"exposure time must be positive, got {exposure_s}")
    if not float(frame_gap_s) > 0.0:
        raise ValueError(f"frame gap must be positive, got {frame_gap_s}")
    return FlowField(flow.vectors * (float(frame_gap_s) / float(exposure_s)), flow.valid)


def warp_image(image: Image, flow: FlowField) -> tuple[Image, np.ndarray]:
    """Apply the flow to the image as an inverse (backward) warp.

    Each output pixel q samples the input at q - F(q): the hole-free
    equivalent of pushing pixels forward along F, exact to first order for
    smooth flow. Samples outside the image are edge-clamped and invalid in
    the returned mask, as are pixels whose flow is invalid.
    """
    height, width = image.shape
    if flow.shape != (height, width):
        raise ValueError(f"flow grid {flow.shape} does not match image {image.shape}")
    ys, xs = np.mgrid[0:height, 0:width]
    sample_x = xs - flow.vectors[..., 0]
    sample_y = ys - flow.vectors[..., 1]
    sampled, inbounds = bilinear_sample(image.data, sample_x, sample_y)
    return Image(sampled, image.color_space), flow.valid & inbounds


def photometric_error(a: Image, b: Image, mask: np.ndarray | None = None) -> float:
    """Mean absolute difference over the masked pixels (all channels)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image {a.shape}")
    if not mask.any():
        raise ValueError("photometric error over an empty mask")
    return float(np.mean(np.abs(a.data[mask] - b.data[mask])))


@dataclass(frozen=True)
class DisambiguationResult:
    twist: Twist
    direction: str
    error_forward: float
    error_backward: float


def disambiguate(
    frame_prev: Image,
    frame_cur: Image,
    frame_next: Image,
    flow_fw: FlowField,
    flow_bw: FlowField,
    exposure_s: float,
    gap_prev_s: float,
    gap_next_s: float,
    twist_fw: Twist,
    twist_bw: Twist,
    *,
    photometric: str = "rgb",
    tie_break: str = FORWARD,
    min_coverage: float = 0.1,
) -> DisambiguationResult:
    """Pick the twist direction with the smaller summed photometric error.

    e_fw warps the current frame forward toward the next frame and backward
    toward the previous one; e_bw swaps the two flows. Each warp is
    extrapolated with its own side's time gap. Ties go to ``tie_break``.
    Raises if any warp leaves less than ``min_coverage`` of the image valid.
    """
    if photometric not in ("rgb", "luma"):
        raise ValueError(f"photometric mode must be 'rgb' or 'luma', got {photometric!r}")
    if tie_break not in (FORWARD, BACKWARD):
        raise ValueError(f"tie_break must be 'forward' or 'backward', got {tie_break!r}")
    if frame_prev.data.shape != frame_cur.data.shape or frame_next.data.shape != frame_cur.data.shape:
        raise ValueError("prev/cur/next frames must share the same shape")
    if photometric == "luma":
        frame_prev, frame_cur, frame_next = luma(frame_prev), luma(frame_cur), luma(frame_next)

    def warped_error(reference: Image, flow: FlowField, gap_s: float) -> float:
        warped, valid = warp_image(frame_cur, extrapolate_flow(flow, exposure_s, gap_s))
        if valid.mean() < min_coverage:
            raise ValueError(
                f"warp left only {valid.mean():.1%} of pixels valid "
                f"(minimum {min_coverage:.0%})"
            )
        return photometric_error(reference, warped, valid)

    e_fw = warped_error(frame_next, flow_fw, gap_next_s) + warped_error(
        frame_prev, flow_bw, gap_prev_s
    )
    e_bw = warped_error(frame_next, flow_bw, gap_next_s) + warped_error(
        frame_prev, flow_fw, gap_prev_s
    )
    if e_fw < e_bw:
        direction = FORWARD
    elif e_bw < e_fw:
        direction = BACKWARD
    else:
        direction = tie_break
    twist = twist_fw if direction == FORWARD else twist_bw
    return DisambiguationResult(twist, direction, e_fw, e_bw)
