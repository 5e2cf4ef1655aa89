"""Synthetic motion-blur pipeline: sRGB transfer functions, virtual-frame
rendering by depth warping, discretized exposure averaging, and ground-truth
flow/depth/twist labels.

Images are kept in floating point end to end; 8-bit quantization happens only
at PNG I/O, with round-to-nearest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import (
    DepthMap,
    FlowField,
    Intrinsics,
    Pose,
    Twist,
    interpolate_pose,
    rotation_to_axis_angle,
)
from .motion_field import flow_from_reprojection

__all__ = [
    "SRGB",
    "LINEAR",
    "Image",
    "VirtualFrameSet",
    "srgb_decode",
    "srgb_encode",
    "srgb_to_linear",
    "linear_to_srgb",
    "luma",
    "bilinear_sample",
    "composite_blur",
    "render_view",
    "interpolate_virtual_frames",
    "ground_truth_labels",
    "save_image_png",
    "load_image_png",
    "write_sample_manifest",
    "read_sample_manifest",
    "split_on_pose_jumps",
    "SAMPLE_MANIFEST_KEYS",
]

SRGB = "srgb"
LINEAR = "linear"

# per-sample manifest contract consumed by the CLI and external tooling
SAMPLE_MANIFEST_KEYS = (
    "blurred",
    "flow_fw",
    "flow_bw",
    "depth",
    "twist_t",
    "twist_theta",
    "exposure_s",
    "intrinsics",
)


@dataclass(frozen=True)
class Image:
    """(H, W, C) float image with its color-space tag. sRGB images hold
    values in [0, 1]; channels are 1 (gray) or 3 (RGB)."""

    data: np.ndarray
    color_space: str

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image must be (H, W, 1|3), got shape {data.shape}")
        if self.color_space not in (SRGB, LINEAR):
            raise ValueError(f"unknown color space {self.color_space!r}")
        if self.color_space == SRGB and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("sRGB image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def srgb_decode(values):
    """sRGB-encoded -> linear radiance (standard piecewise transfer)."""
    v = np.asarray(values, dtype=np.float64)
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def srgb_encode(values):
    """Linear radiance -> sRGB; output clipped to [0, 1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    encoded = np.where(v <= 0.0031308, 12.92 * v, 1.055 * v ** (1.0 / 2.4) - 0.055)
    return np.clip(encoded, 0.0, 1.0)


def _require_space(image: Image, space: str) -> None:
    if image.color_space != space:
        raise ValueError(f"expected a {space} image, got {image.color_space}")


def srgb_to_linear(image: Image) -> Image:
    _require_space(image, SRGB)
    return Image(srgb_decode(image.data), LINEAR)


def linear_to_srgb(image: Image) -> Image:
    _require_space(image, LINEAR)
    return Image(srgb_encode(image.data), SRGB)


_LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


def luma(image: Image) -> Image:
    """Single-channel luma (Rec. 709 weights) in the image's own space."""
    if image.channels == 1:
        return image
    gray = image.data @ _LUMA_WEIGHTS
    return Image(gray[:, :, None], image.color_space)


def bilinear_sample(data: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample (H, W, C) data at fractional (xs, ys) positions.

    Values are edge-clamped; the returned mask is True where the position lay
    inside [0, W-1] x [0, H-1]. Integer positions reproduce pixel values
    bit-exactly.
    """
    height, width = data.shape[:2]
    inbounds = (xs >= 0.0) & (xs <= width - 1.0) & (ys >= 0.0) & (ys <= height - 1.0)
    xc = np.clip(xs, 0.0, width - 1.0)
    yc = np.clip(ys, 0.0, height - 1.0)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = (xc - x0)[..., None]
    wy = (yc - y0)[..., None]
    top = (1.0 - wx) * data[y0, x0] + wx * data[y0, x1]
    bottom = (1.0 - wx) * data[y1, x0] + wx * data[y1, x1]
    return (1.0 - wy) * top + wy * bottom, inbounds


@dataclass(frozen=True)
class VirtualFrameSet:
    """Ordered virtual frames spanning one exposure, with camera-to-world
    poses and normalized timestamps (first 0, last 1, strictly increasing).
    ``masks`` records which pixels of each rendered frame were actually
    observed (edge-clamped fill elsewhere)."""

    images: tuple[Image, ...]
    poses: tuple[Pose, ...]
    times: np.ndarray
    masks: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        images = tuple(self.images)
        poses = tuple(self.poses)
        times = np.array(self.times, dtype=np.float64)
        if len(images) < 2:
            raise ValueError("a virtual frame set needs at least 2 frames")
        if len(poses) != len(images) or times.shape != (len(images),):
            raise ValueError("images, poses, and times must have equal length")
        if not np.all(np.diff(times) > 0.0):
            raise ValueError("timestamps must be strictly increasing")
        if abs(times[0]) > 1e-9 or abs(times[-1] - 1.0) > 1e-9:
            raise ValueError("normalized timestamps must start at 0 and end at 1")
        shape = images[0].shape
        if any(img.shape != shape for img in images):
            raise ValueError("all frames must share the same dimensions")
        if self.masks is not None:
            masks = tuple(np.asarray(m, dtype=bool) for m in self.masks)
            if len(masks) != len(images) or any(m.shape != shape for m in masks):
                raise ValueError("masks must match the frames")
            object.__setattr__(self, "masks", masks)
        times.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "times", times)

    def __len__(self) -> int:
        return len(self.images)


def composite_blur(frames) -> Image:
    """Discretized blur formation: decode the sRGB frames to linear space,
    average, and re-encode.

    The accumulation order is canonical (sorted by a content digest), so the
    output is bit-identical under any permutation of the frames.
    """
    if isinstance(frames, VirtualFrameSet):
        images = frames.images
    else:
        images = tuple(frames)
    if not images:
        raise ValueError("cannot composite zero frames")
    shape = images[0].data.shape
    for img in images:
        _require_space(img, SRGB)
        if img.data.shape != shape:
            raise ValueError("all frames must share the same dimensions")
    order = sorted(
        range(len(images)), key=lambda i: hashlib.sha256(images[i].data.tobytes()).digest()
    )
    acc = np.zeros(shape)
    for i in order:
        acc += srgb_decode(images[i].data)
    acc /= len(images)
    return Image(srgb_encode(acc), SRGB)


def render_view(
    base_image: Image,
    depth: DepthMap,
    intrinsics: Intrinsics,
    base_pose: Pose,
    target_pose: Pose,
):
    """Render the view from ``target_pose`` of the textured surface defined
    by ``base_image`` + ``depth`` as seen from ``base_pose``.

    Backward warp: each target pixel is mapped through the depth surface into
    the base frame and bilinearly sampled there. Out-of-frame samples are
    edge-clamped and flagged in the returned mask. The base depth stands in
    for the target-frame depth, a small-motion approximation.
    """
    if base_image.shape != depth.shape:
        raise ValueError(f"image {base_image.shape} does not match depth {depth.shape}")
    rel = base_pose.inverse() @ target_pose  # target-frame coords -> base-frame coords
    if np.array_equal(rel.rotation, np.eye(3)) and not rel.translation.any():
        return base_image, np.ones(base_image.shape, dtype=bool)
    flow = flow_from_reprojection(rel, depth, intrinsics)
    from .geometry import centered_grid

    px, py = centered_grid(intrinsics)
    xs = (px + intrinsics.cx) + flow.vectors[..., 0]
    ys = (py + intrinsics.cy) + flow.vectors[..., 1]
    sampled, inbounds = bilinear_sample(base_image.data, xs, ys)
    return Image(sampled, base_image.color_space), flow.valid & inbounds


def interpolate_virtual_frames(
    key_poses,
    depth: DepthMap,
    base_image: Image,
    per_gap: int,
    intrinsics: Intrinsics,
) -> VirtualFrameSet:
    """Virtual frames along the exposure: poses interpolated on SE(3)
    (geodesic rotation, linear translation) with ``per_gap`` frames inserted
    between consecutive key poses, each rendered from ``base_image`` (the
    view at ``key_poses[0]``) by depth-based backward warping."""
    key_poses = list(key_poses)
    if len(key_poses) < 2:
        raise ValueError("need at least 2 key poses")
    if not isinstance(per_gap, (int, np.integer)) or per_gap < 0:
        raise ValueError(f"per_gap must be a nonnegative integer, got {per_gap!r}")
    poses: list[Pose] = []
    for a, b in zip(key_poses[:-1], key_poses[1:]):
        poses.append(a)
        for j in range(1, per_gap + 1):
            poses.append(interpolate_pose(a, b, j / (per_gap + 1)))
    poses.append(key_poses[-1])
    images = []
    masks = []
    for pose in poses:
        img, mask = render_view(base_image, depth, intrinsics, key_poses[0], pose)
        images.append(img)
        masks.append(mask)
    times = np.linspace(0.0, 1.0, len(poses))
    return VirtualFrameSet(tuple(images), tuple(poses), times, tuple(masks))


def ground_truth_labels(
    frames: VirtualFrameSet, depth: DepthMap, intrinsics: Intrinsics
) -> tuple[FlowField, FlowField, DepthMap, Twist]:
    """Reprojection-based labels for one exposure.

    Returns the forward flow (first -> last frame), the backward flow
    (last -> first, computed with the same depth map), the depth label, and
    the exposure twist (the last camera's pose in the first camera's frame,
    as axis-angle + translation).
    """
    motion = frames.poses[0].inverse() @ frames.poses[-1]
    twist = Twist.from_pose(motion)
    flow_fw = flow_from_reprojection(motion.inverse(), depth, intrinsics)
    flow_bw = flow_from_reprojection(motion, depth, intrinsics)
    return flow_fw, flow_bw, depth, twist


def save_image_png(path, image: Image) -> None:
    """8-bit PNG with round-to-nearest quantization; sRGB images only."""
    _require_space(image, SRGB)
    quantized = np.rint(image.data * 255.0).astype(np.uint8)
    if image.channels == 1:
        PILImage.fromarray(quantized[:, :, 0], mode="L").save(path, format="PNG")
    else:
        PILImage.fromarray(quantized, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> Image:
    with PILImage.open(path) as pil:
        if pil.mode == "L":
            arr = np.asarray(pil, dtype=np.float64)[:, :, None]
        else:
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64)
    return Image(arr / 255.0, SRGB)


def write_sample_manifest(path, manifest: dict) -> None:
    missing = [k for k in SAMPLE_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValueError(f"sample manifest missing keys: {missing}")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sample_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    missing = [k for k in SAMPLE_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise ValueError(f"{path}: sample manifest missing keys: {missing}")
    return manifest


def split_on_pose_jumps(
    times,
    poses,
    max_translation_m: float = 0.5,
    max_rotation_deg: float = 30.0,
    max_gap_s: float = 1.0 / 30.0,
) -> list[list[int]]:
    """Split a pose sequence at localization jumps: gaps at fast spacing
    (dt <= max_gap_s) whose relative motion exceeds the thresholds."""
    times = np.asarray(times, dtype=np.float64)
    poses = list(poses)
    if times.shape != (len(poses),):
        raise ValueError("times and poses must have equal length")
    max_rotation_rad = np.deg2rad(max_rotation_deg)
    segments: list[list[int]] = []
    current = [0] if poses else []
    for i in range(len(poses) - 1):
        rel = poses[i].inverse() @ poses[i + 1]
        dt = times[i + 1] - times[i]
        translation = float(np.linalg.norm(rel.translation))
        rotation = float(np.linalg.norm(rotation_to_axis_angle(rel.rotation)))
        jump = dt <= max_gap_s + 1e-12 and (
            translation > max_translation_m or rotation > max_rotation_rad
        )
        if jump:
            segments.append(current)
            current = [i + 1]
        else:
            current.append(i + 1)
    if current:
        segments.append(current)
    return segments
