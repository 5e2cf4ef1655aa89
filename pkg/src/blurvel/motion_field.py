"""Forward motion models: the dense flow field induced by a camera twist
(linearized motion field) and the exact reprojection flow used for ground
truth, plus the binary flow/depth file format.

Both models evaluate flow on the first frame's pixel grid using that frame's
depth, and share the flow sign convention F = p2' - p1 (first toward last).
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import DepthMap, FlowField, Intrinsics, Pose, Twist, centered_grid

__all__ = [
    "flow_from_twist",
    "flow_from_reprojection",
    "save_flow",
    "load_flow",
    "save_depth",
    "load_depth",
]

FLOW_MAGIC = b"BVFL"
DEPTH_MAGIC = b"BVDP"


def _check_grid(intrinsics: Intrinsics, depth: DepthMap) -> None:
    if depth.shape != intrinsics.shape:
        raise ValueError(
            f"depth grid {depth.shape} does not match intrinsics {intrinsics.shape}"
        )
    if not depth.valid.any():
        raise ValueError("depth valid mask is empty")


def flow_from_twist(twist: Twist, depth: DepthMap, intrinsics: Intrinsics) -> FlowField:
    """Dense flow predicted by the instantaneous motion-field model.

    Per valid pixel (centered coords px, py, depth d, focal f):

        Fx = (tz*px - tx*f)/d - wy*f + wz*py + wx*px*py/f - wy*px^2/f
        Fy = (tz*py - ty*f)/d + wx*f - wz*px - wy*px*py/f + wx*py^2/f

    The model is exactly linear in the twist. Invalid depth pixels produce
    invalid flow entries.
    """
    f = intrinsics.require_single_focal()
    _check_grid(intrinsics, depth)
    px, py = centered_grid(intrinsics)
    valid = depth.valid
    d = np.where(valid, depth.values, 1.0)
    t = twist.linear
    w = twist.angular
    inv_d = 1.0 / d
    fx = (t[2] * px - t[0] * f) * inv_d - w[1] * f + w[2] * py \
        + w[0] * px * py / f - w[1] * px * px / f
    fy = (t[2] * py - t[1] * f) * inv_d + w[0] * f - w[2] * px \
        - w[1] * px * py / f + w[0] * py * py / f
    vectors = np.stack([fx, fy], axis=-1)
    vectors[~valid] = 0.0
    return FlowField(vectors, valid)


def flow_from_reprojection(pose_rel: Pose, depth: DepthMap, intrinsics: Intrinsics) -> FlowField:
    """Exact flow of the rigid scene under a relative pose.

    ``pose_rel`` maps frame-1 camera coordinates into frame-N camera
    coordinates; each pixel is backprojected with its depth, transformed, and
    reprojected. Pixels whose reprojection lands at or behind the camera
    plane (z <= 0) are marked invalid.
    """
    f = intrinsics.require_single_focal()
    _check_grid(intrinsics, depth)
    px, py = centered_grid(intrinsics)
    valid = depth.valid
    d = np.where(valid, depth.values, 1.0)
    points = np.stack([px * d / f, py * d / f, d], axis=-1)
    moved = points @ pose_rel.rotation.T + pose_rel.translation
    z = moved[..., 2]
    valid_out = valid & (z > 0.0)
    z_safe = np.where(valid_out, z, 1.0)
    fx = f * moved[..., 0] / z_safe - px
    fy = f * moved[..., 1] / z_safe - py
    vectors = np.stack([fx, fy], axis=-1)
    vectors[~valid_out] = 0.0
    return FlowField(vectors, valid_out)


def _write_grid_file(path, magic: bytes, payload: np.ndarray, valid: np.ndarray) -> None:
    height, width = valid.shape
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", width, height))
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(valid, dtype=np.uint8).tobytes())


def _read_grid_file(path, magic: bytes, channels: int) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != magic:
        raise ValueError(f"bad magic {blob[:4]!r} in {path}, expected {magic!r}")
    if len(blob) < 12:
        raise ValueError(f"truncated header in {path}")
    width, height = struct.unpack("<II", blob[4:12])
    n = width * height
    expected = 12 + n * channels * 4 + n
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {width}x{height}, got {len(blob)}")
    payload = np.frombuffer(blob, dtype="<f4", count=n * channels, offset=12)
    payload = payload.astype(np.float64)
    if channels > 1:
        payload = payload.reshape(height, width, channels)
    else:
        payload = payload.reshape(height, width)
    mask = np.frombuffer(blob, dtype=np.uint8, count=n, offset=12 + n * channels * 4)
    return payload, mask.reshape(height, width) > 0


def save_flow(path, flow: FlowField) -> None:
    """Write the little-endian ``BVFL`` flow container (f32 pairs + u8 mask)."""
    _write_grid_file(path, FLOW_MAGIC, flow.vectors, flow.valid)


def load_flow(path) -> FlowField:
    vectors, valid = _read_grid_file(path, FLOW_MAGIC, 2)
    vectors[~valid] = 0.0
    return FlowField(vectors, valid)


def save_depth(path, depth: DepthMap) -> None:
    """Write the little-endian ``BVDP`` depth container (f32 + u8 mask)."""
    _write_grid_file(path, DEPTH_MAGIC, depth.values, depth.valid)


def load_depth(path) -> DepthMap:
    values, valid = _read_grid_file(path, DEPTH_MAGIC, 1)
    values[~valid] = 1.0
    return DepthMap(values, valid)
