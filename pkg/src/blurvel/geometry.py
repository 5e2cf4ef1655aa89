"""Camera models, rigid-motion types, and the coordinate conventions shared
by every module in this package.

Conventions
-----------
- Camera frame: right-handed, x right, y down, z forward along the optical
  axis. Depths are distances along z, in meters.
- Pixel coordinates are centered at the principal point: the pixel at
  (row, col) maps to (col - cx, row - cy), sampled at the pixel center
  (offset 0.0 from the integer index).
- ``Pose`` is the rigid map ``X_out = R @ X_in + t``. A camera-to-world
  pose maps camera coordinates into world coordinates.
- ``Twist`` is the camera's motion over one exposure, expressed in the
  camera frame at shutter-open: ``angular`` is an axis-angle vector (rad)
  and ``linear`` a translation (m). ``Twist.to_pose()`` is the shutter-close
  camera pose in shutter-open coordinates; the coordinate map that sends
  shutter-open points into the shutter-close frame is its inverse.

All types are immutable after construction (arrays are marked read-only),
so instances are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Intrinsics",
    "Pose",
    "Twist",
    "DepthMap",
    "FlowField",
    "axis_angle_to_rotation",
    "rotation_to_axis_angle",
    "so3_right_jacobian",
    "quaternion_to_rotation",
    "rotation_to_quaternion",
    "hat",
    "centered_coords",
    "centered_grid",
    "interpolate_pose",
]

_ORTHONORMALITY_TOL = 1e-9


def _readonly(values, shape: tuple[int, ...] | None = None, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def hat(v) -> np.ndarray:
    """Skew-symmetric matrix such that hat(v) @ u == cross(v, u)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def axis_angle_to_rotation(theta) -> np.ndarray:
    """Rodrigues map from an axis-angle vector (||theta|| <= pi) to a 3x3
    rotation matrix."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(theta))
    if angle > np.pi + 1e-12:
        raise ValueError(f"axis-angle magnitude {angle} exceeds pi")
    k = hat(theta)
    if angle < 1e-7:
        # second-order series; trailing error ~angle^3 is far below 1e-9
        return np.eye(3) + k + 0.5 * (k @ k)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * k + c * (k @ k)


def rotation_to_axis_angle(rotation) -> np.ndarray:
    """Log map inverse of :func:`axis_angle_to_rotation`; returns a vector
    with magnitude in [0, pi]."""
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"expected 3x3 rotation, got shape {r.shape}")
    cos_angle = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if angle < 1e-7:
        # vee(R - R^T)/2 equals theta to third order near identity
        return 0.5 * skew * (1.0 + angle * angle / 6.0)
    if angle > np.pi - 1e-7:
        # near pi the skew part vanishes; recover the axis from R + I
        b = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(b), 0.0, None))
        major = int(np.argmax(axis))
        if axis[major] > 0.0:
            axis = b[major] / axis[major]
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValueError("cannot recover rotation axis near pi")
        axis = axis / norm
        if skew @ axis < 0.0:
            axis = -axis
        return angle * axis
    return skew * (angle / (2.0 * np.sin(angle)))


def so3_right_jacobian(theta) -> np.ndarray:
    """Right Jacobian of the Rodrigues map: exp(hat(theta + d)) is
    exp(hat(theta)) @ exp(hat(J_r(theta) @ d)) to first order in d."""
    theta = np.asarray(theta, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(theta))
    k = hat(theta)
    if angle < 1e-5:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        - (1.0 - np.cos(angle)) / a2 * k
        + (angle - np.sin(angle)) / (a2 * angle) * (k @ k)
    )


def quaternion_to_rotation(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    """Rotation matrix from a (qx, qy, qz, qw) quaternion; normalizes first."""
    q = np.array([qx, qy, qz, qw], dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    x, y, z, w = q / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quaternion(rotation) -> tuple[float, float, float, float]:
    """(qx, qy, qz, qw) with qw >= 0 from a rotation matrix."""
    r = np.asarray(rotation, dtype=np.float64)
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] >= r[1, 1] and r[0, 0] >= r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        x = 0.25 * s
        w = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 1] + r[1, 0]) / s
        z = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] >= r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        y = 0.25 * s
        w = (r[0, 2] - r[2, 0]) / s
        x = (r[0, 1] + r[1, 0]) / s
        z = (r[1, 2] + r[2, 1]) / s
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        z = 0.25 * s
        w = (r[1, 0] - r[0, 1]) / s
        x = (r[0, 2] + r[2, 0]) / s
        y = (r[1, 2] + r[2, 1]) / s
    if w < 0.0:
        x, y, z, w = -x, -y, -z, -w
    return float(x), float(y), float(z), float(w)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    # solver-facing code uses a single focal length; calibrations whose fx
    # and fy differ by more than this are rejected there
    SINGLE_FOCAL_TOL = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width < 2 or self.height < 2:
            raise ValueError(f"image size must be at least 2x2, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def require_single_focal(self) -> float:
        """The averaged focal length, rejecting strongly anisotropic
        calibrations that the single-f motion-field model cannot represent."""
        spread = abs(self.fx - self.fy) / max(self.fx, self.fy)
        if spread > self.SINGLE_FOCAL_TOL:
            raise ValueError(
                f"fx={self.fx} and fy={self.fy} differ by {spread:.2e} relative; "
                f"the single-focal-length model requires <= {self.SINGLE_FOCAL_TOL}"
            )
        return self.mean_focal

    @classmethod
    def from_file(cls, path) -> "Intrinsics":
        """Parse the one-line text format ``fx fy cx cy width height``."""
        with open(path, "r", encoding="ascii") as fh:
            fields = fh.read().split()
        if len(fields) != 6:
            raise ValueError(f"intrinsics file must hold exactly 6 fields, got {len(fields)}")
        fx, fy, cx, cy = (float(v) for v in fields[:4])
        width, height = int(fields[4]), int(fields[5])
        return cls(fx, fy, cx, cy, width, height)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n")


def centered_coords(intrinsics: Intrinsics, raw: tuple[int, int]) -> tuple[float, float]:
    """Centered pixel coordinates of the raw (x, y) pixel index."""
    x, y = raw
    if not (0 <= x < intrinsics.width and 0 <= y < intrinsics.height):
        raise ValueError(
            f"pixel ({x}, {y}) outside {intrinsics.width}x{intrinsics.height} image"
        )
    return (x - intrinsics.cx, y - intrinsics.cy)


@lru_cache(maxsize=32)
def _centered_grid_cached(intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    px = xs.astype(np.float64) - intrinsics.cx
    py = ys.astype(np.float64) - intrinsics.cy
    px.setflags(write=False)
    py.setflags(write=False)
    return px, py


def centered_grid(intrinsics: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(px, py) arrays of centered coordinates for every pixel, cached per
    camera. Returned arrays are read-only."""
    return _centered_grid_cached(intrinsics)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``X_out = rotation @ X_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _readonly(self.rotation, (3, 3))
        t = _readonly(self.translation, (3,))
        err = np.linalg.norm(r.T @ r - np.eye(3))
        if err > _ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (||R^T R - I|| = {err:.2e})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has negative determinant")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite components")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -(rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """SE(3) interpolation: geodesic on the rotation, linear on the
    translation. alpha=0 gives ``a``, alpha=1 gives ``b``."""
    rel = rotation_to_axis_angle(a.rotation.T @ b.rotation)
    rotation = a.rotation @ axis_angle_to_rotation(alpha * rel)
    translation = (1.0 - alpha) * a.translation + alpha * b.translation
    return Pose(rotation, translation)


@dataclass(frozen=True)
class Twist:
    """Camera motion over one exposure: translation (m) and axis-angle
    rotation (rad), both in the shutter-open camera frame."""

    linear: np.ndarray
    angular: np.ndarray

    def __post_init__(self):
        t = _readonly(self.linear, (3,))
        w = _readonly(self.angular, (3,))
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(w))):
            raise ValueError("twist has non-finite components")
        object.__setattr__(self, "linear", t)
        object.__setattr__(self, "angular", w)

    @classmethod
    def zero(cls) -> "Twist":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, x) -> "Twist":
        x = np.asarray(x, dtype=np.float64).reshape(6)
        return cls(x[:3], x[3:])

    def as_vector(self) -> np.ndarray:
        """[tx, ty, tz, wx, wy, wz] stacking used by the linear solver."""
        return np.concatenate([self.linear, self.angular])

    def scaled(self, factor: float) -> "Twist":
        return Twist(self.linear * factor, self.angular * factor)

    def to_pose(self) -> Pose:
        """Shutter-close camera pose expressed in shutter-open coordinates."""
        return Pose(axis_angle_to_rotation(self.angular), self.linear)

    @classmethod
    def from_pose(cls, pose: Pose) -> "Twist":
        return cls(pose.translation, rotation_to_axis_angle(pose.rotation))

    def inverse(self) -> "Twist":
        """The same motion traversed in the opposite temporal direction."""
        return Twist.from_pose(self.to_pose().inverse())


@dataclass(frozen=True)
class DepthMap:
    """Dense metric depth with an explicit validity mask. Invalid pixels are
    flagged in ``valid``, never encoded as zero or negative depth."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"depth must be 2D, got shape {values.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != values.shape:
            raise ValueError(f"mask shape {valid.shape} != depth shape {values.shape}")
        active = values[valid]
        if active.size and (not np.all(np.isfinite(active)) or np.any(active <= 0.0)):
            raise ValueError("valid depth entries must be finite and > 0")
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_values(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool))

    @classmethod
    def constant(cls, height: int, width: int, depth: float) -> "DepthMap":
        return cls.from_values(np.full((height, width), float(depth)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class FlowField:
    """Dense pixel displacements (px) with a validity mask. Flow points from
    the first virtual frame toward the last (F = p2' - p1)."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 3 or vectors.shape[2] != 2:
            raise ValueError(f"flow must have shape (H, W, 2), got {vectors.shape}")
        valid = np.array(self.valid, dtype=bool)
        if valid.shape != vectors.shape[:2]:
            raise ValueError(f"mask shape {valid.shape} != flow grid {vectors.shape[:2]}")
        active = vectors[valid]
        if active.size and not np.all(np.isfinite(active)):
            raise ValueError("valid flow entries must be finite")
        vectors.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def zero(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.ones((height, width), dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.vectors.shape[:2]
