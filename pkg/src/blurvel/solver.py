"""Inverse model: recover the 6DoF exposure twist from dense flow + depth by
linear least squares, with analytic input gradients.

Each valid pixel contributes two rows of the overdetermined system A x = b:

    [-f/d, 0, px/d,  px*py/f, -(px^2+f^2)/f,  py]   -> b = Fx
    [0, -f/d, py/d, (py^2+f^2)/f, -px*py/f,  -px]   -> b = Fy

with x = [tx, ty, tz, wx, wy, wz]. The 6x6 normal equations are accumulated
over fixed-size pixel blocks combined in block order, so the result is
bit-identical for any ``BLURVEL_THREADS`` setting and across runs.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .geometry import DepthMap, FlowField, Intrinsics, Twist

__all__ = [
    "DegenerateGeometryError",
    "LinearSystem",
    "SolverReport",
    "accumulate_system",
    "solve_twist",
    "twist_to_velocity",
    "solution_gradients",
    "DEFAULT_CONDITION_LIMIT",
]

BLOCK = 32768
DEFAULT_CONDITION_LIMIT = 1e12


class DegenerateGeometryError(RuntimeError):
    """The accumulated system cannot be solved: too few pixels, rank
    deficiency, or conditioning beyond the accepted limit."""


@lru_cache(maxsize=32)
def _static_columns(intrinsics: Intrinsics, stride: int):
    """Flattened per-pixel grid quantities that do not depend on the inputs:
    centered coordinates and the three depth-free row entries."""
    from .geometry import centered_grid

    f = intrinsics.mean_focal
    px2, py2 = centered_grid(intrinsics)
    px = np.ascontiguousarray(px2[::stride, ::stride]).ravel()
    py = np.ascontiguousarray(py2[::stride, ::stride]).ravel()
    g_xy = px * py / f
    g_xx = -(px * px + f * f) / f
    g_yy = (py * py + f * f) / f
    shape = px2[::stride, ::stride].shape
    for arr in (px, py, g_xy, g_xx, g_yy):
        arr.setflags(write=False)
    return px, py, g_xy, g_xx, g_yy, shape


@dataclass(frozen=True)
class _PixelStream:
    """Compressed per-pixel inputs retained so the solve can re-stream rows
    (exact residual) and the gradient pass can scatter back to the grid."""

    px: np.ndarray
    py: np.ndarray
    g_xy: np.ndarray
    g_xx: np.ndarray
    g_yy: np.ndarray
    inv_d: np.ndarray
    bx: np.ndarray
    by: np.ndarray
    focal: float
    valid_flat: np.ndarray | None  # indices into the strided grid, None if all valid
    strided_shape: tuple[int, int]
    stride: int
    full_shape: tuple[int, int]


def _gather(flow: FlowField, depth: DepthMap, intrinsics: Intrinsics, stride: int) -> _PixelStream:
    if flow.shape != depth.shape:
        raise ValueError(f"flow grid {flow.shape} does not match depth grid {depth.shape}")
    if flow.shape != intrinsics.shape:
        raise ValueError(f"flow grid {flow.shape} does not match intrinsics {intrinsics.shape}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    stride = int(stride)
    f = intrinsics.require_single_focal()
    px, py, g_xy, g_xx, g_yy, strided_shape = _static_columns(intrinsics, stride)

    d = depth.values[::stride, ::stride]
    valid = (flow.valid & depth.valid)[::stride, ::stride]
    vx = flow.vectors[::stride, ::stride, 0]
    vy = flow.vectors[::stride, ::stride, 1]

    if valid.all():
        inv_d = 1.0 / d.reshape(-1)
        bx = np.ascontiguousarray(vx).reshape(-1)
        by = np.ascontiguousarray(vy).reshape(-1)
        idx = None
    else:
        idx = np.flatnonzero(valid.reshape(-1))
        inv_d = 1.0 / d.reshape(-1)[idx]
        bx = vx.reshape(-1)[idx]
        by = vy.reshape(-1)[idx]
        px = px[idx]
        py = py[idx]
        g_xy = g_xy[idx]
        g_xx = g_xx[idx]
        g_yy = g_yy[idx]
    return _PixelStream(
        px, py, g_xy, g_xx, g_yy, inv_d, bx, by, f, idx, strided_shape, stride, flow.shape
    )


def _build_rows(stream: _PixelStream, sl: slice) -> tuple[np.ndarray, np.ndarray]:
    px = stream.px[sl]
    py = stream.py[sl]
    u = stream.inv_d[sl]
    f = stream.focal
    m = px.size
    a = np.empty((m, 6), order="F")
    b = np.empty((m, 6), order="F")
    np.multiply(u, -f, out=a[:, 0])
    a[:, 1] = 0.0
    np.multiply(px, u, out=a[:, 2])
    a[:, 3] = stream.g_xy[sl]
    a[:, 4] = stream.g_xx[sl]
    a[:, 5] = py
    b[:, 0] = 0.0
    np.multiply(u, -f, out=b[:, 1])
    np.multiply(py, u, out=b[:, 2])
    b[:, 3] = stream.g_yy[sl]
    np.negative(stream.g_xy[sl], out=b[:, 4])
    np.negative(px, out=b[:, 5])
    return a, b


def _block_slices(n: int) -> list[slice]:
    return [slice(s, min(s + BLOCK, n)) for s in range(0, n, BLOCK)]


def _thread_count() -> int:
    raw = os.environ.get("BLURVEL_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"BLURVEL_THREADS must be an integer, got {raw!r}") from None
    return max(threads, 1)


@dataclass(frozen=True)
class LinearSystem:
    """Accumulated normal equations A^T A x = A^T b over contributing pixels.

    ``source`` retains the compressed pixel stream that produced the system,
    letting :func:`solve_twist` recompute the residual by streaming over the
    pixels; ``btb`` supports an algebraic fallback when it is absent.
    """

    ata: np.ndarray
    atb: np.ndarray
    count: int
    btb: float = 0.0
    source: _PixelStream | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ata = np.array(self.ata, dtype=np.float64)
        atb = np.array(self.atb, dtype=np.float64)
        if ata.shape != (6, 6) or atb.shape != (6,):
            raise ValueError("normal equations must be 6x6 and 6")
        if np.abs(ata - ata.T).max() > 1e-12 * max(np.abs(ata).max(), 1.0):
            raise ValueError("accumulated A^T A is not symmetric")
        if self.count < 0:
            raise ValueError("pixel count cannot be negative")
        ata.setflags(write=False)
        atb.setflags(write=False)
        object.__setattr__(self, "ata", ata)
        object.__setattr__(self, "atb", atb)
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "btb", float(self.btb))


def accumulate_system(
    flow: FlowField, depth: DepthMap, intrinsics: Intrinsics, stride: int = 1
) -> LinearSystem:
    """Accumulate the 6x6 normal equations over every valid pixel sampled at
    the given stride. Pixels invalid in either input are skipped."""
    stream = _gather(flow, depth, intrinsics, stride)
    n = stream.px.size
    slices = _block_slices(n)

    def _accumulate_block(sl: slice):
        a, b = _build_rows(stream, sl)
        bx = stream.bx[sl]
        by = stream.by[sl]
        ata = a.T @ a + b.T @ b
        atb = a.T @ bx + b.T @ by
        btb = float(bx @ bx + by @ by)
        return ata, atb, btb

    threads = _thread_count()
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(_accumulate_block, slices))
    else:
        partials = [_accumulate_block(sl) for sl in slices]

    ata = np.zeros((6, 6))
    atb = np.zeros(6)
    btb = 0.0
    for part_ata, part_atb, part_btb in partials:  # fixed block order
        ata += part_ata
        atb += part_atb
        btb += part_btb
    ata = 0.5 * (ata + ata.T)
    return LinearSystem(ata, atb, count=n, btb=btb, source=stream)


def _factor(ata: np.ndarray, count: int, condition_limit: float):
    if count < 3:
        raise DegenerateGeometryError(
            f"{count} contributing pixels give fewer than 6 scalar equations"
        )
    eigenvalues, eigenvectors = np.linalg.eigh(ata)
    if not np.all(np.isfinite(eigenvalues)) or eigenvalues[0] <= 0.0:
        raise DegenerateGeometryError(
            f"normal equations are rank deficient (smallest eigenvalue {eigenvalues[0]:.3e})"
        )
    condition = float(eigenvalues[-1] / eigenvalues[0])
    if condition > condition_limit:
        raise DegenerateGeometryError(
            f"condition number {condition:.3e} exceeds limit {condition_limit:.1e}; "
            "geometry does not constrain the twist"
        )
    return eigenvalues, eigenvectors, condition


def _solve_spd(eigenvalues, eigenvectors, ata, rhs) -> np.ndarray:
    x = eigenvectors @ ((eigenvectors.T @ rhs) / eigenvalues)
    # one step of iterative refinement tightens the factorization error
    r = rhs - ata @ x
    return x + eigenvectors @ ((eigenvectors.T @ r) / eigenvalues)


def _residual_sum_squares(stream: _PixelStream, x: np.ndarray) -> float:
    total = 0.0
    for sl in _block_slices(stream.px.size):
        a, b = _build_rows(stream, sl)
        rx = a @ x
        rx -= stream.bx[sl]
        ry = b @ x
        ry -= stream.by[sl]
        total += float(rx @ rx + ry @ ry)
    return total


@dataclass(frozen=True)
class SolverReport:
    """Solved twist plus diagnostics of the least-squares system."""

    twist: Twist
    condition_number: float
    residual_rms: float
    pixels_used: int

    def to_json_dict(self, exposure_s: float) -> dict:
        omega, v = twist_to_velocity(self.twist, exposure_s)
        return {
            "twist_t": self.twist.linear.tolist(),
            "twist_theta": self.twist.angular.tolist(),
            "omega": omega.tolist(),
            "v": v.tolist(),
            "condition_number": self.condition_number,
            "residual_rms_px": self.residual_rms,
            "pixels_used": self.pixels_used,
            "exposure_s": float(exposure_s),
        }


def solve_twist(
    system: LinearSystem, condition_limit: float = DEFAULT_CONDITION_LIMIT
) -> SolverReport:
    """Least-squares twist from accumulated normal equations.

    Raises :class:`DegenerateGeometryError` when fewer than 3 pixels
    contribute, the system is rank deficient, or its condition number
    exceeds ``condition_limit``. No silent regularization is applied.
    """
    eigenvalues, eigenvectors, condition = _factor(system.ata, system.count, condition_limit)
    x = _solve_spd(eigenvalues, eigenvectors, system.ata, system.atb)
    if system.source is not None:
        ss = _residual_sum_squares(system.source, x)
    else:
        ss = max(float(x @ system.ata @ x - 2.0 * (x @ system.atb) + system.btb), 0.0)
    residual_rms = float(np.sqrt(ss / (2.0 * system.count)))
    twist = Twist(x[:3], x[3:])
    return SolverReport(twist, condition, residual_rms, system.count)


def twist_to_velocity(twist: Twist, exposure_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous (omega rad/s, v m/s) from an exposure twist."""
    exposure_s = float(exposure_s)
    if not exposure_s > 0.0:
        raise ValueError(f"exposure time must be positive, got {exposure_s}")
    return twist.angular / exposure_s, twist.linear / exposure_s


def solution_gradients(
    flow: FlowField,
    depth: DepthMap,
    intrinsics: Intrinsics,
    adjoint,
    stride: int = 1,
    condition_limit: float = DEFAULT_CONDITION_LIMIT,
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian products of the solved twist with respect to the flow
    and depth inputs.

    Given the upstream gradient ``adjoint`` = dL/dx, returns arrays shaped
    like the flow vectors and the depth values holding dL/dF and dL/dd.
    Masked or unsampled pixels contribute nothing and receive zeros.

    The flow VJP is A (A^T A)^{-1} adjoint. The depth VJP differentiates the
    normal equations implicitly: only the three 1/d row entries depend on
    depth, so with w = (A^T A)^{-1} adjoint, residual r = b - A x, and row
    derivatives a' = -(depth part of a)/d,

        dL/dd = (a'_x . w) r_x + (a'_y . w) r_y
              - (a_x . w)(a'_x . x) - (a_y . w)(a'_y . x)
    """
    adjoint = np.asarray(adjoint, dtype=np.float64).reshape(6)
    stream = _gather(flow, depth, intrinsics, stride)
    n = stream.px.size
    ata = np.zeros((6, 6))
    atb = np.zeros(6)
    slices = _block_slices(n)
    for sl in slices:
        a, b = _build_rows(stream, sl)
        ata += a.T @ a + b.T @ b
        atb += a.T @ stream.bx[sl] + b.T @ stream.by[sl]
    ata = 0.5 * (ata + ata.T)

    eigenvalues, eigenvectors, _ = _factor(ata, n, condition_limit)
    x = _solve_spd(eigenvalues, eigenvectors, ata, atb)
    w = _solve_spd(eigenvalues, eigenvectors, ata, adjoint)

    f = stream.focal
    flow_grad_flat = np.zeros((n, 2))
    depth_grad_flat = np.zeros(n)
    for sl in slices:
        a, b = _build_rows(stream, sl)
        gx = a @ w
        gy = b @ w
        flow_grad_flat[sl, 0] = gx
        flow_grad_flat[sl, 1] = gy
        rx = stream.bx[sl] - a @ x
        ry = stream.by[sl] - b @ x
        u2 = stream.inv_d[sl] ** 2
        px = stream.px[sl]
        py = stream.py[sl]
        dax_w = u2 * (f * w[0] - px * w[2])
        day_w = u2 * (f * w[1] - py * w[2])
        dax_x = u2 * (f * x[0] - px * x[2])
        day_x = u2 * (f * x[1] - py * x[2])
        depth_grad_flat[sl] = dax_w * rx + day_w * ry - gx * dax_x - gy * day_x

    sh, sw = stream.strided_shape
    if stream.valid_flat is None:
        flow_strided = flow_grad_flat.reshape(sh, sw, 2)
        depth_strided = depth_grad_flat.reshape(sh, sw)
    else:
        flow_strided = np.zeros((sh * sw, 2))
        depth_strided = np.zeros(sh * sw)
        flow_strided[stream.valid_flat] = flow_grad_flat
        depth_strided[stream.valid_flat] = depth_grad_flat
        flow_strided = flow_strided.reshape(sh, sw, 2)
        depth_strided = depth_strided.reshape(sh, sw)

    flow_grad = np.zeros(stream.full_shape + (2,))
    depth_grad = np.zeros(stream.full_shape)
    s = stream.stride
    flow_grad[::s, ::s] = flow_strided
    depth_grad[::s, ::s] = depth_strided
    return flow_grad, depth_grad
