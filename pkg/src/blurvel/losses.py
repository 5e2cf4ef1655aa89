"""Training losses with direction reorientation.

Blur makes the temporal direction of the labels unknowable, so both the flow
loss and the pose loss first pick whichever of the two opposite-direction
label candidates lies closest to the prediction, then penalize against it.
Reductions are per-element means so losses are resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    DepthMap,
    FlowField,
    Pose,
    Twist,
    axis_angle_to_rotation,
    so3_right_jacobian,
)

__all__ = [
    "LossWeights",
    "reorient_flow",
    "l1_loss",
    "pose_loss",
    "pose_loss_twist_gradient",
]


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative balance weights for the flow/depth and rotation/translation
    loss terms."""

    flow: float = 1.0
    depth: float = 1.0
    rotation: float = 1.0
    translation: float = 1.0

    def __post_init__(self):
        for name in ("flow", "depth", "rotation", "translation"):
            value = float(getattr(self, name))
            if not (np.isfinite(value) and value >= 0.0):
                raise ValueError(f"weight {name} must be finite and >= 0, got {value}")
            object.__setattr__(self, name, value)


def reorient_flow(label_fw: FlowField, label_bw: FlowField, pred: FlowField) -> FlowField:
    """Pick the label whose Frobenius inner product with the prediction is
    larger; one global choice for the whole field. Ties (including a zero
    prediction) go to the backward label because the comparison is strict."""
    if label_fw.shape != pred.shape or label_bw.shape != pred.shape:
        raise ValueError("flow fields must share the same grid")
    mask = label_fw.valid & label_bw.valid & pred.valid
    ip_fw = float(np.sum(label_fw.vectors[mask] * pred.vectors[mask]))
    ip_bw = float(np.sum(label_bw.vectors[mask] * pred.vectors[mask]))
    return label_fw if ip_fw > ip_bw else label_bw


def l1_loss(
    pred_flow: FlowField,
    label_fw: FlowField,
    label_bw: FlowField,
    pred_depth: DepthMap,
    label_depth: DepthMap,
    weights: LossWeights,
) -> float:
    """Reoriented L1 flow loss plus L1 depth loss, each averaged per element
    over the jointly valid pixels. A term with zero weight is skipped (its
    inputs may then be empty)."""
    total = 0.0
    if weights.flow > 0.0:
        chosen = reorient_flow(label_fw, label_bw, pred_flow)
        mask = pred_flow.valid & chosen.valid
        if not mask.any():
            raise ValueError("no jointly valid pixels for the flow loss")
        total += weights.flow * float(
            np.mean(np.abs(pred_flow.vectors[mask] - chosen.vectors[mask]))
        )
    if weights.depth > 0.0:
        mask = pred_depth.valid & label_depth.valid
        if not mask.any():
            raise ValueError("no jointly valid pixels for the depth loss")
        total += weights.depth * float(
            np.mean(np.abs(pred_depth.values[mask] - label_depth.values[mask]))
        )
    return total


def _pose_candidates(label: Pose) -> tuple[Pose, Pose]:
    return label, label.inverse()


def _candidate_loss(rotation, translation, candidate: Pose, weights: LossWeights) -> float:
    rot_term = float(np.sum((rotation - candidate.rotation) ** 2))
    trans_term = float(np.sum((translation - candidate.translation) ** 2))
    return weights.rotation * rot_term + weights.translation * trans_term


def pose_loss(rotation, translation, label: Pose, weights: LossWeights) -> float:
    """Reoriented pose MSE: squared Frobenius rotation distance plus squared
    translation distance against whichever of {label, label.inverse()} is
    closer under the same weighted metric."""
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    return min(
        _candidate_loss(rotation, translation, cand, weights)
        for cand in _pose_candidates(label)
    )


def pose_loss_twist_gradient(
    twist: Twist, label: Pose, weights: LossWeights
) -> tuple[float, np.ndarray]:
    """Pose loss evaluated at exp(twist) plus its gradient with respect to
    the twist vector [t, theta].

    The rotation chain runs through the Rodrigues map: with R = exp(hat(w)),
    dR/dw_k = R hat(J_r(w) e_k), so the gradient of the squared Frobenius
    distance contracts the antisymmetric part of (I - R^T R_label) through
    the right Jacobian. Selection is fixed at the closer candidate, so the
    gradient is valid away from the reorientation decision boundary.
    """
    rotation = axis_angle_to_rotation(twist.angular)
    translation = twist.linear
    cand_fw, cand_bw = _pose_candidates(label)
    loss_fw = _candidate_loss(rotation, translation, cand_fw, weights)
    loss_bw = _candidate_loss(rotation, translation, cand_bw, weights)
    candidate, loss = (cand_fw, loss_fw) if loss_fw <= loss_bw else (cand_bw, loss_bw)

    grad_t = 2.0 * weights.translation * (translation - candidate.translation)
    gap = np.eye(3) - rotation.T @ candidate.rotation
    antisym = np.array([
        gap[2, 1] - gap[1, 2],
        gap[0, 2] - gap[2, 0],
        gap[1, 0] - gap[0, 1],
    ])
    grad_w = 2.0 * weights.rotation * (so3_right_jacobian(twist.angular).T @ antisym)
    return loss, np.concatenate([grad_t, grad_w])
