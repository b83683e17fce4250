"""Per-component set-prediction losses shared by detection and denoising.

One group-layer's head outputs are a :class:`PredictionRows` bundle. The
component loss applies sigmoid focal classification over every row (positives
one-hot, the rest background) and L1 / GIoU regression over the positive rows
only. Each component is normalized by the positive count, so magnitudes do
not scale with the number of objects; the weighted sum uses
:class:`LossWeights`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import math
import numpy as np

from . import numerics as nm
from .geometry import GroundTruthObject, box2d_corners
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 2.0
    w_center: float = 5.0
    w_lrtb: float = 5.0
    w_giou: float = 2.0
    w_size: float = 1.0
    w_angle: float = 1.0
    w_depth: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class PredictionRows:
    """Decoded head outputs for one block of query rows.

    class_logits are pre-sigmoid; angle is a raw (sin, cos) pair; lrtb and
    depth are post-activation (nonnegative / positive).
    """

    class_logits: Tensor  # (rows, num_classes)
    centers: Tensor       # (rows, 2)
    lrtb: Tensor          # (rows, 4)
    size3d: Tensor        # (rows, 3)
    angle: Tensor         # (rows, 2)
    depth: Tensor         # (rows, 1)

    @property
    def rows(self) -> int:
        return self.class_logits.data.shape[0]

    def class_probs(self) -> np.ndarray:
        """Detached per-class sigmoid probabilities, for matching/inference."""
        return 1.0 / (1.0 + np.exp(-self.class_logits.data))

    def corner_boxes_array(self) -> np.ndarray:
        """Detached (rows, 4) corner boxes, for matching."""
        c = self.centers.data
        e = self.lrtb.data
        return np.stack([c[:, 0] - e[:, 0], c[:, 1] - e[:, 2],
                         c[:, 0] + e[:, 1], c[:, 1] + e[:, 3]], axis=1)


def focal_loss(logits: Tensor, target_onehot: np.ndarray, alpha: float,
               gamma: float, normalizer: float) -> Tensor:
    """Sigmoid focal loss summed over all entries, divided by ``normalizer``.

    Stable composition: log p = -softplus(-z) and log(1-p) = -softplus(z),
    with the modulating factors written as exp(gamma * log(.)) <= 1.
    """
    t = np.asarray(target_onehot, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise nm.ShapeError(f"focal_loss: targets {t.shape} vs logits {logits.data.shape}")
    if logits.data.size == 0:
        return nm.sum_all(logits * 0.0)
    log_p = -nm.softplus(-logits)
    log_1mp = -nm.softplus(logits)
    pos = nm.exp(log_1mp * gamma) * log_p
    neg = nm.exp(log_p * gamma) * log_1mp
    weighted = pos * nm.Tensor(alpha * t) + neg * nm.Tensor((1.0 - alpha) * (1.0 - t))
    return nm.sum_all(weighted) * (-1.0 / normalizer)


def giou2d_pairs(pred_corners: Tensor, target_corners: np.ndarray) -> Tensor:
    """Differentiable GIoU of (m, 4) predicted vs constant target corner boxes.

    Target boxes must be non-degenerate; their positive areas bound union and
    hull away from zero, keeping the divisions safe.
    """
    tc = np.asarray(target_corners, dtype=np.float64)
    if pred_corners.data.shape != tc.shape:
        raise nm.ShapeError(f"giou2d_pairs: {pred_corners.data.shape} vs {tc.shape}")

    def col(t: Tensor, j: int) -> Tensor:
        return nm.narrow_cols(t, j, 1)

    ax0, ay0, ax1, ay1 = (col(pred_corners, j) for j in range(4))
    bx0, by0, bx1, by1 = (nm.Tensor(tc[:, j:j + 1]) for j in range(4))
    inter_w = nm.relu(nm.minimum(ax1, bx1) - nm.maximum(ax0, bx0))
    inter_h = nm.relu(nm.minimum(ay1, by1) - nm.maximum(ay0, by0))
    inter = inter_w * inter_h
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = nm.Tensor((tc[:, 2] - tc[:, 0])[:, None] * (tc[:, 3] - tc[:, 1])[:, None])
    union = area_a + area_b - inter
    hull = (nm.maximum(ax1, bx1) - nm.minimum(ax0, bx0)) \
        * (nm.maximum(ay1, by1) - nm.minimum(ay0, by0))
    return nm.divide(inter, union) - nm.divide(hull - union, hull)


def corner_boxes(centers: Tensor, lrtb: Tensor) -> Tensor:
    """Differentiable (rows, 4) corner boxes from centers and edge distances."""
    cx = nm.narrow_cols(centers, 0, 1)
    cy = nm.narrow_cols(centers, 1, 1)
    l = nm.narrow_cols(lrtb, 0, 1)
    r = nm.narrow_cols(lrtb, 1, 1)
    t = nm.narrow_cols(lrtb, 2, 1)
    b = nm.narrow_cols(lrtb, 3, 1)
    return nm.concat_cols([cx - l, cy - t, cx + r, cy + b])


def _l1_rows(pred: Tensor, target: np.ndarray, norm: float) -> Tensor:
    return nm.sum_all(nm.absolute(pred - nm.Tensor(target))) * (1.0 / norm)


def component_loss(pred: PredictionRows, positive_rows: Sequence[int],
                   targets: Sequence[GroundTruthObject],
                   weights: LossWeights) -> Tensor:
    """Weighted sum of the six component losses for one block of rows.

    ``positive_rows[i]`` is supervised toward ``targets[i]``; every other row
    is classification background. With no positives only the background focal
    term remains.
    """
    if len(positive_rows) != len(targets):
        raise ValueError(f"{len(positive_rows)} positive rows vs {len(targets)} targets")
    rows = pred.rows
    num_classes = pred.class_logits.data.shape[1]
    m = len(targets)
    norm = float(max(1, m))

    onehot = np.zeros((rows, num_classes))
    for row, gt in zip(positive_rows, targets):
        onehot[row, gt.c] = 1.0
    total = weights.w_cls * focal_loss(pred.class_logits, onehot,
                                       weights.focal_alpha, weights.focal_gamma, norm)
    if m == 0:
        return total

    idx = list(positive_rows)
    centers = nm.gather_rows(pred.centers, idx)
    lrtb = nm.gather_rows(pred.lrtb, idx)
    size3d = nm.gather_rows(pred.size3d, idx)
    angle = nm.gather_rows(pred.angle, idx)
    depth = nm.gather_rows(pred.depth, idx)

    t_center = np.array([[gt.x_c, gt.y_c] for gt in targets])
    t_lrtb = np.array([[gt.l, gt.r, gt.t, gt.b] for gt in targets])
    t_size = np.array([[gt.l3d, gt.w3d, gt.h3d] for gt in targets])
    t_angle = np.array([[math.sin(gt.theta), math.cos(gt.theta)] for gt in targets])
    t_depth = np.array([[gt.d] for gt in targets])
    t_corners = np.array([box2d_corners(gt.anchor()) for gt in targets])

    giou = giou2d_pairs(corner_boxes(centers, lrtb), t_corners)
    giou_term = (nm.sum_all(giou) * (-1.0 / norm)) + 1.0

    total = total \
        + weights.w_center * _l1_rows(centers, t_center, norm) \
        + weights.w_lrtb * _l1_rows(lrtb, t_lrtb, norm) \
        + weights.w_giou * giou_term \
        + weights.w_size * _l1_rows(size3d, t_size, norm) \
        + weights.w_angle * _l1_rows(angle, t_angle, norm) \
        + weights.w_depth * _l1_rows(depth, t_depth, norm)
    return total
