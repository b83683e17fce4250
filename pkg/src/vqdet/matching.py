"""Optimal query-to-ground-truth assignment and the DETR-style matching cost.

The solver is the O(n^3) augmenting-path Hungarian algorithm with row/column
potentials, run on the smaller side of a rectangular cost matrix. Rows are
processed in ascending index and column scans break ties toward the lowest
index, so the returned assignment is a deterministic function of the matrix.
Assignments are discrete: no gradient flows through them, only through the
losses later evaluated at the matched pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import GroundTruthObject, box2d_corners, giou2d


@dataclass(frozen=True)
class MatcherWeights:
    w_cls: float = 2.0
    w_center: float = 5.0
    w_giou: float = 2.0


@dataclass
class Assignment:
    """Matched (query index, ground-truth index) pairs and their summed cost."""

    pairs: list[tuple[int, int]]
    total_cost: float

    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    def gt_indices(self) -> list[int]:
        return [g for _, g in self.pairs]


def _solve_rows_le_cols(cost: np.ndarray) -> list[int]:
    """Column matched to each row, for an (n, m) matrix with n <= m."""
    n, m = cost.shape
    INF = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # 1-based row matched to column j, 0 = free
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if match[j] != 0:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of the smaller side of ``cost``.

    An empty matrix yields an empty assignment with cost 0. Costs must be
    finite. Pairs come back sorted by query (row) index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment(pairs=[], total_cost=0.0)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if n <= m:
        row_to_col = _solve_rows_le_cols(cost)
        pairs = [(i, j) for i, j in enumerate(row_to_col) if j >= 0]
    else:
        col_to_row = _solve_rows_le_cols(cost.T.copy())
        pairs = sorted((i, j) for j, i in enumerate(col_to_row) if i >= 0)
    total = float(sum(cost[i, j] for i, j in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def matching_cost(class_probs: np.ndarray, centers: np.ndarray,
                  corner_boxes: np.ndarray, gts: list[GroundTruthObject],
                  weights: MatcherWeights = MatcherWeights()) -> np.ndarray:
    """(num queries, num gts) DETR matching cost from detached predictions.

    cost = w_cls * (1 - p[target class]) + w_center * L1(center)
         + w_giou * (1 - giou2d); all inputs are plain arrays, off the tape.
    """
    nq = class_probs.shape[0]
    cost = np.zeros((nq, len(gts)))
    for j, gt in enumerate(gts):
        cls_term = 1.0 - class_probs[:, gt.c]
        center_term = (np.abs(centers[:, 0] - gt.x_c)
                       + np.abs(centers[:, 1] - gt.y_c))
        gt_box = box2d_corners(gt.anchor())
        giou_term = np.array([1.0 - giou2d(tuple(corner_boxes[i]), gt_box)
                              for i in range(nq)])
        cost[:, j] = (weights.w_cls * cls_term + weights.w_center * center_term
                      + weights.w_giou * giou_term)
    return cost


def groupwise_match(group_features: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
                    gts: list[GroundTruthObject],
                    weights: MatcherWeights = MatcherWeights()) -> list[Assignment]:
    """One independent Hungarian match per group; one-to-many in union.

    Each entry of ``group_features`` is (class_probs, centers, corner_boxes)
    for that group's learnable queries, so every ground truth can collect up
    to G positive queries per step.
    """
    return [hungarian(matching_cost(probs, centers, boxes, gts, weights))
            for probs, centers, boxes in group_features]
