"""Forward-looking self-distillation across decoder layers.

Queries from every non-final layer are pulled toward the final layer's
queries at the positions the final layer's Hungarian assignment selected
(noisy rows correspond by construction and are all included). A shared
two-layer MLP refines the student before the smooth-L1 alignment, and each
query's term is scaled by the final prediction's 3D IoU with its ground
truth, so knowledge flows preferentially out of the good final queries. The
teacher side is off the tape: distillation never drags the final layer
toward the students.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .geometry import OrientedBox3D, iou3d
from .matching import Assignment
from .numerics import Tensor


@dataclass
class RefinerParams:
    """Two-layer MLP (width D in and out) shared across all student layers."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def refiner_params(store: nm.ParameterStore, width: int,
                   prefix: str = "refiner") -> RefinerParams:
    return RefinerParams(
        w1=store.param(f"{prefix}.1.w", (width, width), scale=0.1),
        b1=store.param(f"{prefix}.1.b", (width,), scale=0.0),
        w2=store.param(f"{prefix}.2.w", (width, width), scale=0.1),
        b2=store.param(f"{prefix}.2.b", (width,), scale=0.0),
    )


def refine(queries: Tensor, params: RefinerParams) -> Tensor:
    return nm.linear(nm.relu(nm.linear(queries, params.w1, params.b1)),
                     params.w2, params.b2)


def iou_weights(decoded_boxes: list[OrientedBox3D], assignment: Assignment,
                gt_boxes: list[OrientedBox3D]) -> np.ndarray:
    """Per matched pair, the 3D IoU of the final prediction with its target.

    ``decoded_boxes`` is indexed by query row; the result aligns with
    ``assignment.pairs``. Disjoint pairs get weight 0 and contribute nothing
    downstream.
    """
    return np.array([iou3d(decoded_boxes[q], gt_boxes[g])
                     for q, g in assignment.pairs])


def forward_looking_distill(layer_group_queries: list[list[Tensor]],
                            row_indices: list[list[int]],
                            row_weights: list[np.ndarray],
                            refiner: RefinerParams,
                            teacher_rows: list[np.ndarray] | None = None) -> Tensor:
    """Sum over non-final layers of the weighted query-alignment loss.

    ``layer_group_queries[i][g]`` is layer i's output queries for group g;
    the last layer is the teacher. ``row_indices[g]`` selects the supervised
    rows (final-matched learnable rows plus all noisy rows) and
    ``row_weights[g]`` their IoU weights. Per layer the loss averages over
    queries within a group and over groups, and the teacher values are
    constants (optionally pinned explicitly via ``teacher_rows`` for replay).
    """
    num_layers = len(layer_group_queries)
    zero = nm.Tensor(0.0)
    if num_layers <= 1:
        return zero
    final = layer_group_queries[-1]
    num_groups = len(final)
    if teacher_rows is None:
        teacher_rows = [final[g].data[row_indices[g]] for g in range(num_groups)]
    total = zero
    for layer in layer_group_queries[:-1]:
        layer_term = zero
        for g in range(num_groups):
            idx = row_indices[g]
            if not idx:
                continue
            student = nm.gather_rows(layer[g], idx)
            refined = refine(student, refiner)
            layer_term = layer_term + nm.weighted_row_smooth_l1(
                refined, nm.Tensor(teacher_rows[g]), row_weights[g])
        total = total + layer_term * (1.0 / num_groups)
    return total
