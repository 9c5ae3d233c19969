"""IoU-based frame-to-frame identity assignment."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .maskcore import BinaryMask, iou_matrix

# Relative slack when comparing totals of the same costs summed in different orders.
_COST_EPS = 1e-9


@dataclass
class Assignment:
    matches: list[tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[i, j] for i, j in self.matches))


def _min_cost(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian(cost) -> Assignment:
    """Optimal one-to-one assignment over a rectangular cost matrix.

    Returns a maximum-cardinality matching (``min(rows, cols)`` pairs) of minimum
    total cost. When several optima exist the lexicographically smallest sorted list
    of ``(row, col)`` pairs is returned, so the result does not depend on solver
    internals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    k = min(n, m)
    if k == 0:
        return Assignment([], list(range(n)), list(range(m)))

    best = _min_cost(cost)
    tol = _COST_EPS * max(1.0, abs(best))
    matches: list[tuple[int, int]] = []
    used_cols: set[int] = set()
    spent = 0.0
    last_row = -1
    while len(matches) < k:
        chosen = None
        for i in range(last_row + 1, n):
            rest_rows = np.arange(i + 1, n)
            for j in range(m):
                if j in used_cols:
                    continue
                rest_cols = np.array([c for c in range(m) if c not in used_cols and c != j], dtype=np.intp)
                need = k - len(matches) - 1
                if min(len(rest_rows), len(rest_cols)) < need:
                    continue
                sub = cost[np.ix_(rest_rows, rest_cols)]
                total = spent + cost[i, j] + (_min_cost(sub) if need else 0.0)
                if total <= best + tol:
                    chosen = (i, j)
                    break
            if chosen is not None:
                break
        if chosen is None:  # pragma: no cover - the optimum always admits a completion
            raise RuntimeError("failed to reconstruct an optimal assignment")
        matches.append(chosen)
        used_cols.add(chosen[1])
        spent += cost[chosen]
        last_row = chosen[0]

    matched_rows = {i for i, _ in matches}
    return Assignment(
        matches=matches,
        unmatched_tracks=[i for i in range(n) if i not in matched_rows],
        unmatched_detections=[j for j in range(m) if j not in used_cols],
    )


def associate(
    prev_masks: Sequence[BinaryMask],
    detections: Sequence[BinaryMask],
    iou_gate: float = 0.1,
) -> tuple[Assignment, np.ndarray]:
    """Match track masks to detection masks on ``1 - IoU`` and drop pairs below ``iou_gate``.

    Returns the gated assignment and the IoU matrix it was built from.
    """
    ious = iou_matrix(prev_masks, detections)
    raw = hungarian(1.0 - ious)
    kept, dropped_t, dropped_d = [], [], []
    for i, j in raw.matches:
        if ious[i, j] >= iou_gate and ious[i, j] > 0.0:
            kept.append((i, j))
        else:
            dropped_t.append(i)
            dropped_d.append(j)
    return (
        Assignment(
            matches=kept,
            unmatched_tracks=sorted(raw.unmatched_tracks + dropped_t),
            unmatched_detections=sorted(raw.unmatched_detections + dropped_d),
        ),
        ious,
    )
