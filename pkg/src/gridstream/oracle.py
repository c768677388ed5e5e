"""Brute-force reference answers for the query operators.

Everything here is written from the problem definitions, not from the
pipeline code: linear scans, a full sort for nearest neighbors, a
Cartesian product for the join, and interval arithmetic for cell
classification. Tests compare pipeline output against these. Speed is a
non-goal; inputs are single window snapshots.
"""

from __future__ import annotations

import math
from typing import Iterable, NamedTuple

from .grid import CellCoord, Grid
from .streams import SpatialPoint


def oracle_range(points: Iterable[SpatialPoint], qx: float, qy: float,
                 r: float) -> set[SpatialPoint]:
    return {p for p in points if math.hypot(p.x - qx, p.y - qy) <= r}


def oracle_knn(points: Iterable[SpatialPoint], qx: float, qy: float,
               r: float, k: int) -> list[tuple[SpatialPoint, float]]:
    """All neighbors within r, fully sorted, truncated to k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    within = []
    for p in points:
        d = math.hypot(p.x - qx, p.y - qy)
        if d <= r:
            within.append((p, d))
    within.sort(key=lambda pd: (pd[1], pd[0].object_id, pd[0].event_time,
                                pd[0].x, pd[0].y))
    return within[:k]


def oracle_join(s1: Iterable[SpatialPoint], s2: Iterable[SpatialPoint],
                r: float) -> set[tuple[str, str]]:
    s2 = list(s2)
    return {(p.object_id, q.object_id)
            for p in s1 for q in s2
            if math.hypot(p.x - q.x, p.y - q.y) <= r}


class OracleLayers(NamedTuple):
    guaranteed: set[CellCoord]
    candidate: set[CellCoord]
    pruned: set[CellCoord]


def _axis_gap(a0: float, a1: float, b0: float, b1: float) -> tuple[float, float]:
    """Min and max of |pa - pb| over pa in [a0,a1], pb in [b0,b1]."""
    lo = max(0.0, b0 - a1, a0 - b1)
    hi = max(b1 - a0, a1 - b0)
    return lo, hi


def oracle_layers(grid: Grid, query_cell: CellCoord, r: float) -> OracleLayers:
    """Classify every grid cell by exact distance bounds to the query cell.

    A cell is guaranteed when even the farthest corner-to-corner distance
    is within r, pruned when even the closest approach exceeds r, and a
    candidate otherwise. The query cell itself is always a candidate.
    """
    ax0, ay0, ax1, ay1 = grid.cell_bounds(query_cell)
    guaranteed: set[CellCoord] = set()
    candidate: set[CellCoord] = set()
    pruned: set[CellCoord] = set()
    for cc in grid.cells():
        if cc == query_cell:
            candidate.add(cc)
            continue
        bx0, by0, bx1, by1 = grid.cell_bounds(cc)
        min_dx, max_dx = _axis_gap(ax0, ax1, bx0, bx1)
        min_dy, max_dy = _axis_gap(ay0, ay1, by0, by1)
        if math.hypot(max_dx, max_dy) <= r:
            guaranteed.add(cc)
        elif math.hypot(min_dx, min_dy) > r:
            pruned.add(cc)
        else:
            candidate.add(cc)
    return OracleLayers(guaranteed, candidate, pruned)
