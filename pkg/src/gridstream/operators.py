"""Per-window query evaluation: range, k-nearest, and stream join.

Every query comes in two variants. The grid-based variant works on
points bucketed by cell and uses the guaranteed/candidate cell split to
skip distance computations; the naive variant distance-checks
everything. Both must produce identical results; only the distance
counts differ, so each operator returns (result, distance_computations).

A neighbor is any point with distance <= r (closed ball); ranked lists
order ties by object id, then event time, then coordinates, which keeps
parallel merges deterministic even when ids repeat within a window.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from itertools import islice
from typing import Any, Callable, Iterable, NamedTuple

from .grid import Grid, LayerKeys
from .streams import SpatialPoint

RankedPoint = tuple[SpatialPoint, float]
Distance = Callable[[float, float, float, float], float]


def euclidean(ax: float, ay: float, bx: float, by: float) -> float:
    return math.hypot(ax - bx, ay - by)


def rank_key(item: RankedPoint) -> tuple:
    p, d = item
    return (d, p.object_id, p.event_time, p.x, p.y)


def range_filter(points: Iterable[SpatialPoint],
                 layers: LayerKeys) -> tuple[list[SpatialPoint], list[SpatialPoint]]:
    """Split points by their cell into guaranteed and candidate buckets;
    points in any other cell are dropped. No distances computed here."""
    guaranteed: list[SpatialPoint] = []
    candidates: list[SpatialPoint] = []
    for p in points:
        if p.cell in layers.candidate:
            candidates.append(p)
        elif p.cell in layers.guaranteed:
            guaranteed.append(p)
    return guaranteed, candidates


def range_refine(guaranteed: Iterable[SpatialPoint],
                 candidates: Iterable[SpatialPoint],
                 qx: float, qy: float, r: float,
                 dist: Distance = euclidean) -> tuple[list[SpatialPoint], int]:
    """Guaranteed points pass through untouched; candidates pay one
    distance check each."""
    out = list(guaranteed)
    dc = 0
    for p in candidates:
        dc += 1
        if dist(p.x, p.y, qx, qy) <= r:
            out.append(p)
    return out, dc


def range_naive(points: Iterable[SpatialPoint], qx: float, qy: float, r: float,
                dist: Distance = euclidean) -> tuple[list[SpatialPoint], int]:
    out = []
    dc = 0
    for p in points:
        dc += 1
        if dist(p.x, p.y, qx, qy) <= r:
            out.append(p)
    return out, dc


def knn_local(points: Iterable[SpatialPoint], qx: float, qy: float,
              r: float, k: int,
              dist: Distance = euclidean) -> tuple[list[RankedPoint], int]:
    """The k nearest neighbors within r among this partition's points.

    Ranking needs distances for every point, guaranteed cells included,
    so all input points are distance-checked; the pruning already
    happened when non-layer cells were discarded. Selection keeps a
    bounded heap of size k rather than sorting the whole partition.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dc = 0

    def scored():
        nonlocal dc
        for p in points:
            dc += 1
            d = dist(p.x, p.y, qx, qy)
            if d <= r:
                yield (p, d)

    best = heapq.nsmallest(k, scored(), key=rank_key)
    return best, dc


def knn_merge(partial_lists: Iterable[list[RankedPoint]], k: int) -> list[RankedPoint]:
    """Merge per-partition sorted lists into the global top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    merged = heapq.merge(*partial_lists, key=rank_key)
    return list(islice(merged, k))


class Replica(NamedTuple):
    """One copy of a query-stream point addressed to a neighborhood cell."""

    cell: int
    guaranteed: bool
    point: SpatialPoint


def join_replicate(q_point: SpatialPoint, grid: Grid, r: float) -> list[Replica]:
    """Copy a query point to every cell that could hold its neighbors.

    Copies to guaranteed cells join without distance checks; copies to
    candidate cells (the point's own cell among them) join by distance.
    """
    coord = (grid.decode_key(q_point.cell) if q_point.cell is not None
             else grid.cell_of(q_point.x, q_point.y))
    keys = grid.layer_keys(grid.layer_sets(coord, r))
    return replicas_for(keys, q_point)


def replicas_for(keys: LayerKeys, q_point: SpatialPoint) -> list[Replica]:
    out = [Replica(cell, True, q_point) for cell in keys.guaranteed]
    out += [Replica(cell, False, q_point) for cell in keys.candidate]
    return out


def join_per_key(s1_points: Iterable[SpatialPoint], s2_replicas: Iterable[Replica],
                 r: float,
                 dist: Distance = euclidean) -> tuple[set[tuple[str, str]], int]:
    """Join one cell's ordinary points against the replicas sent to it.

    Pairs are (ordinary_id, query_id). A pair can only form under one
    cell key (each ordinary point lives in exactly one cell), so no
    cross-key deduplication is needed.
    """
    s1 = list(s1_points)
    pairs: set[tuple[str, str]] = set()
    dc = 0
    for rep in s2_replicas:
        q = rep.point
        if rep.guaranteed:
            for p in s1:
                pairs.add((p.object_id, q.object_id))
        else:
            for p in s1:
                dc += 1
                if dist(p.x, p.y, q.x, q.y) <= r:
                    pairs.add((p.object_id, q.object_id))
    return pairs, dc


def join_naive(s1_points: Iterable[SpatialPoint], s2_points: Iterable[SpatialPoint],
               r: float,
               dist: Distance = euclidean) -> tuple[set[tuple[str, str]], int]:
    s2 = list(s2_points)
    pairs: set[tuple[str, str]] = set()
    dc = 0
    for p in s1_points:
        for q in s2:
            dc += 1
            if dist(p.x, p.y, q.x, q.y) <= r:
                pairs.add((p.object_id, q.object_id))
    return pairs, dc


@dataclass(frozen=True)
class ResultBatch:
    """One window's query output, ready for serialization."""

    window_start: int
    window_end: int
    kind: str
    payload: Any


def canonical_payload(batch: ResultBatch) -> list:
    """Payload in a sorted, JSON-ready form, identical for identical
    result sets no matter how the computation was partitioned."""
    if batch.kind == "range":
        pts = sorted(batch.payload,
                     key=lambda p: (p.object_id, p.event_time, p.x, p.y))
        return [{"id": p.object_id, "x": p.x, "y": p.y, "t": p.event_time}
                for p in pts]
    if batch.kind == "knn":
        return [{"id": p.object_id, "distance": d} for p, d in batch.payload]
    if batch.kind == "join":
        return [list(pair) for pair in sorted(batch.payload)]
    raise ValueError(f"unknown result kind {batch.kind!r}")


def batch_to_json(batch: ResultBatch) -> str:
    return json.dumps({
        "window_start": batch.window_start,
        "window_end": batch.window_end,
        "type": batch.kind,
        "payload": canonical_payload(batch),
    }, separators=(",", ":"))
