"""The brute-force references themselves, and their agreement with the
conservative ring formulas."""

import math
import random

import pytest

from gridstream.grid import CellCoord, build_grid
from gridstream.oracle import (oracle_join, oracle_knn, oracle_layers,
                               oracle_range)
from gridstream.streams import SpatialPoint


def _pt(oid, x, y, t=0):
    return SpatialPoint(str(oid), x, y, t)


def test_oracle_range_basics():
    assert oracle_range([], 0.0, 0.0, 5.0) == set()
    here = _pt("here", 2.0, 3.0)
    assert oracle_range([here], 2.0, 3.0, 0.5) == {here}
    pts = [_pt("in", 1.0, 0.0), _pt("edge", 0.0, 5.0), _pt("out", 5.1, 0.0)]
    got = oracle_range(pts, 0.0, 0.0, 5.0)
    assert {p.object_id for p in got} == {"in", "edge"}


def test_oracle_knn_basics():
    pts = [_pt("far", 8.0, 0.0), _pt("near", 1.0, 0.0), _pt("mid", 4.0, 0.0)]
    got = oracle_knn(pts, 0.0, 0.0, 10.0, 2)
    assert [(p.object_id, d) for p, d in got] == [("near", 1.0), ("mid", 4.0)]
    assert len(oracle_knn(pts, 0.0, 0.0, 10.0, 50)) == 3
    with pytest.raises(ValueError):
        oracle_knn(pts, 0.0, 0.0, 10.0, 0)


def test_oracle_knn_tie_break():
    pts = [_pt("z", 0.0, 2.0), _pt("a", 2.0, 0.0), _pt("m", 0.0, -2.0)]
    got = oracle_knn(pts, 0.0, 0.0, 5.0, 3)
    assert [p.object_id for p, _ in got] == ["a", "m", "z"]


def test_oracle_join_basics():
    p, q = _pt("p", 1.0, 1.0), _pt("q", 1.0, 1.0)
    assert oracle_join([p], [q], 0.1) == {("p", "q")}
    far_p = [_pt("p", 0.0, 0.0)]
    far_q = [_pt("q", 100.0, 100.0)]
    assert oracle_join(far_p, far_q, 5.0) == set()
    assert oracle_join([], [q], 5.0) == set()


def test_oracle_layers_single_cell_grid():
    g = build_grid(0.0, 0.0, 1.0, 1.0, 1, 1)
    layers = oracle_layers(g, CellCoord(0, 0), 0.3)
    assert layers.candidate == {CellCoord(0, 0)}
    assert layers.guaranteed == set()
    assert layers.pruned == set()


def test_oracle_layers_huge_radius_prunes_nothing():
    g = build_grid(0.0, 0.0, 90.0, 90.0, 9, 4)
    diagonal = math.hypot(90.0, 90.0)
    layers = oracle_layers(g, CellCoord(4, 4), diagonal + 1)
    assert layers.pruned == set()
    assert len(layers.guaranteed) + len(layers.candidate) == 81


def test_oracle_layers_partition_and_exactness():
    g = build_grid(0.0, 0.0, 90.0, 90.0, 9, 4)
    rng = random.Random(67)
    qc = CellCoord(4, 4)
    layers = oracle_layers(g, qc, 25.0)
    all_cells = set(g.cells())
    assert layers.guaranteed | layers.candidate | layers.pruned == all_cells
    assert not (layers.guaranteed & layers.candidate)
    assert not (layers.guaranteed & layers.pruned)
    qx0, qy0, qx1, qy1 = g.cell_bounds(qc)
    for cell in all_cells:
        x0, y0, x1, y1 = g.cell_bounds(cell)
        for _ in range(30):
            qx, qy = rng.uniform(qx0, qx1), rng.uniform(qy0, qy1)
            px, py = rng.uniform(x0, x1), rng.uniform(y0, y1)
            d = math.hypot(px - qx, py - qy)
            if cell in layers.guaranteed:
                assert d <= 25.0
            elif cell in layers.pruned:
                assert d > 25.0


def test_formula_layers_within_oracle_bounds():
    # the ring formulas are conservative: whatever they mark guaranteed
    # must be exactly-guaranteed, whatever they prune must be
    # exactly-prunable
    rng = random.Random(71)
    for _ in range(40):
        m = rng.choice((4, 9, 15))
        g = build_grid(0.0, 0.0, 100.0, 100.0, m, 8)
        qc = CellCoord(rng.randrange(g.x_cells), rng.randrange(g.y_cells))
        r = rng.uniform(0.3 * g.cell_len, 6 * g.cell_len)
        formula = g.layer_sets(qc, r)
        exact = oracle_layers(g, qc, r)
        assert formula.guaranteed <= exact.guaranteed
        formula_pruned = set(g.cells()) - formula.guaranteed - formula.candidate
        assert formula_pruned <= exact.pruned
