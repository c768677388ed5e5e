"""End-to-end checks for the threaded pipeline runtime.

Every equivalence test compares pipeline output against the brute-force
oracles, so partitioning, chunking and thread scheduling can never be
the reason two implementations agree.
"""

import math
import random

import pytest

from gridstream.geo import haversine_m
from gridstream.grid import build_grid
from gridstream.operators import ResultBatch, batch_to_json
from gridstream.oracle import oracle_join, oracle_knn, oracle_range
from gridstream.runtime import (
    GRID_STAGES,
    NAIVE_STAGES,
    ConfigError,
    JoinQuery,
    KnnQuery,
    PipelineConfig,
    PipelineError,
    RangeQuery,
    RoundRobin,
    route_keyed,
    run_pipeline,
    validate_stages,
)
from gridstream.streams import SpatialPoint
from gridstream.windows import WindowSpec, earliest_start, latest_start

EXTENT = (0.0, 0.0, 90.0, 90.0)
WINDOW = WindowSpec(length=10000, slide=5000)


def make_points(n, seed, extent=EXTENT, t_step=40, prefix="p"):
    """Uniform points with strictly increasing event times."""
    rng = random.Random(seed)
    x0, y0, x1, y1 = extent
    return [
        SpatialPoint(f"{prefix}{i}", rng.uniform(x0, x1), rng.uniform(y0, y1),
                     i * t_step)
        for i in range(n)
    ]


def window_members(pts, window):
    """Expected (start, members) pairs for every window the run fires."""
    times = [p.event_time for p in pts]
    first = earliest_start(min(times), window.length, window.slide)
    last = latest_start(max(times), window.slide)
    out = []
    for s in range(first, last + 1, window.slide):
        out.append((s, [p for p in pts if s <= p.event_time < s + window.length]))
    return out


def expected_json(kind, pts, query, query_pts=None):
    """Canonical JSON lines straight from the oracles, one per window."""
    lines = []
    for s, members in window_members(pts, query.window):
        end = s + query.window.length
        if kind == "range":
            payload = oracle_range(members, query.x, query.y, query.r)
        elif kind == "knn":
            payload = oracle_knn(members, query.x, query.y, query.r, query.k)
        else:
            qs = [q for q in query_pts if s <= q.event_time < end]
            payload = oracle_join(members, qs, query.r)
        lines.append(batch_to_json(ResultBatch(s, end, kind, payload)))
    return "\n".join(lines)


def run_json(sources, stages, query, grid, config=PipelineConfig()):
    batches, metrics = run_pipeline(sources, stages, query, grid, config)
    return "\n".join(batch_to_json(b) for b in batches), metrics


# ---------------------------------------------------------------- routing


def test_route_keyed_single_instance_is_zero():
    rng = random.Random(3)
    for _ in range(200):
        assert route_keyed(rng.randrange(1 << 16), 8, 1) == 0


def test_route_keyed_is_deterministic_per_cell():
    rng = random.Random(4)
    for _ in range(200):
        key = rng.randrange(1 << 16)
        p = rng.choice([2, 3, 8])
        first = route_keyed(key, 8, p)
        assert 0 <= first < p
        assert all(route_keyed(key, 8, p) == first for _ in range(3))


def test_route_keyed_balances_uniform_load():
    grid = build_grid(115.5, 39.6, 117.6, 41.1, m=150, n_bits=16)
    rng = random.Random(11)
    counts = [0] * 8
    for _ in range(100_000):
        x = rng.uniform(115.5, 117.6)
        y = rng.uniform(39.6, 41.1)
        counts[route_keyed(grid.encode_key(grid.cell_of(x, y)), 16, 8)] += 1
    assert max(counts) / min(counts) <= 1.25


def test_round_robin_cycles_evenly():
    rr = RoundRobin(3)
    seen = [rr.next() for _ in range(7)]
    assert seen == [0, 1, 2, 0, 1, 2, 0]


def test_round_robin_per_sender_counters_are_independent():
    a, b = RoundRobin(4), RoundRobin(4)
    assert [a.next(), a.next()] == [0, 1]
    assert b.next() == 0
    assert a.next() == 2


# ------------------------------------------------------------- validation


def test_validate_stages_accepts_both_variants():
    w = WINDOW
    for query in (RangeQuery(10, 10, 5, w), KnnQuery(10, 10, 5, 3, w),
                  JoinQuery(5, w)):
        assert validate_stages(GRID_STAGES[query.kind], query) == "grid"
        assert validate_stages(NAIVE_STAGES[query.kind], query) == "naive"


def test_validate_stages_rejects_everything_else():
    q = RangeQuery(10, 10, 5, WINDOW)
    for stages in ([], ["rebalance", "keyed-by-cell"], ["keyed-by-cell"],
                   GRID_STAGES["knn"], ["shuffle"]):
        with pytest.raises(ConfigError):
            validate_stages(stages, q)


def test_query_validation():
    w = WINDOW
    with pytest.raises(ConfigError):
        RangeQuery(1, 1, 0, w)
    with pytest.raises(ConfigError):
        RangeQuery(1, 1, -2.5, w)
    with pytest.raises(ConfigError):
        KnnQuery(1, 1, 5, 0, w)
    with pytest.raises(ConfigError):
        JoinQuery(5, w, metric="manhattan")
    assert issubclass(ConfigError, ValueError)


def test_run_pipeline_config_errors():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = make_points(10, 0)
    q = RangeQuery(45, 45, 5, WINDOW)
    with pytest.raises(ConfigError):
        run_pipeline([iter(pts), iter(pts)], GRID_STAGES["range"], q, grid)
    with pytest.raises(ConfigError):
        run_pipeline([iter(pts)], GRID_STAGES["join"],
                     JoinQuery(5, WINDOW), grid)
    with pytest.raises(ConfigError):
        run_pipeline([iter(pts)], GRID_STAGES["range"],
                     RangeQuery(120, 45, 5, WINDOW), grid)


# ------------------------------------------------- oracle equivalence


def test_range_pipeline_matches_oracle_for_any_parallelism():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(1500, 21)
    q = RangeQuery(40.0, 50.0, 8.0, WINDOW)
    want = expected_json("range", pts, q)
    dcs = {}
    for variant, stages in (("grid", GRID_STAGES["range"]),
                            ("naive", NAIVE_STAGES["range"])):
        for p in (1, 2, 4):
            got, m = run_json([iter(pts)], stages, q, grid,
                              PipelineConfig(parallelism=p))
            assert got == want, (variant, p)
            dcs.setdefault(variant, set()).add(m.distance_computations)
    assert len(dcs["grid"]) == 1 and len(dcs["naive"]) == 1
    assert dcs["grid"].pop() < dcs["naive"].pop()


def test_knn_pipeline_matches_oracle_for_any_parallelism():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(1500, 22)
    q = KnnQuery(40.0, 50.0, 12.0, 7, WINDOW)
    want = expected_json("knn", pts, q)
    for stages in (GRID_STAGES["knn"], NAIVE_STAGES["knn"]):
        for p in (1, 3, 4):
            got, _ = run_json([iter(pts)], stages, q, grid,
                              PipelineConfig(parallelism=p))
            assert got == want, (stages, p)


def test_join_pipeline_matches_oracle_for_any_parallelism():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(1200, 23)
    qpts = make_points(80, 24, t_step=600, prefix="q")
    q = JoinQuery(4.0, WINDOW)
    want = expected_json("join", pts, q, qpts)
    for stages in (GRID_STAGES["join"], NAIVE_STAGES["join"]):
        for p in (1, 2, 4):
            got, _ = run_json([iter(pts), iter(qpts)], stages, q, grid,
                              PipelineConfig(parallelism=p))
            assert got == want, (stages, p)


def test_naive_distance_count_is_exhaustive():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = make_points(400, 25)
    q = RangeQuery(45.0, 45.0, 10.0, WINDOW)
    _, m = run_pipeline([iter(pts)], NAIVE_STAGES["range"], q, grid,
                        PipelineConfig(parallelism=2))
    want = sum(len(members) for _, members in window_members(pts, WINDOW))
    assert m.distance_computations == want


def test_tiny_queue_and_chunk_do_not_change_results():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(900, 26)
    q = RangeQuery(40.0, 50.0, 8.0, WINDOW)
    want = expected_json("range", pts, q)
    got, _ = run_json([iter(pts)], GRID_STAGES["range"], q, grid,
                      PipelineConfig(parallelism=4, queue_capacity=1,
                                     chunk_size=3))
    assert got == want


def test_refine_parallelism_override_keeps_results():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(900, 27)
    q = RangeQuery(40.0, 50.0, 8.0, WINDOW)
    want = expected_json("range", pts, q)
    got, m = run_json([iter(pts)], GRID_STAGES["range"], q, grid,
                      PipelineConfig(parallelism=2, refine_parallelism=5))
    assert got == want
    assert sum(1 for name in m.instance_tuples if name.startswith("refine-")) == 5


def test_join_spreads_work_across_instances():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(600, 28)
    qpts = make_points(60, 29, t_step=400, prefix="q")
    q = JoinQuery(4.0, WINDOW)
    want = expected_json("join", pts, q, qpts)
    got, m = run_json([iter(pts), iter(qpts)], GRID_STAGES["join"], q, grid,
                      PipelineConfig(parallelism=3))
    assert got == want
    loads = [m.instance_tuples.get(f"join-{i}", 0) for i in range(3)]
    assert all(v > 0 for v in loads)
    assert sum(loads) == m.routed


# ---------------------------------------------------------- bookkeeping


def test_metrics_accounting_for_keyed_range():
    grid = build_grid(*EXTENT, m=30, n_bits=8)
    pts = make_points(800, 30)
    q = RangeQuery(40.0, 50.0, 8.0, WINDOW)
    batches, m = run_pipeline([iter(pts)], GRID_STAGES["range"], q, grid,
                              PipelineConfig(parallelism=4))
    assert m.consumed == 800
    assert m.routed == 800
    assert m.dropped_outside == 0
    assert m.late_dropped == 0
    stage1 = sum(v for name, v in m.instance_tuples.items()
                 if name.startswith("filter-"))
    assert stage1 == m.routed
    assert m.windows_fired == len(batches)
    assert len(batches) == len(window_members(pts, WINDOW))
    assert set(m.summary()) == {"throughput_tps", "distance_computations",
                                "pruned_tuples", "windows_fired"}
    assert ("router", "consumed", 800) in m.counter_rows()
    assert m.throughput_tps > 0


def test_points_outside_extent_are_dropped_and_counted():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    inside = make_points(200, 31)
    outliers = [SpatialPoint(f"o{i}", 95.0 + i, -4.0, 1000 + i)
                for i in range(7)]
    mixed = sorted(inside + outliers, key=lambda p: p.event_time)
    q = RangeQuery(45.0, 45.0, 20.0, WINDOW)
    want = expected_json("range", inside, q)
    got, m = run_json([iter(mixed)], GRID_STAGES["range"], q, grid)
    assert got == want
    assert m.consumed == 207
    assert m.dropped_outside == 7
    assert m.routed == 200


def test_late_records_are_dropped_whole():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = [SpatialPoint("a", 45.0, 45.0, 0),
           SpatialPoint("b", 46.0, 45.0, 20000),
           SpatialPoint("c", 44.0, 45.0, 5000)]
    q = RangeQuery(45.0, 45.0, 20.0, WINDOW)
    survivors = pts[:2]
    want = expected_json("range", survivors, q)
    got, m = run_json([iter(pts)], GRID_STAGES["range"], q, grid,
                      PipelineConfig(parallelism=2, chunk_size=1))
    assert got == want
    assert m.late_dropped == 1
    assert m.routed == 2


def test_lateness_bound_keeps_slow_records():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = [SpatialPoint("a", 45.0, 45.0, 0),
           SpatialPoint("b", 46.0, 45.0, 20000),
           SpatialPoint("c", 44.0, 45.0, 5000)]
    w = WindowSpec(length=10000, slide=5000, lateness=15000)
    q = RangeQuery(45.0, 45.0, 20.0, w)
    want = expected_json("range", pts, q)
    got, m = run_json([iter(pts)], GRID_STAGES["range"], q, grid,
                      PipelineConfig(parallelism=2, chunk_size=1))
    assert got == want
    assert m.late_dropped == 0


def test_pending_windows_stay_bounded():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = make_points(3000, 32, t_step=100)
    w = WindowSpec(length=20000, slide=4000)
    q = RangeQuery(45.0, 45.0, 10.0, w)
    _, m = run_pipeline([iter(pts)], GRID_STAGES["range"], q, grid,
                        PipelineConfig(parallelism=2, chunk_size=1))
    bound = math.ceil(w.length / w.slide) + 1
    assert m.instance_max_pending
    for name, worst in m.instance_max_pending.items():
        assert worst <= bound, (name, worst)


def test_empty_stream_yields_no_windows():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    q = RangeQuery(45.0, 45.0, 5.0, WINDOW)
    batches, m = run_pipeline([iter([])], GRID_STAGES["range"], q, grid)
    assert batches == []
    assert m.windows_fired == 0
    assert m.consumed == 0


def test_single_point_stream():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    p = SpatialPoint("only", 45.0, 45.0, 0)
    q = RangeQuery(45.0, 45.0, 5.0, WINDOW)
    batches, m = run_pipeline([iter([p])], GRID_STAGES["range"], q, grid)
    assert [(b.window_start, b.window_end) for b in batches] == [(0, 10000)]
    assert set(batches[0].payload) == {p}
    assert m.windows_fired == 1


def test_empty_windows_inside_a_gap_still_fire():
    grid = build_grid(*EXTENT, m=9, n_bits=4)
    pts = [SpatialPoint("a", 45.0, 45.0, 1000),
           SpatialPoint("b", 45.5, 45.0, 31000)]
    q = RangeQuery(45.0, 45.0, 20.0, WINDOW)
    batches, _ = run_pipeline([iter(pts)], GRID_STAGES["range"], q, grid,
                              PipelineConfig(parallelism=3))
    starts = [b.window_start for b in batches]
    assert starts == [0, 5000, 10000, 15000, 20000, 25000, 30000]
    empties = [b.window_start for b in batches if not b.payload]
    assert empties == [5000, 10000, 15000, 20000]


def test_failing_source_surfaces_as_pipeline_error():
    grid = build_grid(*EXTENT, m=9, n_bits=4)

    def broken():
        yield SpatialPoint("ok", 45.0, 45.0, 0)
        raise OSError("stream cut")

    q = RangeQuery(45.0, 45.0, 5.0, WINDOW)
    with pytest.raises(PipelineError) as exc:
        run_pipeline([broken()], GRID_STAGES["range"], q, grid,
                     PipelineConfig(parallelism=2))
    assert "stream cut" in str(exc.value)


def test_haversine_range_matches_metric_brute_force():
    grid = build_grid(116.0, 39.0, 117.0, 40.0, m=20, n_bits=8)
    pts = make_points(800, 33, extent=(116.0, 39.0, 117.0, 40.0))
    q = RangeQuery(116.5, 39.5, 3000.0, WINDOW, metric="haversine")
    got, m = run_json([iter(pts)], GRID_STAGES["range"], q, grid,
                      PipelineConfig(parallelism=2))
    lines = []
    for s, members in window_members(pts, WINDOW):
        hit = {p for p in members
               if haversine_m(p.x, p.y, q.x, q.y) <= q.r}
        lines.append(batch_to_json(ResultBatch(s, s + WINDOW.length,
                                               "range", hit)))
    assert got == "\n".join(lines)
    naive, mn = run_json([iter(pts)], NAIVE_STAGES["range"], q, grid)
    assert naive == got
    assert m.distance_computations < mn.distance_computations
