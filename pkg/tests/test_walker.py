import io
import math
from fractions import Fraction

import numpy as np
import pytest

from avoidance import (
    BudgetExceeded,
    HorizonExceeded,
    LatticePoint,
    ball,
    origin,
    unit,
)
from avoidance.streams import RandomStream
from avoidance.walker import (
    PathSet,
    enumerate_paths,
    load_path_set,
    positions_from_dirs,
    sample_paths,
    walk_fixed_length,
    walk_to_boundary,
)


def unpack_key(key, d):
    # inverse of the internal point packing, for checking traces
    key = int(key)
    return tuple(((key >> (16 * i)) & 0xFFFF) - (1 << 15) for i in range(d))


def python_chop(verts, radius):
    # reference stop rule: first vertex on the inner boundary of B(radius)
    b = ball(radius, d=verts.shape[1])
    for i, row in enumerate(verts):
        cls = b.classify(LatticePoint(tuple(int(c) for c in row)))
        assert cls != "outside"
        if cls == "boundary":
            return i
    return -1


class TestPositions:
    def test_directions_move_one_axis(self):
        dirs = np.array([0, 1, 2, 3, 4, 5, 6, 7], dtype=np.uint8)
        verts = positions_from_dirs(dirs, (0, 0, 0, 0))
        deltas = np.diff(verts, axis=0)
        want = [(-1, 0, 0, 0), (1, 0, 0, 0), (0, -1, 0, 0), (0, 1, 0, 0),
                (0, 0, -1, 0), (0, 0, 1, 0), (0, 0, 0, -1), (0, 0, 0, 1)]
        assert [tuple(r) for r in deltas] == want


class TestExactEnumeration:
    def test_return_probability_two_steps(self):
        # first step is free, the second must undo it: probability 1/8
        ps = enumerate_paths(origin(4), 2)
        assert len(ps) == 64
        back = sum(
            ps.path_weight
            for i in range(len(ps))
            if tuple(ps.endpoints[i]) == (0, 0, 0, 0)
        )
        assert back == Fraction(1, 8)

    def test_total_weight_is_one(self):
        ps = enumerate_paths(origin(4), 3)
        assert ps.total_weight == 1

    def test_endpoint_distribution_matches_convolution_d2(self):
        # independent oracle: integer path-count convolution on Z^2
        T = 4
        size = 2 * T + 1
        counts = np.zeros((size, size), dtype=np.int64)
        counts[T, T] = 1
        for _ in range(T):
            nxt = np.zeros_like(counts)
            nxt[1:, :] += counts[:-1, :]
            nxt[:-1, :] += counts[1:, :]
            nxt[:, 1:] += counts[:, :-1]
            nxt[:, :-1] += counts[:, 1:]
            counts = nxt
        ps = enumerate_paths(origin(2), T)
        got = np.zeros((size, size), dtype=np.int64)
        for i in range(len(ps)):
            x, y = int(ps.endpoints[i, 0]), int(ps.endpoints[i, 1])
            got[x + T, y + T] += 1
        assert np.array_equal(got, counts)
        assert counts.sum() == 4 ** T == len(ps)

    def test_lexicographic_dirs(self):
        ps = enumerate_paths(origin(1), 3)
        words = ["".join(map(str, row)) for row in ps.dirs.tolist()]
        assert words == sorted(words)
        assert words[0] == "000" and words[-1] == "111"

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            enumerate_paths(origin(4), 9)


class TestStopMetadata:
    def test_everything_stops_at_radius_two(self):
        # in B(2) every nonzero point of the ball is boundary, so every
        # path stops after exactly one step
        ps = enumerate_paths(origin(4), 3, stop_radius=2.0)
        assert len(ps) == 512
        assert np.all(ps.stop_indices == 1)
        assert ps.coverage == 1.0
        for i in range(0, 512, 37):
            keys = ps.trace_keys(i)
            assert len(keys) == 2
            pts = {unpack_key(k, 4) for k in keys}
            verts = ps.vertices(i)
            assert pts == {tuple(verts[0]), tuple(verts[1])}
            assert tuple(ps.endpoints[i]) == tuple(verts[1])

    def test_start_on_boundary_stops_immediately(self):
        ps = enumerate_paths(LatticePoint((1, 0, 0, 0)), 2, stop_radius=2.0)
        assert np.all(ps.stop_indices == 0)
        for i in range(0, len(ps), 11):
            assert ps.trace_keys(i).tolist() == [
                k for k in ps.trace_keys(i).tolist()
            ]
            assert len(ps.trace_keys(i)) == 1
            assert tuple(ps.endpoints[i]) == (1, 0, 0, 0)

    def test_sampled_metadata_matches_python_reference(self):
        rng = RandomStream(42).tagged("walker-ref")
        ps = sample_paths(origin(4), 24, 64, rng, stop_radius=4.0)
        for i in range(len(ps)):
            verts = ps.vertices(i)
            stop = python_chop(verts, 4.0)
            assert int(ps.stop_indices[i]) == stop
            chop = verts if stop < 0 else verts[: stop + 1]
            want_trace = {tuple(int(c) for c in row) for row in chop}
            got_trace = {unpack_key(k, 4) for k in ps.trace_keys(i)}
            assert got_trace == want_trace
            want_end = tuple(chop[-1])
            assert tuple(ps.endpoints[i]) == want_end
            keys = ps.trace_keys(i)
            assert np.all(keys[:-1] < keys[1:])  # sorted, distinct

    def test_no_stop_ball_means_no_stops(self):
        ps = sample_paths(origin(4), 10, 8, RandomStream(1).tagged("nostop"))
        assert np.all(ps.stop_indices == -1)
        assert ps.coverage == 0.0


class TestSampling:
    def test_deterministic(self):
        s = RandomStream(7).tagged("duplicate")
        a = sample_paths(origin(4), 16, 32, s)
        b = sample_paths(origin(4), 16, 32, s)
        assert np.array_equal(a.dirs, b.dirs)

    def test_distinct_children_differ(self):
        s = RandomStream(7).tagged("children")
        a = sample_paths(origin(4), 16, 32, s.child(0))
        b = sample_paths(origin(4), 16, 32, s.child(1))
        assert not np.array_equal(a.dirs, b.dirs)

    def test_direction_uniformity(self):
        ps = sample_paths(origin(4), 64, 512, RandomStream(13).tagged("unif"))
        total = ps.dirs.size
        p = 1 / 8
        sd = math.sqrt(total * p * (1 - p))
        counts = np.bincount(ps.dirs.ravel(), minlength=8)
        for c in counts:
            assert abs(c - total * p) < 4 * sd

    def test_weights(self):
        ps = sample_paths(origin(4), 8, 40, RandomStream(2).tagged("w"))
        assert ps.path_weight == Fraction(1, 40)
        sub = ps.subset(np.arange(10))
        assert sub.path_weight == Fraction(1, 40)
        assert sub.total_weight == Fraction(10, 40)

    def test_subset_slices_traces(self):
        ps = sample_paths(origin(4), 12, 30, RandomStream(3).tagged("sub"),
                          stop_radius=3.0)
        idx = np.array([4, 7, 21])
        sub = ps.subset(idx)
        for k, i in enumerate(idx):
            assert np.array_equal(sub.trace_keys(k), ps.trace_keys(int(i)))
            assert np.array_equal(sub.dirs[k], ps.dirs[i])
        mask = np.zeros(30, dtype=bool)
        mask[idx] = True
        sub2 = ps.subset(mask)
        assert np.array_equal(sub2.dirs, sub.dirs)


class TestWalks:
    def test_walk_to_boundary_stops_on_boundary(self):
        b = ball(16.0, d=4)
        for i in range(10):
            w = walk_to_boundary(origin(4), b, RandomStream(21).child(i))
            assert w.stopped
            assert b.classify(w.endpoint()) == "boundary"
            # interior points can never jump outside, and the stop is first
            for t in range(w.stop_index):
                assert b.classify(w.position(t)) == "interior"

    def test_start_on_boundary(self):
        b = ball(2.0, d=4)
        w = walk_to_boundary(unit(4, 0), b, RandomStream(5).tagged("edge"))
        assert w.stop_index == 0
        assert w.endpoint() == unit(4, 0)

    def test_extension_recorded_but_chopped(self):
        b = ball(8.0, d=4)
        w = walk_to_boundary(origin(4), b, RandomStream(9).tagged("ext"),
                             extension=50)
        assert w.n_steps == w.stop_index + 50
        chopped = w.trace()
        full = w.trace(chopped=False)
        assert chopped <= full
        assert tuple(w.vertices[w.stop_index]) in chopped

    def test_deterministic(self):
        b = ball(12.0, d=4)
        s = RandomStream(31).tagged("det-walk")
        w1 = walk_to_boundary(origin(4), b, s)
        w2 = walk_to_boundary(origin(4), b, s)
        assert np.array_equal(w1.vertices, w2.vertices)

    def test_horizon(self):
        b = ball(64.0, d=4)
        with pytest.raises(HorizonExceeded):
            walk_to_boundary(origin(4), b, RandomStream(1).tagged("cap"),
                             step_cap=10)

    def test_fixed_length_stop_detection(self):
        b = ball(4.0, d=4)
        for i in range(20):
            w = walk_fixed_length(origin(4), 40, RandomStream(17).child(i),
                                  stop_ball=b)
            ref = python_chop(w.vertices[: (w.stop_index + 1)
                                         if w.stopped else len(w.vertices)], 4.0)
            if w.stopped:
                assert ref == w.stop_index
                assert b.classify(w.endpoint()) == "boundary"
            else:
                assert all(
                    b.classify(w.position(t)) == "interior"
                    for t in range(w.n_steps + 1)
                )

    def test_off_center_ball(self):
        c = LatticePoint((10, 0, 0, 0))
        b = ball(6.0, center=c)
        w = walk_to_boundary(c, b, RandomStream(8).tagged("offc"))
        assert b.classify(w.endpoint()) == "boundary"


class TestSerialization:
    def test_round_trip(self):
        ps = sample_paths(origin(4), 9, 17, RandomStream(77).tagged("io"),
                          stop_radius=3.0)
        buf = io.StringIO()
        ps.dump(buf)
        buf.seek(0)
        back = load_path_set(buf)
        assert np.array_equal(back.dirs, ps.dirs)
        assert np.array_equal(back.stop_indices, ps.stop_indices)
        assert np.array_equal(back.endpoints, ps.endpoints)
        assert np.array_equal(back.trace_flat, ps.trace_flat)
        assert back.universe_size == ps.universe_size
        assert back.start == ps.start
        assert back.exact == ps.exact

    def test_subset_round_trip_keeps_universe(self):
        ps = enumerate_paths(origin(4), 2, stop_radius=2.0)
        sub = ps.subset(np.arange(0, 64, 3))
        buf = io.StringIO()
        sub.dump(buf)
        buf.seek(0)
        back = load_path_set(buf)
        assert back.universe_size == 64
        assert back.path_weight == Fraction(1, 64)
        assert np.array_equal(back.dirs, sub.dirs)
