import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avoidance import (
    BallSpec,
    BudgetExceeded,
    LatticePoint,
    SeparationInfeasible,
    UsageError,
    ball,
    boundary_points,
    boundary_size,
    neighbors,
    origin,
    sample_boundary_point,
    sample_separated_boundary_pair,
    step,
    unit,
)
from avoidance.streams import RandomStream


def brute_classify(coords, center, radius):
    # independent reference: direct definition, no shared code paths
    d2 = sum((a - b) ** 2 for a, b in zip(coords, center))
    if d2 >= radius * radius:
        return "outside"
    for i in range(len(coords)):
        for s in (-1, 1):
            q = list(coords)
            q[i] += s
            q2 = sum((a - b) ** 2 for a, b in zip(q, center))
            if q2 >= radius * radius:
                return "boundary"
    return "interior"


class TestLatticePoint:
    def test_arithmetic(self):
        p = LatticePoint((1, 2, -3, 0))
        q = LatticePoint((0, -1, 1, 4))
        assert (p + q).coords == (1, 1, -2, 4)
        assert (p - q).coords == (1, 3, -4, -4)
        assert p.norm_sq() == 14
        assert p.norm() == pytest.approx(math.sqrt(14))

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            LatticePoint((1, 2)) + LatticePoint((1, 2, 3))

    def test_non_int_rejected(self):
        with pytest.raises(UsageError):
            LatticePoint((1.0, 2.0))

    def test_hashable(self):
        assert len({origin(4), origin(4), unit(4, 0)}) == 2


class TestNeighbors:
    def test_order_is_coordinate_major_minus_first(self):
        ns = neighbors(origin(2))
        assert [n.coords for n in ns] == [(-1, 0), (1, 0), (0, -1), (0, 1)]

    def test_step_matches_neighbor_order(self):
        p = LatticePoint((3, -1, 0, 2))
        for k, n in enumerate(neighbors(p)):
            assert step(p, k) == n

    @given(st.lists(st.integers(-50, 50), min_size=1, max_size=5))
    def test_neighbors_at_unit_distance(self, coords):
        p = LatticePoint(tuple(coords))
        ns = neighbors(p)
        assert len(ns) == 2 * p.d
        assert len(set(ns)) == 2 * p.d
        for n in ns:
            assert (n - p).norm_sq() == 1

    @given(st.lists(st.integers(-20, 20), min_size=1, max_size=4),
           st.integers(0, 7))
    def test_step_is_invertible(self, coords, k):
        p = LatticePoint(tuple(coords))
        k = k % (2 * p.d)
        back = k ^ 1  # flip parity: same axis, opposite sign
        assert step(step(p, k), back) == p


class TestBallMembership:
    def test_strict_at_integer_radius(self):
        b = ball(5.0, d=4)
        assert not b.contains(LatticePoint((5, 0, 0, 0)))
        assert b.contains(LatticePoint((4, 0, 0, 0)))
        assert not b.contains(LatticePoint((3, 4, 0, 0)))  # norm exactly 5

    def test_classification_against_brute_force_d2(self):
        center = (1, -2)
        for radius in (1.0, 2.5, 3.0, 4.7, 6.0):
            b = BallSpec(LatticePoint(center), radius)
            for x in range(-8, 10):
                for y in range(-10, 8):
                    got = b.classify(LatticePoint((x, y)))
                    want = brute_classify((x, y), center, radius)
                    assert got == want, (x, y, radius)

    def test_classification_against_brute_force_d4(self):
        b = ball(3.0, d=4)
        rng = np.random.default_rng(7)
        for _ in range(500):
            p = tuple(int(v) for v in rng.integers(-4, 5, size=4))
            assert b.classify(LatticePoint(p)) == brute_classify(p, (0,) * 4, 3.0)

    def test_boundary_point_near_radius(self):
        b = ball(10.0, d=4)
        assert b.classify(LatticePoint((9, 0, 0, 0))) == "boundary"
        assert b.classify(LatticePoint((0, 0, 0, 0))) == "interior"


class TestBoundaryEnumeration:
    def test_matches_brute_force_d4(self):
        for radius in (2.0, 3.5, 5.0, 8.0):
            b = ball(radius, d=4)
            pts = boundary_points(b)
            lim = int(radius) + 1
            want = set()
            for x1 in range(-lim, lim + 1):
                for x2 in range(-lim, lim + 1):
                    for x3 in range(-lim, lim + 1):
                        for x4 in range(-lim, lim + 1):
                            p = (x1, x2, x3, x4)
                            if brute_classify(p, (0,) * 4, radius) == "boundary":
                                want.add(p)
            got = {tuple(int(v) for v in row) for row in pts}
            assert got == want, radius

    def test_matches_brute_force_d2(self):
        b = ball(6.0, d=2)
        pts = boundary_points(b)
        got = {tuple(int(v) for v in row) for row in pts}
        want = set()
        for x in range(-7, 8):
            for y in range(-7, 8):
                if brute_classify((x, y), (0, 0), 6.0) == "boundary":
                    want.add((x, y))
        assert got == want

    def test_lexicographic_order(self):
        pts = boundary_points(ball(4.0, d=4))
        as_tuples = [tuple(int(v) for v in row) for row in pts]
        assert as_tuples == sorted(as_tuples)

    def test_center_shift(self):
        c = LatticePoint((2, -1, 0, 3))
        pts = boundary_points(BallSpec(c, 3.0))
        base = boundary_points(ball(3.0, d=4))
        assert np.array_equal(pts, base + np.array([2, -1, 0, 3]))

    def test_every_point_classifies_as_boundary(self):
        b = ball(12.0, d=4)
        pts = boundary_points(b)
        assert boundary_size(b) == len(pts)
        sub = pts[:: max(1, len(pts) // 200)]
        for row in sub:
            assert b.classify(LatticePoint(tuple(int(v) for v in row))) == "boundary"

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            boundary_points(ball(500.0, d=4), budget=1000)


class TestBoundarySampling:
    def test_sampled_points_lie_on_boundary(self):
        b = ball(32.0, d=4)
        rng = RandomStream(11).tagged("sample-test")
        for i in range(20):
            p = sample_boundary_point(b, rng.child(i))
            assert b.classify(p) == "boundary"

    def test_uniformity_on_small_boundary(self):
        # radius 3 boundary is small enough to chi-square against uniform
        b = ball(3.0, d=4)
        pts = boundary_points(b)
        index = {tuple(int(v) for v in row): i for i, row in enumerate(pts)}
        counts = np.zeros(len(pts))
        n = 6000
        rng = RandomStream(5).tagged("uniformity")
        for i in range(n):
            p = sample_boundary_point(b, rng.child(i))
            counts[index[p.coords]] += 1
        expected = n / len(pts)
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        dof = len(pts) - 1
        # mean dof, sd sqrt(2 dof); allow 5 sd
        assert chi2 < dof + 5 * math.sqrt(2 * dof)

    def test_determinism(self):
        b = ball(16.0, d=4)
        s = RandomStream(99).tagged("det")
        assert sample_boundary_point(b, s) == sample_boundary_point(b, s)

    def test_separated_pair(self):
        b = ball(32.0, d=4)
        rng = RandomStream(3).tagged("pair")
        sep = 32.0 / math.log2(32.0)
        for i in range(10):
            p, q = sample_separated_boundary_pair(b, sep, rng.child(i))
            assert b.classify(p) == "boundary"
            assert b.classify(q) == "boundary"
            assert (p - q).norm() > sep

    def test_separation_infeasible(self):
        b = ball(8.0, d=4)
        with pytest.raises(SeparationInfeasible):
            sample_separated_boundary_pair(
                b, 100.0, RandomStream(1).tagged("inf"), budget=500
            )

    @settings(deadline=None, max_examples=20)
    @given(st.integers(0, 10 ** 6))
    def test_rejection_always_on_boundary(self, seed):
        b = ball(7.5, d=4)
        p = sample_boundary_point(b, RandomStream(seed))
        assert b.classify(p) == "boundary"
