"""Geometry of the integer lattice Z^d.

This module fixes the conventions every other module builds on.

Balls are open Euclidean balls around a lattice point,

    B(c, r) = { x : |x - c| < r },

with membership decided by the exact integer comparison |x - c|^2 < r^2
(the squared norm is an integer, the threshold a float; no point ever sits
within floating-point noise of the wrong side for the radii this package
handles).  The boundary of a ball always means its inner vertex boundary:
the points of the ball with at least one lattice neighbor outside.  A point
p is on the boundary of B(c, r) exactly when

    |p - c|^2 < r^2 <= |p - c|^2 + 2 * max_i |p_i - c_i| + 1,

since the best a single step can do is increase the squared norm by
2 * max|coordinate| + 1.

Neighbor order is fixed once and for all: coordinate-major, minus before
plus, so in Z^4 the neighbors of x are x - e1, x + e1, x - e2, ... x + e4.
Samplers and path enumeration elsewhere index directions 0..2d-1 in exactly
this order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

from .errors import BudgetExceeded, SeparationInfeasible, UsageError
from .streams import RandomStream

Region = Literal["interior", "boundary", "outside"]

_BOUNDARY_CACHE: dict[tuple[int, float], np.ndarray] = {}


@dataclass(frozen=True)
class LatticePoint:
    """A point of Z^d.

    Thin, immutable, hashable.  Hot loops never touch this class; it exists
    for the user-facing API and for small exact computations in tests.
    """

    coords: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.coords) == 0:
            raise UsageError("a lattice point needs at least one coordinate")
        if not all(isinstance(c, int) for c in self.coords):
            raise UsageError("lattice coordinates must be ints")

    @property
    def d(self) -> int:
        return len(self.coords)

    def norm_sq(self) -> int:
        return sum(c * c for c in self.coords)

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def __add__(self, other: "LatticePoint") -> "LatticePoint":
        self._check_dim(other)
        return LatticePoint(tuple(a + b for a, b in zip(self.coords, other.coords)))

    def __sub__(self, other: "LatticePoint") -> "LatticePoint":
        self._check_dim(other)
        return LatticePoint(tuple(a - b for a, b in zip(self.coords, other.coords)))

    def _check_dim(self, other: "LatticePoint") -> None:
        if self.d != other.d:
            raise UsageError(
                f"dimension mismatch: {self.d} versus {other.d}"
            )

    def __iter__(self) -> Iterator[int]:
        return iter(self.coords)


def origin(d: int = 4) -> LatticePoint:
    """The origin of Z^d."""
    if d < 1:
        raise UsageError("dimension must be positive")
    return LatticePoint((0,) * d)


def unit(d: int, axis: int, sign: int = 1) -> LatticePoint:
    """The point sign * e_axis in Z^d (axis counts from 0)."""
    if not 0 <= axis < d:
        raise UsageError(f"axis {axis} out of range for dimension {d}")
    if sign not in (-1, 1):
        raise UsageError("sign must be -1 or +1")
    coords = [0] * d
    coords[axis] = sign
    return LatticePoint(tuple(coords))


def neighbors(p: LatticePoint) -> list[LatticePoint]:
    """The 2d lattice neighbors of p, coordinate-major, minus before plus.

    The k-th entry moves along axis k // 2, in the negative direction when
    k is even and positive when k is odd.  This order is the package-wide
    direction encoding.
    """
    out = []
    for axis in range(p.d):
        for sign in (-1, 1):
            c = list(p.coords)
            c[axis] += sign
            out.append(LatticePoint(tuple(c)))
    return out


def step(p: LatticePoint, direction: int) -> LatticePoint:
    """Neighbor of p in the given direction index (0..2d-1)."""
    if not 0 <= direction < 2 * p.d:
        raise UsageError(f"direction {direction} out of range for d={p.d}")
    axis, parity = divmod(direction, 2)
    sign = 1 if parity == 1 else -1
    c = list(p.coords)
    c[axis] += sign
    return LatticePoint(tuple(c))


@dataclass(frozen=True)
class BallSpec:
    """Open Euclidean ball B(center, radius) on Z^d.

    Membership and boundary tests are exact: the squared distance is computed
    in integers and compared against radius**2 once, as a float.
    """

    center: LatticePoint
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise UsageError("ball radius must be positive")

    @property
    def d(self) -> int:
        return self.center.d

    @property
    def radius_sq(self) -> float:
        return self.radius * self.radius

    def _rel_norm_sq(self, p: LatticePoint) -> int:
        if p.d != self.d:
            raise UsageError(f"dimension mismatch: {p.d} versus {self.d}")
        return sum((a - b) ** 2 for a, b in zip(p.coords, self.center.coords))

    def contains(self, p: LatticePoint) -> bool:
        """Strict membership |p - center| < radius."""
        return self._rel_norm_sq(p) < self.radius_sq

    def classify(self, p: LatticePoint) -> Region:
        """One of "interior", "boundary", "outside".

        Boundary means inner vertex boundary: inside the ball with at least
        one neighbor outside.
        """
        ns = self._rel_norm_sq(p)
        r2 = self.radius_sq
        if ns >= r2:
            return "outside"
        mx = max(abs(a - b) for a, b in zip(p.coords, self.center.coords))
        if ns + 2 * mx + 1 >= r2:
            return "boundary"
        return "interior"

    def on_boundary(self, p: LatticePoint) -> bool:
        return self.classify(p) == "boundary"


def ball(radius: float, center: LatticePoint | None = None, d: int = 4) -> BallSpec:
    """Convenience constructor; default center is the origin of Z^d."""
    if center is None:
        center = origin(d)
    return BallSpec(center, float(radius))


def _boundary_generic(d: int, r2: float) -> np.ndarray:
    # recursive enumeration for d != 4; only used at small radii
    pts: list[tuple[int, ...]] = []
    lim = math.isqrt(max(0, math.ceil(r2) - 1))
    while (lim + 1) ** 2 < r2:
        lim += 1
    while lim >= 0 and lim * lim >= r2:
        lim -= 1

    def rec(prefix: tuple[int, ...], s: int) -> None:
        if len(prefix) == d:
            mx = max(abs(c) for c in prefix) if prefix else 0
            if s + 2 * mx + 1 >= r2:
                pts.append(prefix)
            return
        bound = lim
        while bound >= 0 and s + bound * bound >= r2:
            bound -= 1
        for c in range(-bound, bound + 1):
            rec(prefix + (c,), s + c * c)

    rec((), 0)
    arr = np.array(pts, dtype=np.int64).reshape(len(pts), d)
    return arr


def boundary_points(spec: BallSpec, budget: int = 20_000_000) -> np.ndarray:
    """All points of the inner vertex boundary, lexicographically sorted.

    Returns an int64 array of shape (K, d).  Counts first and raises
    BudgetExceeded when the boundary holds more than `budget` points, since
    the boundary of a large ball in Z^4 grows like its radius cubed.
    Results are cached per (d, radius) for origin-relative shape; the rows
    returned are shifted to the ball's center.
    """
    from . import _kernels

    key = (spec.d, float(spec.radius))
    cached = _BOUNDARY_CACHE.get(key)
    if cached is None:
        r2 = spec.radius_sq
        if spec.d == 4:
            empty = np.empty((0, 4), dtype=np.int64)
            count = int(_kernels.k_boundary_shell_d4(r2, empty, True))
            if count > budget:
                raise BudgetExceeded(
                    f"boundary of B({spec.radius:g}) in Z^4 has {count} points, "
                    f"budget is {budget}"
                )
            out = np.empty((count, 4), dtype=np.int64)
            _kernels.k_boundary_shell_d4(r2, out, False)
            cached = out
        else:
            if spec.radius ** spec.d > 4 * budget:
                raise BudgetExceeded(
                    f"boundary enumeration for d={spec.d}, radius "
                    f"{spec.radius:g} exceeds the budget"
                )
            cached = _boundary_generic(spec.d, r2)
        _BOUNDARY_CACHE[key] = cached
    if all(c == 0 for c in spec.center.coords):
        return cached
    return cached + np.asarray(spec.center.coords, dtype=np.int64)


def boundary_size(spec: BallSpec) -> int:
    """Number of inner vertex boundary points, without materializing them."""
    from . import _kernels

    if spec.d == 4:
        empty = np.empty((0, 4), dtype=np.int64)
        return int(_kernels.k_boundary_shell_d4(spec.radius_sq, empty, True))
    return len(boundary_points(spec))


def sample_boundary_point(spec: BallSpec, rng: RandomStream) -> LatticePoint:
    """One point drawn uniformly from the inner vertex boundary.

    Uses rejection from the enclosing box, so it stays exact-uniform at radii
    far beyond what enumeration could hold in memory.
    """
    gen = rng.generator()
    half = int(math.floor(spec.radius))
    r2 = spec.radius_sq
    width = 2 * half + 1
    batch = 4096
    while True:
        draws = gen.integers(-half, half + 1, size=(batch, spec.d), dtype=np.int64)
        ns = np.einsum("ij,ij->i", draws, draws)
        mx = np.abs(draws).max(axis=1)
        ok = (ns < r2) & (ns + 2 * mx + 1 >= r2)
        idx = np.nonzero(ok)[0]
        if len(idx) > 0:
            rel = draws[idx[0]]
            return LatticePoint(
                tuple(int(c) + cc for c, cc in zip(rel, spec.center.coords))
            )
        # acceptance is ~2/width for any radius, so falling through even a
        # few times signals something structurally wrong
        if width > 10 and batch > 100 * width:
            raise UsageError(f"boundary sampling failed for radius {spec.radius!r}")
        batch = min(batch * 2, max(4096, 8 * width))


def sample_separated_boundary_pair(
    spec: BallSpec,
    separation: float,
    rng: RandomStream,
    budget: int = 100_000,
) -> tuple[LatticePoint, LatticePoint]:
    """Two independent uniform boundary points conditioned on being more than
    `separation` apart, by rejection.

    Raises SeparationInfeasible when `budget` pair draws produce nothing,
    which is the expected outcome when separation is close to the diameter.
    """
    gen = rng.generator()
    half = int(math.floor(spec.radius))
    r2 = spec.radius_sq
    sep2 = separation * separation
    center = np.asarray(spec.center.coords, dtype=np.int64)
    batch = 4096
    used = 0
    accepted: list[np.ndarray] = []
    while used < budget:
        draws = gen.integers(-half, half + 1, size=(batch, spec.d), dtype=np.int64)
        ns = np.einsum("ij,ij->i", draws, draws)
        mx = np.abs(draws).max(axis=1)
        ok = (ns < r2) & (ns + 2 * mx + 1 >= r2)
        pts = draws[ok]
        for row in pts:
            accepted.append(row)
            if len(accepted) == 2:
                a, b = accepted
                used += 1
                d2 = int(((a - b) ** 2).sum())
                if d2 > sep2:
                    return (
                        LatticePoint(tuple(int(v) for v in a + center)),
                        LatticePoint(tuple(int(v) for v in b + center)),
                    )
                accepted = []
    raise SeparationInfeasible(
        f"no boundary pair of B({spec.radius:g}) farther than {separation:g} "
        f"apart in {budget} draws"
    )
