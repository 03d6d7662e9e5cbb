"""Intersection statistics of walk traces.

Counting common points of two traces, the r-th moment of the summed
intersection counts of a walker family, the good/bad time classifier, and
two nested Monte Carlo tails: the chance that a trace is easy to hit, and
the far-boundary hitting event on a stopped walk.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .errors import (
    HorizonExceeded,
    InsufficientExtension,
    SeparationInfeasible,
    UsageError,
)
from .estimators import Estimate, _as_point, _require_d4, map_blocks, map_outer
from .lattice import (
    BallSpec,
    LatticePoint,
    ball,
    boundary_points,
    sample_boundary_point,
    sample_separated_boundary_pair,
)
from .streams import RandomStream
from .walker import WalkPath, default_step_cap

__all__ = [
    "GoodTimeMask",
    "HittabilityParams",
    "classify_good_times",
    "event_H_prob",
    "expected_intersections",
    "hittability_sweep",
    "hittability_tail",
    "intersection_prob",
    "moment_sum",
    "moment_sum_bound_shape",
    "trace_intersection",
]


def trace_intersection(p1: WalkPath, p2: WalkPath) -> tuple[int, frozenset]:
    """Distinct lattice points visited by both walks (chopped traces)."""
    common = p1.trace() & p2.trace()
    return len(common), common


# ---------------------------------------------------------------------------
# Paired-walk estimators
# ---------------------------------------------------------------------------

def expected_intersections(
    x,
    n_steps: int,
    replicas: int,
    rng: RandomStream,
    horizon_factor: float = 8.0,
) -> Estimate:
    """Mean number of distinct points shared by a walk of ``n_steps`` steps
    from the origin and an unbounded walk from ``x``.

    The unbounded walk is truncated on leaving B(horizon_factor * s) with
    s = |x| + sqrt(n_steps).  An excursion past that radius hits any fixed
    point of the first trace later with probability O(1/(horizon_factor*s)^2),
    so the truncation undercounts by at most a constant times
    n_steps / (horizon_factor * s)^2 per replicate.

    A warning (not an error) is emitted when n_steps <= |x|^2, where the
    mean is no longer in its logarithmic growth regime.
    """
    p = _as_point(x)
    _require_d4(p, "expected_intersections")
    if n_steps < 1:
        raise UsageError("n_steps must be a positive integer")
    if horizon_factor < 2.0:
        raise UsageError("horizon_factor must be at least 2")
    if n_steps <= p.norm_sq():
        warnings.warn(
            "n_steps <= |x|^2: below the logarithmic regime; "
            "the estimate is returned anyway",
            stacklevel=2,
        )
    scale = p.norm() + math.sqrt(n_steps)
    radius = horizon_factor * scale
    r2 = radius * radius
    cap = default_step_cap(radius)
    xarr = np.asarray(p.coords, dtype=np.int64)
    tbl_size = 1 << max(12, int(2 * (n_steps + 1)).bit_length())

    def call(state, count, block):
        table = np.zeros(tbl_size, dtype=np.uint64)
        alive = np.zeros(tbl_size, dtype=np.uint8)
        keybuf = np.empty(n_steps + 1, dtype=np.uint64)
        slotbuf = np.empty(n_steps + 1, dtype=np.int64)
        counts = np.empty(count, dtype=np.int64)
        capped, overflow = _k.k_pair_common(
            state, count, xarr, n_steps, r2, cap, table, keybuf, alive,
            slotbuf, counts,
        )
        return counts, int(capped), int(overflow)

    parts = map_blocks(rng, replicas, call)
    if sum(pt[2] for pt in parts):
        raise HorizonExceeded("trace buffer overflow in expected_intersections")
    if sum(pt[1] for pt in parts):
        raise HorizonExceeded(
            f"no exit past radius {radius:g} within {cap} steps"
        )
    counts = np.concatenate([pt[0] for pt in parts]).astype(np.float64)
    return Estimate.from_moments(
        float(counts.sum()), float((counts * counts).sum()), replicas, rng
    )


def intersection_prob(
    s1, s2, m: float, replicas: int, rng: RandomStream
) -> Estimate:
    """Probability that two independent walks from s1 and s2, each stopped
    at the boundary of B(m), share at least one trace point.

    Equal starts make the event sure, returned without simulation.
    """
    p1 = _as_point(s1)
    p2 = _as_point(s2)
    _require_d4(p1, "intersection_prob")
    _require_d4(p2, "intersection_prob")
    if m <= 1.0:
        raise UsageError("m must exceed 1")
    if p1 == p2:
        return Estimate.exact(1.0, replicas, rng)
    r2 = float(m) * float(m)
    cap = default_step_cap(max(float(m), p1.norm(), p2.norm()))
    keycap = max(4096, int(48 * m * m))
    tbl_size = 1 << max(13, int(keycap / 0.6).bit_length())
    a1 = np.asarray(p1.coords, dtype=np.int64)
    a2 = np.asarray(p2.coords, dtype=np.int64)

    def call(state, count, block):
        table = np.zeros(tbl_size, dtype=np.uint64)
        keybuf = np.empty(keycap, dtype=np.uint64)
        return _k.k_pair_hit(state, count, a1, a2, r2, cap, table, keybuf)

    parts = map_blocks(rng, replicas, call)
    if sum(int(pt[2]) for pt in parts):
        raise HorizonExceeded("trace buffer overflow in intersection_prob")
    if sum(int(pt[1]) for pt in parts):
        raise HorizonExceeded(f"no boundary visit within {cap} steps")
    hits = sum(int(pt[0]) for pt in parts)
    return Estimate.from_binomial(hits, replicas, rng)


# ---------------------------------------------------------------------------
# Moment functional
# ---------------------------------------------------------------------------

def moment_sum_bound_shape(n: float, m: float, k: int, r: int) -> float:
    """Envelope k^{3/2} L (log2 m + k^2 L)^{r-1} with L = log2(m log2(n)/n).

    This is the shape the r-th moment is compared against; any constant in
    front is calibrated empirically, never assumed.
    """
    if not (m > n >= 2.0):
        raise UsageError("need m > n >= 2")
    if k < 1 or not 1 <= r <= 8:
        raise UsageError("need k >= 1 and 1 <= r <= 8")
    big_l = math.log2(m * math.log2(n) / n)
    return k ** 1.5 * big_l * (math.log2(m) + k * k * big_l) ** (r - 1)


def _conditioned_starts(
    spec: BallSpec,
    anchor: LatticePoint,
    separation: float,
    count: int,
    rng: RandomStream,
    budget: int = 100_000,
) -> list[LatticePoint]:
    """Uniform boundary points conditioned to lie farther than `separation`
    from `anchor`, by rejection from the enclosing box."""
    gen = rng.generator()
    half = int(math.floor(spec.radius))
    r2 = spec.radius_sq
    sep2 = separation * separation
    center = np.asarray(spec.center.coords, dtype=np.int64)
    anchor_arr = np.asarray(anchor.coords, dtype=np.int64)
    out: list[LatticePoint] = []
    used = 0
    batch = 4096
    while len(out) < count and used < budget:
        draws = gen.integers(-half, half + 1, size=(batch, spec.d), dtype=np.int64)
        ns = np.einsum("ij,ij->i", draws, draws)
        mx = np.abs(draws).max(axis=1)
        ok = (ns < r2) & (ns + 2 * mx + 1 >= r2)
        pts = draws[ok] + center
        used += len(pts)
        if len(pts):
            d2 = ((pts - anchor_arr) ** 2).sum(axis=1)
            for row in pts[d2 > sep2]:
                out.append(LatticePoint(tuple(int(v) for v in row)))
                if len(out) == count:
                    break
    if len(out) < count:
        raise SeparationInfeasible(
            f"could not draw {count} boundary points of B({spec.radius:g}) "
            f"farther than {separation:g} from the reference start"
        )
    return out


def moment_sum(
    n: float, m: float, k: int, r: int, replicas: int, rng: RandomStream
) -> Estimate:
    """r-th moment of X = sum_i |trace(R_0) ∩ trace(R_i)|, i = 1..k.

    All k+1 walks start on the boundary of B(n) and stop at the boundary of
    B(m); the follower starts are conditioned to lie farther than n/log2 n
    from the reference start.  Pair the result with moment_sum_bound_shape
    for the envelope it is expected to sit under.
    """
    if not (m > n > 1.0):
        raise UsageError("need m > n > 1")
    if k < 1:
        raise UsageError("k must be a positive integer")
    if not 0 <= r <= 8:
        raise UsageError("r must lie in 0..8")
    if replicas < 1:
        raise UsageError("replicas must be a positive integer")
    if r == 0:
        return Estimate.exact(1.0, replicas, rng)
    spec = ball(n)
    separation = n / math.log2(n)
    r2m = float(m) * float(m)
    cap = default_step_cap(m)
    keycap = max(4096, int(48 * m * m))
    tbl_size = 1 << max(13, int(keycap / 0.6).bit_length())

    def make_task():
        table = np.zeros(tbl_size, dtype=np.uint64)
        alive = np.zeros(tbl_size, dtype=np.uint8)
        keybuf = np.empty(keycap, dtype=np.uint64)
        slotbuf = np.empty(keycap, dtype=np.int64)

        def task(i: int, sub: RandomStream) -> float:
            s0 = sample_boundary_point(spec, sub.child(0))
            starts = _conditioned_starts(spec, s0, separation, k, sub.child(1))
            s0a = np.asarray(s0.coords, dtype=np.int64)
            st0 = sub.child(2).kernel_state(0)
            tau, nkeys, _end, status = _k.k_trace_to_boundary(
                st0, s0a, r2m, cap, table, keybuf
            )
            if status:
                _k.k_clear_keys(table, keybuf, nkeys)
                raise HorizonExceeded("reference walk exceeded its budget")
            _k.k_set_alive(table, keybuf, nkeys, alive, np.uint8(1))
            sti = sub.child(3).kernel_state(0)
            total = 0
            try:
                for j, sj in enumerate(starts):
                    sja = np.asarray(sj.coords, dtype=np.int64)
                    cnt, st2 = _k.k_count_common(
                        sti, sja, table, alive, r2m, True, cap, slotbuf
                    )
                    if st2:
                        raise HorizonExceeded("follower walk exceeded its budget")
                    total += int(cnt)
            finally:
                _k.k_set_alive(table, keybuf, nkeys, alive, np.uint8(0))
                _k.k_clear_keys(table, keybuf, nkeys)
            return float(total) ** r

        return task

    vals = np.asarray(map_outer(rng, replicas, make_task), dtype=np.float64)
    return Estimate.from_moments(
        float(vals.sum()), float((vals * vals).sum()), replicas, rng
    )


# ---------------------------------------------------------------------------
# Good and bad times
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoodTimeMask:
    """Per-time classification of a path.

    ``flags[t]`` is True when time t is good: the forward window sum of
    inverse squared displacements clears log2(n)/lam while the doubled
    window sum stays at or below lam * log2(n)^2.  ``lam`` is the usual
    λ knob; window is the Σ upper limit.
    """

    path_id: str
    flags: np.ndarray
    lam: float
    window: int

    @property
    def n_times(self) -> int:
        return len(self.flags)

    def bad_fraction(self) -> float:
        if len(self.flags) == 0:
            return 0.0
        return 1.0 - float(np.count_nonzero(self.flags)) / len(self.flags)


def classify_good_times(
    path: WalkPath,
    n: float,
    lam: float,
    window: int,
    path_id: str | None = None,
) -> GoodTimeMask:
    """Classify every time of `path` (up to its stop, when stopped) as good
    or bad.

    Both condition sums look ahead up to 2*window positions, so the path
    must carry that much extension beyond the last classified time;
    InsufficientExtension is raised otherwise.  A zero displacement counts
    as 1 in the sums (a revisit is a certain hit).  Classification uses
    increments only, so it commutes with shifting the path.
    """
    if path.d != 4:
        raise UsageError("classify_good_times requires d=4 paths")
    if n <= 1.0:
        raise UsageError("n must exceed 1")
    if lam <= 0.0:
        raise UsageError("lam must be positive")
    if window < 1:
        raise UsageError("window must be a positive integer")
    n_times = (path.stop_index + 1) if path.stopped else path.n_steps + 1 - 2 * window
    if n_times < 1 or (n_times - 1) + 2 * window > path.n_steps:
        raise InsufficientExtension(
            f"path holds {path.n_steps} steps; classifying {max(n_times, 1)} "
            f"times needs {max(n_times, 1) - 1 + 2 * window}"
        )
    pos = np.ascontiguousarray(path.vertices, dtype=np.int64)
    c1 = np.empty(n_times, dtype=np.float64)
    c2 = np.empty(n_times, dtype=np.float64)
    _k.k_good_time_sums(pos, n_times, int(window), c1, c2)
    log_n = math.log2(n)
    flags = (c1 > log_n / lam) & (c2 <= lam * log_n * log_n)
    if path_id is None:
        h = hashlib.blake2b(pos.tobytes(), digest_size=8)
        path_id = h.hexdigest()
    return GoodTimeMask(path_id, flags, float(lam), int(window))


# ---------------------------------------------------------------------------
# Hittability tail
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HittabilityParams:
    """Geometry and budgets for the hittability tail.

    The lemma-shaped regime has epsilon in [1/log2 n, 2/3) and
    m in [n, n e^{4 sqrt(log2 n)}]; leaving it is allowed and warns.
    """

    n: float
    m: float
    epsilon: float
    outer_replicas: int
    inner_replicas: int

    def __post_init__(self) -> None:
        if self.n < 2.0:
            raise UsageError("n must be at least 2")
        if self.m < self.n:
            raise UsageError("m must be at least n")
        if self.epsilon <= 0.0:
            raise UsageError("epsilon must be positive")
        if self.outer_replicas < 1 or self.inner_replicas < 1:
            raise UsageError("replica counts must be positive integers")
        if self.epsilon < 1.0:
            if self.epsilon >= 2.0 / 3.0:
                warnings.warn(
                    "epsilon >= 2/3 sits outside the linear-tail regime",
                    stacklevel=3,
                )
            elif self.epsilon * math.log2(self.n) < 1.0:
                warnings.warn(
                    "epsilon below 1/log2 n sits outside the linear-tail regime",
                    stacklevel=3,
                )
        if self.m > self.n * math.exp(4.0 * math.sqrt(math.log2(self.n))):
            warnings.warn(
                "m beyond n*e^{4 sqrt(log2 n)} sits outside the stated range",
                stacklevel=3,
            )


def _hittability_phats(
    n: float, m: float, outer: int, inner: int, rng: RandomStream
) -> np.ndarray:
    """Per-outer-replicate inner hitting estimates, rows (p_hat, stderr).

    Each outer replicate draws a start pair on the boundary of B(n) farther
    apart than n/log2 n, runs the first walk to the boundary of B(m), and
    estimates with `inner` walks the chance that the second start's walk
    touches the first trace before stopping there too.
    """
    spec = ball(n)
    separation = n / math.log2(n)
    r2m = float(m) * float(m)
    cap = default_step_cap(m)
    keycap = max(4096, int(48 * m * m))
    tbl_size = 1 << max(13, int(keycap / 0.6).bit_length())

    def make_task():
        table = np.zeros(tbl_size, dtype=np.uint64)
        keybuf = np.empty(keycap, dtype=np.uint64)

        def task(i: int, sub: RandomStream) -> tuple[float, float]:
            s1, s2 = sample_separated_boundary_pair(
                spec, separation, sub.child(0)
            )
            s1a = np.asarray(s1.coords, dtype=np.int64)
            s2a = np.asarray(s2.coords, dtype=np.int64)
            st1 = sub.child(1).kernel_state(0)
            tau, nkeys, _end, status = _k.k_trace_to_boundary(
                st1, s1a, r2m, cap, table, keybuf
            )
            if status:
                _k.k_clear_keys(table, keybuf, nkeys)
                raise HorizonExceeded("outer walk exceeded its budget")
            st2 = sub.child(2).kernel_state(0)
            hits, capped = _k.k_hit_trace(
                st2, inner, s2a, table, r2m, True, cap
            )
            _k.k_clear_keys(table, keybuf, nkeys)
            if capped:
                raise HorizonExceeded("inner walk exceeded its budget")
            p = hits / inner
            return p, math.sqrt(p * (1.0 - p) / inner)

        return task

    return np.asarray(map_outer(rng, outer, make_task), dtype=np.float64)


def hittability_sweep(
    n: float,
    m: float,
    eps_values,
    outer: int,
    inner: int,
    rng: RandomStream,
) -> list[tuple[float, Estimate]]:
    """delta(epsilon) over a grid of thresholds sharing one set of walks.

    Sharing makes the sweep exactly nondecreasing in epsilon.  Each delta is
    the fraction of outer traces whose inner estimate clears 1 - eps minus a
    de-biasing margin of two inner standard errors (the margin works against
    the assertion direction, never for it).
    """
    eps_list = [float(e) for e in eps_values]
    if not eps_list:
        raise UsageError("eps_values must be non-empty")
    for e in eps_list:
        # validate every threshold with the shared geometry
        HittabilityParams(n, m, e, outer, inner)
    rows = None
    if any(e < 1.0 for e in eps_list):
        rows = _hittability_phats(n, m, outer, inner, rng)
    out = []
    for e in eps_list:
        if e >= 1.0:
            # a trace is hit with positive probability, and any positive
            # number clears the nonpositive threshold 1-eps
            out.append((e, Estimate.exact(1.0, outer, rng)))
            continue
        crossed = int(np.count_nonzero(rows[:, 0] + 2.0 * rows[:, 1] > 1.0 - e))
        out.append((e, Estimate.from_binomial(crossed, outer, rng)))
    return out


def hittability_tail(params: HittabilityParams, rng: RandomStream) -> Estimate:
    """delta(epsilon) for a single threshold; see hittability_sweep."""
    return hittability_sweep(
        params.n,
        params.m,
        [params.epsilon],
        params.outer_replicas,
        params.inner_replicas,
        rng,
    )[0][1]


# ---------------------------------------------------------------------------
# Event H
# ---------------------------------------------------------------------------

_GRID_CACHE: dict[tuple[float, int], np.ndarray] = {}


def _farthest_grid(n: float, size: int) -> np.ndarray:
    """Greedy max-min sample of `size` boundary points of B(n).

    Candidates are a lexicographic stride through the full shell, which
    keeps the construction deterministic at any radius the enumeration
    budget allows.
    """
    key = (float(n), size)
    cached = _GRID_CACHE.get(key)
    if cached is not None:
        return cached
    shell = boundary_points(ball(n))
    stride = max(1, len(shell) // (1 << 14))
    pool = shell[::stride].astype(np.float64)
    if len(pool) <= size:
        grid = pool
    else:
        chosen = np.empty(size, dtype=np.int64)
        chosen[0] = 0
        d2 = ((pool - pool[0]) ** 2).sum(axis=1)
        for i in range(1, size):
            nxt = int(np.argmax(d2))
            chosen[i] = nxt
            alt = ((pool - pool[nxt]) ** 2).sum(axis=1)
            np.minimum(d2, alt, out=d2)
        grid = pool[chosen]
    grid = grid.astype(np.int64)
    _GRID_CACHE[key] = grid
    return grid


def event_h_threshold(n: float, k: float, c1: float) -> float:
    """The conditional-hit bar at scale n with exclusion distance k.

    Values of 1 or more make the event structurally impossible, since no
    probability can clear them; callers short-circuit on that.
    """
    if n <= 2.0:
        raise UsageError("n must exceed 2")
    if not 0.0 < k < n:
        raise UsageError("need 0 < k < n")
    if c1 <= 0.0:
        raise UsageError("C1 must be positive")
    log_n = math.log2(n)
    return c1 * math.log2(log_n) * math.log2(n * log_n ** 3 / k) / log_n


def event_H_prob(
    n: float,
    k: float,
    C1: float,
    outer: int,
    inner: int,
    rng: RandomStream,
    grid_size: int = 64,
    horizon_factor: float = 8.0,
) -> Estimate:
    """Probability that a walk from the origin, stopped at the boundary of
    B(n) with endpoint y, leaves some far boundary point z (|z - y| > k)
    from which a second walk hits its trace with probability above
    C1 * log2(log2 n) * log2(n log2(n)^3 / k) / log2 n.

    When that threshold reaches 1 the event is impossible outright (a
    probability cannot exceed 1) and exact zero is returned without
    simulation.  Otherwise the existential z is approximated by a max over
    a deterministic farthest-point grid on the boundary, and each probing
    walk is truncated on leaving B(horizon_factor * n), undercounting the
    hit probability by O(1/(horizon_factor * n)^2); both approximations
    push the estimate down, never up.
    """
    if outer < 1 or inner < 1:
        raise UsageError("replica counts must be positive integers")
    if grid_size < 1:
        raise UsageError("grid_size must be a positive integer")
    if horizon_factor < 2.0:
        raise UsageError("horizon_factor must be at least 2")
    threshold = event_h_threshold(n, k, C1)
    if threshold >= 1.0:
        return Estimate.exact(0.0, outer, rng)
    grid = _farthest_grid(n, grid_size)
    r2n = float(n) * float(n)
    radius = horizon_factor * float(n)
    r2_trunc = radius * radius
    cap_n = default_step_cap(n)
    cap_probe = default_step_cap(radius)
    keycap = max(4096, int(48 * n * n))
    tbl_size = 1 << max(13, int(keycap / 0.6).bit_length())
    origin_arr = np.zeros(4, dtype=np.int64)
    k2 = float(k) * float(k)

    def make_task():
        table = np.zeros(tbl_size, dtype=np.uint64)
        keybuf = np.empty(keycap, dtype=np.uint64)

        def task(i: int, sub: RandomStream) -> int:
            st = sub.child(0).kernel_state(0)
            tau, nkeys, end_packed, status = _k.k_trace_to_boundary(
                st, origin_arr, r2n, cap_n, table, keybuf
            )
            if status:
                _k.k_clear_keys(table, keybuf, nkeys)
                raise HorizonExceeded("stopped walk exceeded its budget")
            y = np.empty(4, dtype=np.int64)
            for c in range(4):
                y[c] = int((int(end_packed) >> (16 * c)) & 0xFFFF) - (1 << 15)
            sep2 = ((grid - y) ** 2).sum(axis=1).astype(np.float64)
            hit = 0
            try:
                for zi in np.nonzero(sep2 > k2)[0]:
                    stz = sub.child(1 + int(zi)).kernel_state(0)
                    hits, capped = _k.k_hit_trace(
                        stz, inner, grid[zi], table, r2_trunc, False, cap_probe
                    )
                    if capped:
                        raise HorizonExceeded("probing walk exceeded its budget")
                    if hits / inner > threshold:
                        hit = 1
                        break
            finally:
                _k.k_clear_keys(table, keybuf, nkeys)
            return hit

        return task

    flags = map_outer(rng, outer, make_task)
    return Estimate.from_binomial(int(sum(flags)), outer, rng)
