"""Monte Carlo estimators for exit and visit functionals of the d=4 walk.

Every estimator here follows the same contract.  It takes a
:class:`~avoidance.streams.RandomStream` and a replica count, splits the
replicas into fixed-size blocks, runs one compiled kernel per block, and
folds the block results in block order.  The block decomposition depends
only on the replica count, and each block draws from a generator state
derived from ``(seed, stream_id, block)``, so the returned
:class:`Estimate` is a pure function of ``(parameters, stream, replicas)``
no matter how many worker threads execute the blocks.  The worker count
comes from the ``AVOIDANCE_THREADS`` environment variable and defaults to
one thread per available core, capped at eight.

Calling the same estimator twice with the same stream repeats the same
walks.  Callers that want independent runs derive children
(``rng.child(i)``); callers that want common random numbers across a
parameter sweep pass the same stream on purpose, which several
monotonicity tests exploit.

Probability estimates report a Wilson 95% interval; mean estimates report
``value ± 1.96·stderr``.  Where a quantity is forced by the geometry
(an estimate of an impossible event, say) the estimator returns an exact
zero-spread Estimate without running walks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import _kernels as _k
from .errors import DomainError, HorizonExceeded, UsageError
from .lattice import BallSpec, LatticePoint
from .streams import RandomStream
from .walker import default_step_cap

__all__ = [
    "Estimate",
    "ExitTimeTail",
    "annulus_exit_limit",
    "annulus_exit_prob",
    "boundary_layer_tail",
    "escape_curved_boundary_prob",
    "estimate_green",
    "exit_point_counts",
    "exit_time_tail",
    "green_exact",
    "hitting_measure_max",
    "inverse_square_samples",
    "inverse_square_sum",
    "map_blocks",
    "thread_count",
]

# Replicas per kernel block.  Part of the reproducibility contract: the
# block split is a function of the replica count alone, never of the
# worker count, so changing AVOIDANCE_THREADS cannot move any estimate.
BLOCK_SIZE = 1 << 13

_Z95 = 1.959963984540054


def thread_count() -> int:
    """Worker threads for block execution, from AVOIDANCE_THREADS."""
    raw = os.environ.get("AVOIDANCE_THREADS")
    if raw is None or raw.strip() == "":
        return min(8, os.cpu_count() or 1)
    try:
        v = int(raw)
    except ValueError:
        raise UsageError(f"AVOIDANCE_THREADS must be an integer, got {raw!r}")
    if v < 1:
        raise UsageError(f"AVOIDANCE_THREADS must be >= 1, got {v}")
    return v


def map_blocks(
    rng: RandomStream,
    replicas: int,
    call: Callable[[np.ndarray, int, int], tuple],
    block_size: int = BLOCK_SIZE,
) -> list:
    """Run ``call(kernel_state, count, block_index)`` over replica blocks.

    Results come back in block order regardless of scheduling, which is
    what makes every estimator built on this reproducible across worker
    counts.
    """
    if replicas < 1:
        raise UsageError("replicas must be a positive integer")
    blocks = []
    done = 0
    i = 0
    while done < replicas:
        cnt = min(block_size, replicas - done)
        blocks.append((i, cnt))
        done += cnt
        i += 1

    def one(b):
        idx, cnt = b
        return call(rng.kernel_state(idx), cnt, idx)

    workers = thread_count()
    if workers == 1 or len(blocks) == 1:
        return [one(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, blocks))


OUTER_CHUNK = 16


def map_outer(
    rng: RandomStream,
    n_outer: int,
    make_task: Callable[[], Callable[[int, RandomStream], object]],
    chunk: int = OUTER_CHUNK,
) -> list:
    """Per-replicate runner for the nested estimators.

    ``make_task()`` is called once per chunk and may close over scratch
    buffers; the returned ``task(index, sub)`` handles one outer replicate
    with ``sub = rng.child(index)``, so a replicate's result depends only on
    its index and never on which worker ran it or what ran before it.
    Results come back in index order.
    """
    if n_outer < 1:
        raise UsageError("outer replicas must be a positive integer")
    spans = [(lo, min(lo + chunk, n_outer)) for lo in range(0, n_outer, chunk)]

    def run(span):
        lo, hi = span
        task = make_task()
        return [task(i, rng.child(i)) for i in range(lo, hi)]

    workers = thread_count()
    if workers == 1 or len(spans) == 1:
        out = []
        for s in spans:
            out.extend(run(s))
        return out
    with ThreadPoolExecutor(max_workers=workers) as ex:
        out = []
        for part in ex.map(run, spans):
            out.extend(part)
    return out


# ---------------------------------------------------------------------------
# Estimate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Estimate:
    """A simulation result with its uncertainty.

    ``ci95`` is a Wilson interval when the estimate is a probability and
    a normal interval when it is a mean; both shrink like replicas^{-1/2}.
    ``seed`` is the seed of the stream that produced the estimate,
    reported verbatim so a record can be replayed.
    """

    value: float
    stderr: float
    ci95: tuple
    replicas: int
    seed: int

    @staticmethod
    def from_binomial(successes: int, replicas: int, rng: RandomStream) -> "Estimate":
        if not 0 <= successes <= replicas:
            raise UsageError("successes must lie in [0, replicas]")
        n = float(replicas)
        p = successes / n
        se = math.sqrt(p * (1.0 - p) / n)
        z2 = _Z95 * _Z95
        center = (p + z2 / (2 * n)) / (1 + z2 / n)
        half = (_Z95 / (1 + z2 / n)) * math.sqrt(
            p * (1 - p) / n + z2 / (4 * n * n)
        )
        return Estimate(p, se, (center - half, center + half), replicas, rng.seed)

    @staticmethod
    def from_moments(
        total: float, total_sq: float, replicas: int, rng: RandomStream
    ) -> "Estimate":
        n = replicas
        mean = total / n
        if n > 1:
            var = max(0.0, (total_sq - total * total / n) / (n - 1))
        else:
            var = 0.0
        se = math.sqrt(var / n)
        return Estimate(
            mean, se, (mean - _Z95 * se, mean + _Z95 * se), n, rng.seed
        )

    @staticmethod
    def exact(value: float, replicas: int, rng: RandomStream) -> "Estimate":
        """A value forced by the geometry; no sampling error."""
        return Estimate(float(value), 0.0, (float(value), float(value)), replicas, rng.seed)


def _as_point(x) -> LatticePoint:
    if isinstance(x, LatticePoint):
        return x
    return LatticePoint(tuple(int(c) for c in x))


def _require_d4(p: LatticePoint, what: str) -> None:
    if p.d != 4:
        raise UsageError(f"{what} requires d=4, got d={p.d}")


# ---------------------------------------------------------------------------
# Green's function: hitting estimate and linear-solve values
# ---------------------------------------------------------------------------

def estimate_green(
    x,
    replicas: int,
    rng: RandomStream,
    truncation_radius: float | None = None,
) -> Estimate:
    """Estimates G(0,x), the probability that a walk from 0 ever visits x.

    Walks stop on the boundary of B(truncation_radius), so the estimate
    carries a downward truncation bias of order truncation_radius^{-2}
    (the chance of a return to x from outside the ball).  The default
    radius is the smallest integer exceeding 4|x|.  Comparisons against
    :func:`green_exact` at the same radius are free of this bias.

    ``x = origin`` returns the defined value 1 with no simulation.
    """
    p = _as_point(x)
    _require_d4(p, "estimate_green")
    if replicas < 1:
        raise UsageError("replicas must be a positive integer")
    if p.norm_sq() == 0:
        # a walk at x has already visited x
        return Estimate.exact(1.0, replicas, rng)
    if truncation_radius is None:
        truncation_radius = math.floor(4.0 * p.norm()) + 1
    if not truncation_radius > 4.0 * p.norm():
        raise UsageError(
            f"truncation_radius must exceed 4|x| = {4.0 * p.norm():g}, "
            f"got {truncation_radius:g}"
        )
    target = np.array(p.coords, dtype=np.int64)
    target_ns = int(p.norm_sq())
    r2 = float(truncation_radius) ** 2
    cap = default_step_cap(truncation_radius)

    def block(state, cnt, idx):
        return _k.k_green(state, cnt, target, target_ns, r2, cap)

    hits = 0
    for h, capped in map_blocks(rng, replicas, block):
        # a capped walk neither hit nor escaped; counting it as a miss
        # biases down by at most capped/replicas, and the cap makes that
        # astronomically rare
        hits += int(h)
    return Estimate.from_binomial(hits, replicas, rng)


def _axis_canonical(p: LatticePoint):
    """(s, radius-independent) axis form of p if p lies on a coordinate
    axis, else None.  G(0,·) is invariant under the symmetries used."""
    nz = [c for c in p.coords if c != 0]
    if len(nz) != 1:
        return None
    return abs(nz[0])


def _interior_mask(ns: np.ndarray, mx: np.ndarray, r2: int) -> np.ndarray:
    in_ball = ns < r2
    return in_ball & (ns + 2 * mx + 1 < r2)


def _solve_hit_system(a_mat, b_vec, precond_diag) -> np.ndarray:
    from scipy.sparse import diags
    from scipy.sparse.linalg import cg

    m_inv = diags(1.0 / precond_diag)
    u, info = cg(a_mat, b_vec, rtol=1e-12, atol=0.0, maxiter=50_000, M=m_inv)
    if info != 0:
        raise RuntimeError(f"conjugate gradient failed to converge (info={info})")
    return u


@lru_cache(maxsize=8)
def _green_exact_axis(s: int, radius: int) -> float:
    """Hitting probability of (s,0,0,0) from 0 before the boundary of
    B(radius), by linear solve on the quotient under the 48 symmetries
    fixing the first axis (signed permutations of the other three)."""
    r2 = radius * radius
    lim = radius - 1  # largest |coordinate| inside B(radius), radius integral

    # canonical class representatives: (x1, a >= b >= c >= 0)
    rng3 = np.arange(lim + 1, dtype=np.int64)
    a, b, c = np.meshgrid(rng3, rng3, rng3, indexing="ij")
    tri = (a >= b) & (b >= c)
    a, b, c = a[tri], b[tri], c[tri]
    x1 = np.arange(-lim, lim + 1, dtype=np.int64)
    n3 = a.shape[0]
    x1 = np.repeat(x1, n3)
    a = np.tile(a, 2 * lim + 1)
    b = np.tile(b, 2 * lim + 1)
    c = np.tile(c, 2 * lim + 1)

    ns = x1 * x1 + a * a + b * b + c * c
    mx = np.maximum(np.abs(x1), a)
    keep = _interior_mask(ns, mx, r2)
    x1, a, b, c = x1[keep], a[keep], b[keep], c[keep]

    def key_of(x1v, av, bv, cv):
        return ((x1v + lim) << 24) | (av << 16) | (bv << 8) | cv

    target_key = int(key_of(s, 0, 0, 0))
    origin_key = int(key_of(0, 0, 0, 0))
    keys = key_of(x1, a, b, c)
    unk = keys != target_key  # unknowns exclude the target class
    ux1, ua, ub, uc = x1[unk], a[unk], b[unk], c[unk]
    ukeys = keys[unk]
    order = np.argsort(ukeys)
    ukeys = ukeys[order]
    ux1, ua, ub, uc = ux1[order], ua[order], ub[order], uc[order]
    n_unk = ukeys.shape[0]

    # orbit size: distinct permutations of (a,b,c) times sign choices
    perm = np.full(n_unk, 6, dtype=np.int64)
    perm[(ua == ub) | (ub == uc)] = 3
    perm[(ua == ub) & (ub == uc)] = 1
    w = perm * (1 << ((ua > 0).astype(np.int64) + (ub > 0) + (uc > 0)))
    w = w.astype(np.float64)

    rows_all = []
    cols_all = []
    data_all = []
    rhs = np.zeros(n_unk, dtype=np.float64)
    row_idx = np.arange(n_unk, dtype=np.int64)

    def neighbor_cols(nx1, na, nb, nc):
        tr = np.sort(np.stack([np.abs(na), np.abs(nb), np.abs(nc)], axis=1), axis=1)
        nkeys = (
            ((nx1 + lim) << 24) | (tr[:, 2] << 16) | (tr[:, 1] << 8) | tr[:, 0]
        )
        return nkeys

    moves = [
        (1, 0, 0, 0), (-1, 0, 0, 0),
        (0, 1, 0, 0), (0, -1, 0, 0),
        (0, 0, 1, 0), (0, 0, -1, 0),
        (0, 0, 0, 1), (0, 0, 0, -1),
    ]
    for dx1, da, db, dc in moves:
        nkeys = neighbor_cols(ux1 + dx1, ua + da, ub + db, uc + dc)
        pos = np.searchsorted(ukeys, nkeys)
        pos_c = np.minimum(pos, n_unk - 1)
        found = ukeys[pos_c] == nkeys
        rows_all.append(row_idx[found])
        cols_all.append(pos_c[found])
        data_all.append(-w[found] / 8.0)
        is_target = nkeys == target_key
        rhs[is_target] += w[is_target] / 8.0
        # neighbors neither unknown nor the target are boundary classes
        # (an interior point's neighbors never leave the ball): they carry 0

    from scipy.sparse import coo_matrix

    rows = np.concatenate(rows_all + [row_idx])
    cols = np.concatenate(cols_all + [row_idx])
    data = np.concatenate(data_all + [w])
    a_mat = coo_matrix((data, (rows, cols)), shape=(n_unk, n_unk)).tocsr()

    u = _solve_hit_system(a_mat, rhs, w)
    origin_pos = int(np.searchsorted(ukeys, origin_key))
    return float(u[origin_pos])


def _green_exact_full(target: LatticePoint, radius: int) -> float:
    """Same hitting probability without the symmetry quotient: one
    unknown per ball point.  Kept as an independent route; feasible for
    radius <= 14 or so."""
    r2 = radius * radius
    lim = radius - 1
    grid = np.arange(-lim, lim + 1, dtype=np.int64)
    p0, p1, p2, p3 = np.meshgrid(grid, grid, grid, grid, indexing="ij")
    p0, p1, p2, p3 = (v.ravel() for v in (p0, p1, p2, p3))
    ns = p0 * p0 + p1 * p1 + p2 * p2 + p3 * p3
    mx = np.maximum(
        np.maximum(np.abs(p0), np.abs(p1)), np.maximum(np.abs(p2), np.abs(p3))
    )
    keep = _interior_mask(ns, mx, r2)
    p0, p1, p2, p3 = p0[keep], p1[keep], p2[keep], p3[keep]

    def key_of(q0, q1, q2, q3):
        return (
            ((q0 + lim) << 24) | ((q1 + lim) << 16) | ((q2 + lim) << 8) | (q3 + lim)
        )

    tgt = target.coords
    target_key = int(key_of(tgt[0], tgt[1], tgt[2], tgt[3]))
    origin_key = int(key_of(0, 0, 0, 0))
    keys = key_of(p0, p1, p2, p3)
    unk = keys != target_key
    p0, p1, p2, p3 = p0[unk], p1[unk], p2[unk], p3[unk]
    ukeys = keys[unk]
    order = np.argsort(ukeys)
    ukeys = ukeys[order]
    p0, p1, p2, p3 = p0[order], p1[order], p2[order], p3[order]
    n_unk = ukeys.shape[0]

    rows_all, cols_all, data_all = [], [], []
    rhs = np.zeros(n_unk, dtype=np.float64)
    row_idx = np.arange(n_unk, dtype=np.int64)
    for axis in range(4):
        for sgn in (-1, 1):
            q = [p0, p1, p2, p3]
            q[axis] = q[axis] + sgn
            nkeys = key_of(q[0], q[1], q[2], q[3])
            pos = np.searchsorted(ukeys, nkeys)
            pos_c = np.minimum(pos, n_unk - 1)
            found = ukeys[pos_c] == nkeys
            rows_all.append(row_idx[found])
            cols_all.append(pos_c[found])
            data_all.append(np.full(int(found.sum()), -0.125))
            is_target = nkeys == target_key
            rhs[is_target] += 0.125

    from scipy.sparse import coo_matrix

    rows = np.concatenate(rows_all + [row_idx])
    cols = np.concatenate(cols_all + [row_idx])
    data = np.concatenate(data_all + [np.ones(n_unk)])
    a_mat = coo_matrix((data, (rows, cols)), shape=(n_unk, n_unk)).tocsr()
    u = _solve_hit_system(a_mat, rhs, np.ones(n_unk))
    return float(u[int(np.searchsorted(ukeys, origin_key))])


def green_exact(x, radius: int = 40) -> float:
    """G(0,x) truncated at B(radius), by linear solve instead of walks.

    Axis targets use a symmetry-reduced system and are cheap up to
    radius 40 and beyond.  Off-axis targets fall back to the full system
    and are limited to radius <= 14.
    """
    p = _as_point(x)
    _require_d4(p, "green_exact")
    if radius != int(radius) or radius < 2:
        raise UsageError("radius must be an integer >= 2")
    radius = int(radius)
    if p.norm_sq() == 0:
        return 1.0
    ns = p.norm_sq()
    mxc = max(abs(cc) for cc in p.coords)
    if not (ns < radius * radius and ns + 2 * mxc + 1 < radius * radius):
        raise UsageError("target must be interior to B(radius)")
    s = _axis_canonical(p)
    if s is not None:
        return _green_exact_axis(int(s), radius)
    if radius > 14:
        raise UsageError("off-axis targets are limited to radius <= 14")
    return _green_exact_full(p, radius)


# ---------------------------------------------------------------------------
# Annulus exit
# ---------------------------------------------------------------------------

def annulus_exit_limit(a: float, A: float) -> float:
    """Limit probability of leaving the annulus through the outside:
    (a^{-2} - 1) / (a^{-2} - A^{-2}).  Defined for 0 < a < 1 < A;
    A may be infinite."""
    if not (0.0 < a < 1.0):
        raise DomainError(f"a must lie in (0,1), got {a!r}")
    if not A > 1.0:
        raise DomainError(f"A must exceed 1, got {A!r}")
    ia = a ** -2.0
    iA = 0.0 if math.isinf(A) else A ** -2.0
    return (ia - 1.0) / (ia - iA)


def annulus_exit_prob(
    n: float, a: float, A: float, replicas: int, rng: RandomStream
) -> Estimate:
    """Fraction of walks started uniformly on the boundary of B(n) that
    leave the annulus {an <= |z| <= An} through the outside."""
    annulus_exit_limit(a, A)  # domain check
    if math.isinf(A):
        raise UsageError("simulation needs a finite outer radius")
    lim_inner = _k._limit_below((a * n) ** 2)
    lim_n = _k._limit_below(float(n) ** 2)
    lim_outer = _k._limit_below((A * n) ** 2)
    if not lim_inner < lim_n < lim_outer:
        raise UsageError(
            "n too small: B(an), B(n), B(An) must be strictly nested"
        )
    r2 = float(n) ** 2
    cap = default_step_cap(A * n)

    def block(state, cnt, idx):
        return _k.k_annulus(
            state, cnt, int(lim_n), r2, (a * n) ** 2, (A * n) ** 2, cap
        )

    outer = 0
    capped = 0
    for o, cp in map_blocks(rng, replicas, block):
        outer += int(o)
        capped += int(cp)
    if capped:
        raise HorizonExceeded(f"{capped} walks failed to leave the annulus")
    return Estimate.from_binomial(outer, replicas, rng)


# ---------------------------------------------------------------------------
# Exit time
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExitTimeTail:
    """Tail probabilities of the exit time of B(n), plus its mean."""

    mean: Estimate
    tails: tuple  # ((t, Estimate), ...)


def exit_time_tail(n: float, replicas: int, rng: RandomStream) -> ExitTimeTail:
    """Empirical P(tau > t) at t in {n^2, 2n^2, 4n^2, 8n^2} for the exit
    time tau of B(n) from the origin, together with the mean of tau."""
    n2 = float(n) * float(n)
    t_grid = np.array([round(m * n2) for m in (1, 2, 4, 8)], dtype=np.int64)
    cap = default_step_cap(n)

    def block(state, cnt, idx):
        tails = np.zeros(4, dtype=np.int64)
        s, sq, cp = _k.k_exit_time(state, cnt, n2, cap, t_grid, tails)
        return s, sq, cp, tails

    tot = 0
    tot_sq = 0
    capped = 0
    tail_counts = np.zeros(4, dtype=np.int64)
    for s, sq, cp, tails in map_blocks(rng, replicas, block):
        tot += int(s)
        tot_sq += int(sq)
        capped += int(cp)
        tail_counts += tails
    if capped:
        raise HorizonExceeded(f"{capped} walks hit the step cap")
    mean = Estimate.from_moments(float(tot), float(tot_sq), replicas, rng)
    tails = tuple(
        (int(t_grid[j]), Estimate.from_binomial(int(tail_counts[j]), replicas, rng))
        for j in range(4)
    )
    return ExitTimeTail(mean=mean, tails=tails)


# ---------------------------------------------------------------------------
# Boundary layer occupation
# ---------------------------------------------------------------------------

def boundary_layer_tail(
    n: float, k: float, lam: float, replicas: int, rng: RandomStream
) -> Estimate:
    """P(#distinct trace points outside B(n-k) exceeds lam*k^2) for walks
    from the origin stopped on the boundary of B(n).

    The stop point always lies outside B(n-k), so for lam*k^2 < 1 the
    estimate is 1.
    """
    if not 0.0 < k < n:
        raise UsageError("need 0 < k < n")
    if not lam > 0.0:
        raise UsageError("lam must be positive")
    r2 = float(n) ** 2
    r2_inner = float(n - k) ** 2
    cap = default_step_cap(n)
    thresh = lam * k * k
    # worst case each step visits a fresh layer point, so the per-replica
    # key budget is the step cap
    tbl_size = 1 << max(10, int(cap * 2 - 1).bit_length())

    def block(state, cnt, idx):
        table = np.zeros(tbl_size, dtype=np.uint64)
        keybuf = np.zeros(cap, dtype=np.uint64)
        counts = np.zeros(cnt, dtype=np.int64)
        cp = _k.k_layer_counts(state, cnt, r2, r2_inner, cap, table, keybuf, counts)
        return int(np.count_nonzero(counts.astype(np.float64) > thresh)), int(cp)

    over = 0
    capped = 0
    for o, cp in map_blocks(rng, replicas, block):
        over += o
        capped += cp
    if capped:
        raise HorizonExceeded(f"{capped} walks hit the step cap")
    return Estimate.from_binomial(over, replicas, rng)


# ---------------------------------------------------------------------------
# Hitting measure on a distant sphere
# ---------------------------------------------------------------------------

def exit_point_counts(
    n: float, m: float, x, replicas: int, rng: RandomStream
):
    """Exit points on the boundary of B(m) for walks from x, as
    (packed_keys, counts) sorted by key; counts sum to replicas."""
    p = _as_point(x)
    _require_d4(p, "exit_point_counts")
    if not BallSpec(LatticePoint((0, 0, 0, 0)), float(n)).contains(p):
        raise UsageError("x must lie in B(n)")
    if not m >= 2 * n:
        raise UsageError("need m >= 2n")
    start = np.array(p.coords, dtype=np.int64)
    r2 = float(m) ** 2
    cap = default_step_cap(m)

    def block(state, cnt, idx):
        out = np.zeros(cnt, dtype=np.uint64)
        cp = _k.k_hitting_exits(state, cnt, start, r2, cap, out)
        return out, int(cp)

    parts = []
    capped = 0
    for out, cp in map_blocks(rng, replicas, block):
        parts.append(out)
        capped += cp
    if capped:
        raise HorizonExceeded(f"{capped} walks hit the step cap")
    keys, counts = np.unique(np.concatenate(parts), return_counts=True)
    return keys, counts


def hitting_measure_max(
    n: float, m: float, x, replicas: int, rng: RandomStream
) -> Estimate:
    """Largest empirical exit-point probability on the boundary of B(m)
    for walks from x in B(n), m >= 2n.  The product m^3 * value is the
    natural bound check; at desk replica counts the empirical maximum
    sits above the true maximum because most boundary cells hold only a
    handful of hits."""
    _, counts = exit_point_counts(n, m, x, replicas, rng)
    return Estimate.from_binomial(int(counts.max()), replicas, rng)


# ---------------------------------------------------------------------------
# Escape from a ball around the start
# ---------------------------------------------------------------------------

def escape_curved_boundary_prob(
    n: float, x, k: float, replicas: int, rng: RandomStream
) -> Estimate:
    """P(walk from x, stopped on the boundary of B(n), ever leaves
    B(x,k)).  The ratio value*k/(n-|x|) is the bound check.  For
    k >= 2n the event is impossible (every visited point stays within
    distance 2n of x) and the exact zero is returned unsimulated."""
    p = _as_point(x)
    _require_d4(p, "escape_curved_boundary_prob")
    if not BallSpec(LatticePoint((0, 0, 0, 0)), float(n)).contains(p):
        raise UsageError("x must lie in B(n)")
    if not k > 0.0:
        raise UsageError("k must be positive")
    if k >= 2.0 * n:
        return Estimate.exact(0.0, replicas, rng)
    start = np.array(p.coords, dtype=np.int64)
    r2 = float(n) ** 2
    cap = default_step_cap(n)
    k2 = float(k) * float(k)

    def block(state, cnt, idx):
        out = np.zeros(cnt, dtype=np.int64)
        cp = _k.k_escape_maxdisp(state, cnt, start, r2, cap, out)
        return int(np.count_nonzero(out.astype(np.float64) >= k2)), int(cp)

    left = 0
    capped = 0
    for c, cp in map_blocks(rng, replicas, block):
        left += c
        capped += cp
    if capped:
        raise HorizonExceeded(f"{capped} walks hit the step cap")
    return Estimate.from_binomial(left, replicas, rng)


# ---------------------------------------------------------------------------
# Inverse-square sum along a free walk
# ---------------------------------------------------------------------------

def inverse_square_samples(n: int, replicas: int, rng: RandomStream) -> np.ndarray:
    """Per-replica values of sum_{t=1..n} (|R(t)|+1)^{-2} along free
    walks from the origin, in block order."""
    if n < 1:
        raise UsageError("n must be a positive integer")

    def block(state, cnt, idx):
        out = np.zeros(cnt, dtype=np.float64)
        _k.k_invsq_sums(state, cnt, int(n), out)
        return (out,)

    return np.concatenate([out for (out,) in map_blocks(rng, replicas, block)])


def inverse_square_sum(n: int, rng: RandomStream) -> float:
    """One realization of the inverse-square sum.  n=1 is always 1/4:
    the first step lands at norm 1."""
    return float(inverse_square_samples(n, 1, rng)[0])
