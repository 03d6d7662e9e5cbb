"""Non-intersecting coupling of two walks, built by explicit matching.

The construction works on finite ensembles of fixed-length paths.  Two
ensembles are filtered down to their well-behaved cores, a bipartite graph
joins every cross pair whose chopped traces are disjoint and whose stop
points are far apart, a maximum matching is extracted, and the matched mass
becomes the deterministic part of a coupling measure whose marginals are
exact by construction.  Chaining such steps over a geometric radius
schedule drives two walkers outward while keeping their full traces
disjoint.

Everything here is deterministic given the stream: path order is the
enumeration (or sampling) order, the matching scans lexicographically, and
residual draws consume only the stream they are handed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as _k
from .errors import (
    BudgetExceeded,
    DegenerateFilter,
    HorizonExceeded,
    MarginalMismatch,
    StepFailed,
    UsageError,
)
from .estimators import Estimate, _as_point, thread_count
from .intersections import _farthest_grid, event_h_threshold
from .lattice import LatticePoint, ball, origin
from .streams import RandomStream
from .walker import (
    PathSet,
    WalkPath,
    _build_path_set,
    default_step_cap,
    enumerate_paths,
    sample_paths,
    walk_to_boundary,
)

ADJ_WORD_BUDGET = 1 << 26
HALL_ENUM_LIMIT = 20
_OFFSET = np.uint64(1 << 15)


# ---------------------------------------------------------------------------
# Small shared helpers
# ---------------------------------------------------------------------------

def default_separation(radius: float) -> float:
    """Endpoint-separation target at a radius: r / log2 r."""
    if radius <= 1.0:
        raise UsageError("separation rule needs radius > 1")
    return radius / math.log2(radius)


def _resolve_separation(separation, radius: float) -> float:
    """A number, a rule, or None (the default rule), clamped to what the
    boundary can geometrically deliver."""
    if separation is None:
        value = default_separation(radius)
    elif callable(separation):
        value = float(separation(radius))
    else:
        value = float(separation)
    if value < 0.0:
        raise UsageError("separation must be nonnegative")
    cap = 0.9 * (2.0 * radius)
    if value > cap:
        warnings.warn(
            "separation exceeds 0.9 of the boundary diameter; clamping",
            stacklevel=3,
        )
        value = cap
    return value


def pack_points(verts: np.ndarray) -> np.ndarray:
    """Sorted distinct packed keys of integer rows (padded to 4 columns)."""
    v = np.asarray(verts, dtype=np.int64)
    if v.ndim != 2:
        raise UsageError("expected a 2-d array of points")
    keys = np.zeros(len(v), dtype=np.uint64)
    for c in range(v.shape[1]):
        keys |= (v[:, c].astype(np.uint64) + _OFFSET) << np.uint64(16 * c)
    for c in range(v.shape[1], 4):
        keys |= _OFFSET << np.uint64(16 * c)
    return np.unique(keys)


def _sorted_stream(ps: PathSet) -> tuple[np.ndarray, np.ndarray]:
    # one (key, owner) stream over all chopped traces, sorted by key
    lens = ps.trace_off[1:] - ps.trace_off[:-1]
    ids = np.repeat(np.arange(len(ps), dtype=np.int64), lens)
    order = np.argsort(ps.trace_flat, kind="stable")
    return ps.trace_flat[order], ids[order]


def _dirs_of_vertices(verts: np.ndarray) -> np.ndarray:
    deltas = np.diff(np.asarray(verts, dtype=np.int64), axis=0)
    axes = np.nonzero(deltas)[1]
    signs = deltas[np.arange(len(deltas)), axes]
    return (2 * axes + (signs > 0)).astype(np.uint8)


# ---------------------------------------------------------------------------
# Event filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventSpec:
    """A named per-side keep filter over a path ensemble.

    Each side's predicate maps a PathSet to a boolean keep mask; a side
    with no predicate keeps everything.  Filters express the step's
    behavioural events: a path that fails any predicate is treated as
    falling in the bad event for its walker.
    """

    name: str
    left: Optional[Callable[[PathSet], np.ndarray]] = None
    right: Optional[Callable[[PathSet], np.ndarray]] = None

    @classmethod
    def both(cls, name: str, fn: Callable[[PathSet], np.ndarray]) -> "EventSpec":
        return cls(name, fn, fn)


def mask_stopped(ps: PathSet) -> np.ndarray:
    """Keep paths that reached the stop boundary within their length."""
    return ps.stop_indices >= 0


def mask_avoids(keys: np.ndarray) -> Callable[[PathSet], np.ndarray]:
    """Keep paths whose chopped trace avoids the given sorted key array."""
    keys = np.asarray(keys, dtype=np.uint64)

    def predicate(ps: PathSet) -> np.ndarray:
        if len(keys) == 0 or len(ps.trace_flat) == 0:
            return np.ones(len(ps), dtype=bool)
        idx = np.searchsorted(keys, ps.trace_flat)
        idx_c = np.minimum(idx, len(keys) - 1)
        hit = keys[idx_c] == ps.trace_flat
        touched = np.bitwise_or.reduceat(hit, ps.trace_off[:-1])
        return ~touched

    return predicate


# ---------------------------------------------------------------------------
# Bipartite instance
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BipartiteInstance:
    """Cross-pair compatibility between two path ensembles as a bitset.

    A left path is adjacent to a right path when their chopped traces are
    disjoint and their stop points sit strictly farther apart than
    `separation`.  The bitset is a cache; `recompute` re-derives any entry
    from raw data.
    """

    left: PathSet
    right: PathSet
    m: float
    separation: float
    adjacency: np.ndarray

    @property
    def words(self) -> int:
        return self.adjacency.shape[1]

    def adjacent(self, l: int, r: int) -> bool:
        return bool((self.adjacency[l, r >> 6] >> np.uint64(r & 63)) & np.uint64(1))

    def recompute(self, l: int, r: int) -> bool:
        common = np.intersect1d(self.left.trace_keys(l), self.right.trace_keys(r))
        if len(common):
            return False
        diff = self.left.endpoints[l] - self.right.endpoints[r]
        return float((diff * diff).sum()) > self.separation * self.separation

    def degrees(self) -> np.ndarray:
        return np.bitwise_count(self.adjacency).sum(axis=1).astype(np.int64)


def build_instance(
    left: PathSet,
    right: PathSet,
    m: float,
    separation,
) -> BipartiteInstance:
    """Adjacency bitset over left x right; separation may be a number, a
    rule, or None for the default rule at m."""
    sep = _resolve_separation(separation, float(m))
    nl, nr = len(left), len(right)
    words = max(1, (nr + 63) // 64)
    if nl * words > ADJ_WORD_BUDGET:
        raise BudgetExceeded(
            f"adjacency bitset needs {nl * words} words, budget {ADJ_WORD_BUDGET}"
        )
    cross = np.zeros((nl, words), dtype=np.uint64)
    sep_ok = np.zeros_like(cross)
    if nl and nr:
        lkeys, lids = _sorted_stream(left)
        rkeys, rids = _sorted_stream(right)
        _k.k_cross_hits(lkeys, lids, rkeys, rids, words, cross)
        _run_sep_blocks(left.endpoints, right.endpoints, sep * sep, sep_ok)
    adj = sep_ok & ~cross
    rem = nr & 63
    if rem:
        adj[:, -1] &= np.uint64((1 << rem) - 1)
    return BipartiteInstance(left, right, float(m), sep, adj)


def _run_sep_blocks(lends, rends, sep2, out_bits) -> None:
    # row blocks are disjoint, so threading stays deterministic
    nl = len(lends)
    nthreads = thread_count()
    if nthreads <= 1 or nl < 2048:
        _k.k_pair_sep_ok(lends, rends, sep2, out_bits)
        return
    from concurrent.futures import ThreadPoolExecutor

    block = (nl + nthreads - 1) // nthreads
    spans = [(a, min(a + block, nl)) for a in range(0, nl, block)]
    with ThreadPoolExecutor(max_workers=len(spans)) as ex:
        list(
            ex.map(
                lambda s: _k.k_pair_sep_ok(
                    lends[s[0]: s[1]], rends, sep2, out_bits[s[0]: s[1]]
                ),
                spans,
            )
        )


# ---------------------------------------------------------------------------
# Hall condition and matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HallResult:
    holds: bool
    matching_size: int
    violating_subset: Optional[tuple[int, ...]]


def _kuhn(instance: BipartiteInstance) -> tuple[int, np.ndarray, np.ndarray]:
    nl, nr = len(instance.left), len(instance.right)
    match_l = np.full(nl, -1, dtype=np.int64)
    match_r = np.full(nr, -1, dtype=np.int64)
    if nl and nr:
        size = int(_k.k_kuhn_match(instance.adjacency, nl, nr, match_l, match_r))
    else:
        size = 0
    return size, match_l, match_r


def hall_check(instance: BipartiteInstance) -> HallResult:
    """Certify that every left subset has enough neighbours, or exhibit one
    that does not.

    The certificate is a maximum matching: it saturates the left side
    exactly when the condition holds.  On failure the violating subset is
    the smallest one when the left side is small enough to scan, else the
    set of left vertices reachable by alternating search from an unmatched
    vertex, which is always deficient.
    """
    nl = len(instance.left)
    if nl > ADJ_WORD_BUDGET // max(1, instance.words):
        raise BudgetExceeded("instance too large for an exact certificate")
    size, match_l, match_r = _kuhn(instance)
    if size == nl:
        return HallResult(True, size, None)
    if nl <= HALL_ENUM_LIMIT:
        subset = _minimal_violator(instance)
    else:
        subset = _alternating_violator(instance, match_l, match_r)
    return HallResult(False, size, subset)


def _row_int(row: np.ndarray) -> int:
    return int.from_bytes(row.tobytes(), "little")


def _minimal_violator(instance: BipartiteInstance) -> tuple[int, ...]:
    from itertools import combinations

    masks = [_row_int(instance.adjacency[i]) for i in range(len(instance.left))]
    for k in range(1, len(masks) + 1):
        for subset in combinations(range(len(masks)), k):
            union = 0
            for i in subset:
                union |= masks[i]
            if union.bit_count() < k:
                return subset
    raise MarginalMismatch("matching deficient but no violating subset found")


def _alternating_violator(
    instance: BipartiteInstance, match_l: np.ndarray, match_r: np.ndarray
) -> tuple[int, ...]:
    in_s = match_l < 0
    while True:
        rows = instance.adjacency[in_s]
        reach = np.bitwise_or.reduce(rows, axis=0) if len(rows) else np.zeros(
            instance.words, dtype=np.uint64
        )
        nbr_lefts = set()
        for w in range(instance.words):
            bits = int(reach[w])
            while bits:
                b = bits & -bits
                r = w * 64 + b.bit_length() - 1
                bits ^= b
                owner = int(match_r[r])
                if owner >= 0:
                    nbr_lefts.add(owner)
        grown = in_s.copy()
        for owner in nbr_lefts:
            grown[owner] = True
        if grown.sum() == in_s.sum():
            return tuple(int(i) for i in np.nonzero(in_s)[0])
        in_s = grown


def max_matching(instance: BipartiteInstance) -> list[tuple[int, int]]:
    """Maximum-cardinality matching, deterministic in the path order."""
    size, match_l, _ = _kuhn(instance)
    out = [(int(l), int(match_l[l])) for l in range(len(instance.left))
           if match_l[l] >= 0]
    assert len(out) == size
    return out


# ---------------------------------------------------------------------------
# Coupling table
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoupledDraw:
    """One realized pair; row indexes into the referenced set."""

    kind: str
    left_set: PathSet
    left_row: int
    right_set: PathSet
    right_row: int

    def keys(self, side: str) -> np.ndarray:
        ps, row = (self.left_set, self.left_row) if side == "left" else (
            self.right_set, self.right_row)
        return ps.trace_keys(row)

    def endpoint(self, side: str) -> np.ndarray:
        ps, row = (self.left_set, self.left_row) if side == "left" else (
            self.right_set, self.right_row)
        return ps.endpoints[row]

    def stopped(self, side: str) -> bool:
        ps, row = (self.left_set, self.left_row) if side == "left" else (
            self.right_set, self.right_row)
        return int(ps.stop_indices[row]) >= 0


@dataclass(frozen=True, eq=False)
class CouplingTable:
    """A coupling of two uniform path ensembles.

    The deterministic part pairs each matched left path with its matched
    right path at exactly the path weight.  The residual mass couples the
    two leftover measures as an independent product; it is stored as a
    description plus the handles needed to draw from it, never enumerated.
    Weights are exact rationals throughout, so the marginal checks are
    equalities, not tolerances.
    """

    left: PathSet
    right: PathSet
    pairs: tuple[tuple[int, int], ...]
    pair_weight: Fraction
    residual_mass: Fraction
    residual_rule: str = "independent product of the leftover measures"
    left_universe: Optional[PathSet] = None
    right_universe: Optional[PathSet] = None
    left_rows: Optional[np.ndarray] = None
    right_rows: Optional[np.ndarray] = None

    @property
    def mu_mass(self) -> Fraction:
        return len(self.pairs) * self.pair_weight

    def verify(self) -> None:
        """Exact bookkeeping; a failure here is a bug, not bad data."""
        if self.left.path_weight != self.pair_weight:
            raise MarginalMismatch("pair weight disagrees with the left measure")
        if self.right.path_weight != self.pair_weight:
            raise MarginalMismatch("pair weight disagrees with the right measure")
        if self.left.universe_size != self.right.universe_size:
            raise MarginalMismatch("sides carry different universes")
        if self.mu_mass + self.residual_mass != 1:
            raise MarginalMismatch("weights do not sum to one")
        lefts = {l for l, _ in self.pairs}
        rights = {r for _, r in self.pairs}
        if len(lefts) != len(self.pairs) or len(rights) != len(self.pairs):
            raise MarginalMismatch("a path appears in two pairs")

    def left_marginal(self) -> dict[int, Fraction]:
        return {l: self.pair_weight for l, _ in self.pairs}

    def right_marginal(self) -> dict[int, Fraction]:
        return {r: self.pair_weight for _, r in self.pairs}

    @cached_property
    def _matched_by_left_key(self) -> dict[int, tuple[int, int]]:
        if self.left.exact:
            return {self._word(self.left, l): (l, r) for l, r in self.pairs}
        return {int(self.left_rows[l]): (l, r) for l, r in self.pairs}

    @cached_property
    def _matched_right_keys(self) -> frozenset:
        if self.right.exact:
            return frozenset(self._word(self.right, r) for _, r in self.pairs)
        return frozenset(int(self.right_rows[r]) for _, r in self.pairs)

    @staticmethod
    def _word(ps: PathSet, row: int) -> int:
        base = 2 * ps.d
        word = 0
        for digit in ps.dirs[row]:
            word = word * base + int(digit)
        return word

    def _single(self, ps: PathSet, word: int) -> PathSet:
        digits = np.empty((1, ps.n_steps), dtype=np.uint8)
        base = 2 * ps.d
        for t in range(ps.n_steps - 1, -1, -1):
            digits[0, t] = word % base
            word //= base
        return _build_path_set(digits, ps.start, ps.stop_radius, exact=False)

    def sample_pair(self, rng: RandomStream) -> CoupledDraw:
        """One draw from the full coupling.

        The left item is drawn uniformly from its universe; a matched item
        brings its partner deterministically, anything else pairs with an
        independent uniform draw from the unmatched right mass.
        """
        gen = rng.generator()
        if self.left.exact:
            universe = self.left.universe_size
            u = int(gen.integers(universe))
            hit = self._matched_by_left_key.get(u)
            if hit is not None:
                return CoupledDraw("matched", self.left, hit[0], self.right, hit[1])
            while True:
                v = int(gen.integers(universe))
                if v not in self._matched_right_keys:
                    break
            return CoupledDraw(
                "residual", self._single(self.left, u), 0,
                self._single(self.right, v), 0,
            )
        if self.left_universe is None or self.right_universe is None:
            raise UsageError(
                "residual draws from a sampled table need the originating "
                "ensembles"
            )
        u = int(gen.integers(len(self.left_universe)))
        hit = self._matched_by_left_key.get(u)
        if hit is not None:
            return CoupledDraw("matched", self.left, hit[0], self.right, hit[1])
        while True:
            v = int(gen.integers(len(self.right_universe)))
            if v not in self._matched_right_keys:
                break
        return CoupledDraw("residual", self.left_universe, u,
                           self.right_universe, v)


def coupling_measure(
    matching: Sequence[tuple[int, int]],
    left: PathSet,
    right: PathSet,
    rng: Optional[RandomStream] = None,
    *,
    left_universe: Optional[PathSet] = None,
    right_universe: Optional[PathSet] = None,
    left_rows: Optional[np.ndarray] = None,
    right_rows: Optional[np.ndarray] = None,
) -> CouplingTable:
    """Assemble the coupling from a matching over the same two sets.

    The table itself is deterministic; `rng` is accepted for signature
    parity with the rest of the pipeline and unused, since all randomness
    lives in later draws.  Sampled-mode tables need the originating
    ensembles (and row maps into them) to realize residual draws.
    """
    pairs = tuple((int(l), int(r)) for l, r in matching)
    weight = left.path_weight
    table = CouplingTable(
        left=left,
        right=right,
        pairs=pairs,
        pair_weight=weight,
        residual_mass=1 - len(pairs) * weight,
        left_universe=left_universe,
        right_universe=right_universe,
        left_rows=None if left_rows is None else np.asarray(left_rows),
        right_rows=None if right_rows is None else np.asarray(right_rows),
    )
    table.verify()
    return table


# ---------------------------------------------------------------------------
# Path-set construction with filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _FilteredSets:
    full1: PathSet
    full2: PathSet
    a1: PathSet
    a2: PathSet
    rows1: np.ndarray
    rows2: np.ndarray
    event_frac1: float
    event_frac2: float
    hit_frac1: float
    hit_frac2: float
    mu_hat: float
    epsilon_used: float
    event_detail: dict


def _event_masks(ps: PathSet, events: Sequence[EventSpec], side: str):
    kept = np.ones(len(ps), dtype=bool)
    detail = {}
    for ev in events:
        fn = ev.left if side == "left" else ev.right
        if fn is None:
            continue
        mask = np.asarray(fn(ps), dtype=bool)
        if mask.shape != (len(ps),):
            raise UsageError(f"event {ev.name!r} returned a mask of wrong shape")
        detail[ev.name] = float(1.0 - mask.mean()) if len(ps) else 0.0
        kept &= mask
    return kept, detail


def _hit_fractions(ps: PathSet, probes: PathSet) -> np.ndarray:
    budget = len(probes)
    words = max(1, (budget + 63) // 64)
    out = np.zeros((len(ps), words), dtype=np.uint64)
    if len(ps) and budget:
        lkeys, lids = _sorted_stream(ps)
        rkeys, rids = _sorted_stream(probes)
        _k.k_cross_hits(lkeys, lids, rkeys, rids, words, out)
    return np.bitwise_count(out).sum(axis=1) / float(budget)


def _filtered_sets(
    s1: LatticePoint,
    s2: LatticePoint,
    T: int,
    m: float,
    epsilon_filter,
    hittability_budget: int,
    rng: RandomStream,
    events: Sequence[EventSpec],
    sample_size: Optional[int],
) -> _FilteredSets:
    if T < 1:
        raise UsageError("T must be a positive integer")
    if m <= max(s1.norm(), s2.norm()):
        raise UsageError("both starts must lie strictly inside B(m)")
    if hittability_budget < 1:
        raise UsageError("hittability_budget must be a positive integer")
    if epsilon_filter is not None and not 0.0 <= float(epsilon_filter) < 1.0:
        raise UsageError("epsilon_filter must lie in [0, 1) or be None")

    if sample_size is None:
        full1 = enumerate_paths(s1, T, stop_radius=m)
        full2 = enumerate_paths(s2, T, stop_radius=m)
    else:
        if sample_size < 2:
            raise UsageError("sample_size must be at least 2")
        full1 = sample_paths(s1, T, sample_size, rng.child(0), stop_radius=m)
        full2 = sample_paths(s2, T, sample_size, rng.child(1), stop_radius=m)

    kept1, det1 = _event_masks(full1, events, "left")
    kept2, det2 = _event_masks(full2, events, "right")
    frac1 = float(1.0 - kept1.mean())
    frac2 = float(1.0 - kept2.mean())
    for side, frac in (("left", frac1), ("right", frac2)):
        if frac > 0.9:
            raise DegenerateFilter(
                f"event filters removed {frac:.1%} of the {side} ensemble"
            )

    n_entry = max(2.0, 0.5 * (s1.norm() + s2.norm()))
    mu_hat = frac1 + frac2 + 1.0 / math.log2(n_entry)
    if epsilon_filter is None:
        eps = 3.0 * mu_hat
        if eps >= 1.0:
            # the hittability criterion is vacuous once 1 - 3*mu drops
            # through zero, which is the rule rather than the exception at
            # small radii
            warnings.warn(
                "hittability filter disabled: 3*(bad mass + 1/log2 n) >= 1",
                stacklevel=3,
            )
            eps = 0.0
    else:
        eps = float(epsilon_filter)

    rows1 = np.nonzero(kept1)[0]
    rows2 = np.nonzero(kept2)[0]
    a1 = full1.subset(rows1)
    a2 = full2.subset(rows2)
    hit1 = hit2 = 0.0
    if eps > 0.0:
        probes_for_1 = sample_paths(s2, T, hittability_budget, rng.child(2),
                                    stop_radius=m)
        probes_for_2 = sample_paths(s1, T, hittability_budget, rng.child(3),
                                    stop_radius=m)
        ok1 = _hit_fractions(a1, probes_for_1) <= 1.0 - eps
        ok2 = _hit_fractions(a2, probes_for_2) <= 1.0 - eps
        hit1 = float(1.0 - ok1.mean()) if len(a1) else 0.0
        hit2 = float(1.0 - ok2.mean()) if len(a2) else 0.0
        for side, frac in (("left", hit1), ("right", hit2)):
            if frac > 0.9:
                raise DegenerateFilter(
                    f"hittability filter removed {frac:.1%} of the {side} "
                    "ensemble"
                )
        rows1 = rows1[ok1]
        rows2 = rows2[ok2]
        a1 = a1.subset(np.nonzero(ok1)[0])
        a2 = a2.subset(np.nonzero(ok2)[0])

    return _FilteredSets(
        full1=full1, full2=full2, a1=a1, a2=a2, rows1=rows1, rows2=rows2,
        event_frac1=frac1, event_frac2=frac2, hit_frac1=hit1, hit_frac2=hit2,
        mu_hat=mu_hat, epsilon_used=eps,
        event_detail={"left": det1, "right": det2},
    )


def build_path_sets(
    s1,
    s2,
    T: int,
    m: float,
    epsilon_filter,
    hittability_budget: int,
    rng: RandomStream,
    *,
    events: Sequence[EventSpec] = (),
    sample_size: Optional[int] = None,
) -> tuple[PathSet, PathSet]:
    """The two filtered ensembles a coupling step works on.

    Each side starts from every (or, in sampled mode, N independently drawn)
    length-T paths from its start, chopped at the boundary of B(m).  Event
    filters go first; then, when the threshold is live, paths that the
    opposite walker would hit with estimated probability above
    1 - epsilon_filter are dropped.  epsilon_filter=None derives the
    threshold as three times the measured bad mass plus 1/log2 n, and backs
    off to no filtering when that exceeds one.  Probe walks are shared
    across paths of a side, so the per-path estimates are common-random and
    the filtered set is deterministic given the stream.
    """
    p1 = _as_point(s1)
    p2 = _as_point(s2)
    if p1.d != 4 or p2.d != 4:
        raise UsageError("path-set filtering requires d=4 starts")
    fs = _filtered_sets(p1, p2, T, float(m), epsilon_filter,
                        hittability_budget, rng, events, sample_size)
    return fs.a1, fs.a2

# ---------------------------------------------------------------------------
# One coupled step
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OneStepResult:
    table: CouplingTable
    success_prob: Estimate
    instance: BipartiteInstance
    hall: Optional[HallResult]
    record: dict


def one_step_couple(
    s1,
    s2,
    n: float,
    m: float,
    T: int,
    event_specs: Sequence[EventSpec],
    rng: RandomStream,
    *,
    separation=None,
    sample_size: Optional[int] = None,
    hittability_budget: int = 64,
    epsilon_filter=None,
) -> OneStepResult:
    """One radius-doubling stage of the coupling, start to finish.

    Builds the filtered ensembles from two separated points on the
    boundary of B(n), joins compatible cross pairs, matches, and wraps the
    matching in an exact-marginal coupling table.  The success probability
    is the matched mass: the chance that a draw from the table produces a
    disjoint, endpoint-separated pair that passed every filter.  In exact
    mode that mass is a rational number reported without error bars; in
    sampled mode the binomial error bar treats matched indicators as
    independent, which matching makes slightly optimistic.
    """
    p1 = _as_point(s1)
    p2 = _as_point(s2)
    n = float(n)
    m = float(m)
    if n <= 1.0:
        raise UsageError("n must exceed 1")
    spec_n = ball(n)
    for label, p in (("s1", p1), ("s2", p2)):
        if not spec_n.on_boundary(p):
            raise UsageError(f"{label} must lie on the boundary shell of B(n)")
    entry_sep = _resolve_separation(separation, n)
    gap = math.dist(p1.coords, p2.coords)
    if not gap > entry_sep:
        raise UsageError(
            f"starts are {gap:.3f} apart, need more than {entry_sep:.3f}"
        )
    if m < 2.0 * n or m > n * math.exp(4.0 * math.sqrt(math.log2(n))):
        warnings.warn(
            "m outside [2n, n*exp(4 sqrt(log2 n))]; the step still runs",
            stacklevel=2,
        )
    fs = _filtered_sets(p1, p2, T, m, epsilon_filter, hittability_budget,
                        rng.child(0), event_specs, sample_size)
    instance = build_instance(fs.a1, fs.a2, m, separation)
    hall = hall_check(instance) if fs.a1.exact else None
    matching = max_matching(instance)
    table = coupling_measure(
        matching, fs.a1, fs.a2,
        left_universe=None if fs.a1.exact else fs.full1,
        right_universe=None if fs.a2.exact else fs.full2,
        left_rows=None if fs.a1.exact else fs.rows1,
        right_rows=None if fs.a2.exact else fs.rows2,
    )
    if fs.a1.exact:
        success = Estimate.exact(float(table.mu_mass), fs.a1.universe_size, rng)
    else:
        success = Estimate.from_binomial(len(matching), len(fs.full1), rng)
    record = {
        "mode": "exact" if fs.a1.exact else "sampled",
        "size_a1": len(fs.a1),
        "size_a2": len(fs.a2),
        "universe": fs.full1.universe_size,
        "coverage1": fs.a1.coverage,
        "coverage2": fs.a2.coverage,
        "event_removed": (fs.event_frac1, fs.event_frac2),
        "event_detail": fs.event_detail,
        "hittability_removed": (fs.hit_frac1, fs.hit_frac2),
        "mu_hat": fs.mu_hat,
        "epsilon_used": fs.epsilon_used,
        "separation": instance.separation,
        "matching_size": len(matching),
        "hall_holds": None if hall is None else hall.holds,
    }
    return OneStepResult(table, success, instance, hall, record)


# ---------------------------------------------------------------------------
# Multiscale schedule
# ---------------------------------------------------------------------------

STEP_CONDITIONS = ("no_event_h", "endpoint_separation", "trace_disjoint")


@dataclass(frozen=True)
class ScheduleStep:
    """One stage of the outward drive.

    `separation` is the entry requirement: how far apart the walkers'
    endpoints must already be on the boundary of B(inner_radius) when the
    stage begins (zero for the opening stage, whose walkers start near the
    origin).  `events` names the conditions the stage enforces on exit.
    """

    index: int
    inner_radius: float
    outer_radius: float
    separation: float
    events: tuple[str, ...] = STEP_CONDITIONS


def make_schedule(radii: Sequence[float], separation=None) -> tuple[ScheduleStep, ...]:
    """Stages for a strictly increasing radius list; each outer radius must
    be at least twice the inner one."""
    rs = [float(r) for r in radii]
    if not rs:
        raise UsageError("schedule needs at least one radius")
    if rs[0] < 2.0:
        raise UsageError("the first radius must be at least 2")
    steps = []
    for i, outer in enumerate(rs):
        inner = 1.0 if i == 0 else rs[i - 1]
        if outer < 2.0 * inner:
            raise UsageError(
                f"radius {outer} is less than twice its predecessor {inner}"
            )
        sep = 0.0 if i == 0 else _resolve_separation(separation, inner)
        steps.append(ScheduleStep(i + 1, inner, outer, sep))
    return tuple(steps)


def _default_t_rule(step: ScheduleStep) -> int:
    return int(math.ceil(6.0 * step.outer_radius ** 2))


# ---------------------------------------------------------------------------
# Event H indicator for drive conditions
# ---------------------------------------------------------------------------

def _h_holds(
    keys: np.ndarray,
    end: np.ndarray,
    r: float,
    c1: float,
    rng: RandomStream,
    grid_size: int,
    inner: int,
    horizon_factor: float = 8.0,
) -> bool:
    """Does the far-visibility event hold for one stopped trace?

    Exclusion distance is r/log2 r, matching the drive's separation scale.
    At one and above the threshold is unreachable and the answer is an
    exact no, with no simulation.
    """
    k = r / math.log2(r)
    thr = event_h_threshold(r, k, c1)
    if thr >= 1.0:
        return False
    grid = _farthest_grid(r, grid_size)
    sep2 = ((grid - end.astype(np.float64)) ** 2).sum(axis=1)
    tbl_size = 1 << max(13, int(len(keys) / 0.6).bit_length())
    table = np.zeros(tbl_size, dtype=np.uint64)
    _k.k_insert_keys(table, keys)
    radius = horizon_factor * r
    r2t = radius * radius
    cap = default_step_cap(radius)
    try:
        for zi in np.nonzero(sep2 > k * k)[0]:
            st = rng.child(int(zi)).kernel_state(0)
            hits, capped = _k.k_hit_trace(st, inner, grid[zi], table, r2t,
                                          False, cap)
            if capped:
                raise HorizonExceeded("probing walk exceeded its budget")
            if hits / inner > thr:
                return True
        return False
    finally:
        _k.k_clear_keys(table, keys, len(keys))


# ---------------------------------------------------------------------------
# The drive
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DriveResult:
    """Everything one drive produced, success or not.

    `p_sequence` is the running product of per-stage success masses, one
    entry per completed stage; it can only fall.  `segments1`/`segments2`
    replay as direction words: each record carries the start, the full
    direction list, and the stop index to chop at.
    """

    success: bool
    failed_step: Optional[int]
    reason: Optional[str]
    steps: tuple[dict, ...]
    p_sequence: tuple[float, ...]
    disjoint: bool
    segments1: tuple[dict, ...]
    segments2: tuple[dict, ...]
    seed: int


def _segment_record(start, dirs: np.ndarray, stop_index: int) -> dict:
    return {
        "start": [int(c) for c in start],
        "dirs": [int(d) for d in dirs],
        "stop_index": int(stop_index),
    }


def _draw_segment(draw: CoupledDraw, side: str) -> dict:
    ps, row = (draw.left_set, draw.left_row) if side == "left" else (
        draw.right_set, draw.right_row)
    return _segment_record(ps.start, ps.dirs[row], int(ps.stop_indices[row]))


def multiscale_drive(
    schedule: Sequence[ScheduleStep],
    T_rule: Optional[Callable[[ScheduleStep], int]] = None,
    rng: Optional[RandomStream] = None,
    *,
    start=(1, 0, 0, 0),
    sample_size: int = 192,
    hittability_budget: int = 24,
    epsilon_filter=None,
    separation=None,
    c1: float = 1.0,
    h_grid: int = 16,
    h_inner: int = 24,
    step1_budget: int = 10_000,
    strict: bool = False,
) -> DriveResult:
    """Chain coupling stages outward along the schedule.

    The opening stage rejects independent walker pairs until one reaches
    the first radius satisfying all three conditions: neither trace admits
    a far boundary point with high conditional hit probability, the stop
    points are separated, and the traces are disjoint.  Every later stage
    runs one coupled step conditioned on the partner pasts, draws a single
    pair from its table, and continues only if the draw satisfies the same
    conditions against the accumulated history.  With `strict` the first
    failure raises; otherwise it is recorded and returned.
    """
    steps = tuple(schedule)
    if not steps:
        raise UsageError("schedule must be non-empty")
    if rng is None:
        raise UsageError("multiscale_drive needs a RandomStream")
    if T_rule is None:
        T_rule = _default_t_rule
    x0 = _as_point(start)
    if x0.d != 4:
        raise UsageError("drive start must be a Z^4 point")
    first = steps[0]
    if not x0.norm() < first.outer_radius:
        raise UsageError("drive start must lie inside the first radius")

    records: list[dict] = []
    p_seq: list[float] = []
    segs1: list[dict] = []
    segs2: list[dict] = []

    def finish(success, failed_step, reason, past1, past2):
        disjoint = bool(len(np.intersect1d(past1, past2)) == 0)
        if not success and strict:
            raise StepFailed(failed_step, reason)
        return DriveResult(
            success=success, failed_step=failed_step, reason=reason,
            steps=tuple(records), p_sequence=tuple(p_seq), disjoint=disjoint,
            segments1=tuple(segs1), segments2=tuple(segs2), seed=rng.seed,
        )

    # opening stage: independent pairs until the conditions hold
    r1 = first.outer_radius
    exit_sep = _resolve_separation(separation, r1)
    spec1 = ball(r1)
    o = origin(4)
    accepted = None
    attempts = 0
    for attempt in range(step1_budget):
        attempts = attempt + 1
        sub = rng.child(1, attempt)
        w1 = walk_to_boundary(o, spec1, sub.child(0))
        w2 = walk_to_boundary(x0, spec1, sub.child(1))
        if not w1.trace().isdisjoint(w2.trace()):
            continue
        e1 = np.asarray(w1.endpoint().coords, dtype=np.int64)
        e2 = np.asarray(w2.endpoint().coords, dtype=np.int64)
        if not float(((e1 - e2) ** 2).sum()) > exit_sep * exit_sep:
            continue
        k1 = pack_points(w1.vertices[: w1.stop_index + 1])
        k2 = pack_points(w2.vertices[: w2.stop_index + 1])
        if _h_holds(k1, e1, r1, c1, sub.child(2), h_grid, h_inner):
            continue
        if _h_holds(k2, e2, r1, c1, sub.child(3), h_grid, h_inner):
            continue
        accepted = (w1, w2, k1, k2, e1, e2)
        break
    if accepted is None:
        records.append({"index": first.index, "outer": r1,
                        "attempts": attempts, "accepted": False})
        return finish(False, first.index,
                      f"no accepted pair in {attempts} attempts",
                      np.empty(0, np.uint64), np.empty(0, np.uint64))
    w1, w2, past1, past2, end1, end2 = accepted
    p1 = 1.0 / attempts
    p_seq.append(p1)
    records.append({
        "index": first.index, "outer": r1, "attempts": attempts,
        "accepted": True, "success_prob": p1, "p_n": p1,
    })
    segs1.append(_segment_record(w1.vertices[0], _dirs_of_vertices(
        w1.vertices[: w1.stop_index + 1]), w1.stop_index))
    segs2.append(_segment_record(w2.vertices[0], _dirs_of_vertices(
        w2.vertices[: w2.stop_index + 1]), w2.stop_index))

    for step in steps[1:]:
        sub = rng.child(step.index, 0)
        T = int(T_rule(step))
        events = (
            EventSpec.both("reaches_boundary", mask_stopped),
            EventSpec("avoids_partner_past",
                      left=mask_avoids(past2), right=mask_avoids(past1)),
        )
        s1p = LatticePoint(tuple(int(c) for c in end1))
        s2p = LatticePoint(tuple(int(c) for c in end2))
        try:
            result = one_step_couple(
                s1p, s2p, step.inner_radius, step.outer_radius, T, events,
                sub.child(0),
                separation=separation, sample_size=sample_size,
                hittability_budget=hittability_budget,
                epsilon_filter=epsilon_filter,
            )
        except (DegenerateFilter, BudgetExceeded) as exc:
            records.append({"index": step.index, "outer": step.outer_radius,
                            "error": str(exc)})
            return finish(False, step.index, str(exc), past1, past2)
        draw = result.table.sample_pair(sub.child(1))
        rec = dict(result.record)
        rec.update({"index": step.index, "inner": step.inner_radius,
                    "outer": step.outer_radius,
                    "success_prob": result.success_prob.value,
                    "stderr": result.success_prob.stderr,
                    "draw_kind": draw.kind})
        new1 = draw.keys("left")
        new2 = draw.keys("right")
        e1n = draw.endpoint("left")
        e2n = draw.endpoint("right")
        sep_out = _resolve_separation(separation, step.outer_radius)
        conditions = {
            "reached": draw.stopped("left") and draw.stopped("right"),
            "trace_disjoint": len(np.intersect1d(new1, new2)) == 0,
            "avoids_past": (len(np.intersect1d(new1, past2)) == 0
                            and len(np.intersect1d(new2, past1)) == 0),
            "endpoint_separation":
                float(((e1n - e2n) ** 2).sum()) > sep_out * sep_out,
        }
        if all(conditions.values()):
            conditions["no_event_h"] = not (
                _h_holds(new1, e1n, step.outer_radius, c1, sub.child(2),
                         h_grid, h_inner)
                or _h_holds(new2, e2n, step.outer_radius, c1, sub.child(3),
                            h_grid, h_inner)
            )
        rec["conditions"] = conditions
        p_seq.append(p_seq[-1] * result.success_prob.value)
        rec["p_n"] = p_seq[-1]
        records.append(rec)
        failed = [name for name, ok in conditions.items() if not ok]
        if failed:
            return finish(False, step.index,
                          "conditions failed: " + ", ".join(failed),
                          past1, past2)
        if draw.kind == "matched":
            assert result.instance.adjacent(draw.left_row, draw.right_row)
        segs1.append(_draw_segment(draw, "left"))
        segs2.append(_draw_segment(draw, "right"))
        past1 = np.union1d(past1, new1)
        past2 = np.union1d(past2, new2)
        end1, end2 = e1n, e2n

    return finish(True, None, None, past1, past2)
