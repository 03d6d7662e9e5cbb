"""Seeded random walks and path ensembles.

Two walk representations live here:

  * WalkPath: one concrete walk with its full vertex sequence.  Produced by
    walk_to_boundary and walk_fixed_length.  Fine for desk-scale inspection
    and for anything that needs actual positions (good-time classification,
    demos, tests).

  * PathSet: a batch of fixed-length paths stored as direction codes with
    precomputed stop indices, endpoints, and chopped traces.  This is the
    currency of the coupling pipeline.  A PathSet is either exact (every one
    of the (2d)^T direction words, each carrying weight 1/(2d)^T) or
    empirical (N sampled paths, each carrying weight 1/N).  Weights are
    Fractions so downstream coupling identities can be checked exactly.

Direction codes follow the package convention: code k moves along axis
k // 2, negatively for even k, positively for odd k.

Every sampling function takes a RandomStream.  Calling the same function
with the same stream twice gives the same result; worker threads elsewhere
never share streams.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import IO, Optional

import numpy as np

from .errors import BudgetExceeded, HorizonExceeded, UsageError
from .lattice import BallSpec, LatticePoint
from .streams import RandomStream

ENUM_BUDGET = 1 << 24


def default_step_cap(radius: float) -> int:
    """Step cap for walks stopped at a ball boundary.

    Exit times concentrate around radius^2; the cap is 64 radius^2
    log2(radius + 2), generous enough that hitting it signals a bug or an
    absurd parameter rather than bad luck.
    """
    r = max(2.0, float(radius))
    return int(math.ceil(64.0 * r * r * math.log2(r + 2.0)))


def _dirs_to_deltas(dirs: np.ndarray, d: int) -> np.ndarray:
    n = dirs.shape[0]
    axis = (dirs >> 1).astype(np.int64)
    sign = (dirs & 1).astype(np.int64) * 2 - 1
    deltas = np.zeros((n, d), dtype=np.int64)
    deltas[np.arange(n), axis] = sign
    return deltas


def positions_from_dirs(dirs: np.ndarray, start: tuple[int, ...]) -> np.ndarray:
    """Vertex rows (len(dirs)+1, d) of the path with the given direction codes."""
    d = len(start)
    deltas = _dirs_to_deltas(np.asarray(dirs, dtype=np.uint8), d)
    out = np.empty((len(dirs) + 1, d), dtype=np.int64)
    out[0] = start
    np.cumsum(deltas, axis=0, out=out[1:])
    out[1:] += np.asarray(start, dtype=np.int64)
    return out


@dataclass(frozen=True, eq=False)
class WalkPath:
    """One realized walk.

    vertices holds every position, including any extension recorded past the
    stopping time.  stop_index is the vertex index of the first boundary
    visit, or None if the walk was not stopped by a ball.
    """

    vertices: np.ndarray
    stop_index: Optional[int]
    ball: Optional[BallSpec]

    @property
    def d(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_steps(self) -> int:
        return self.vertices.shape[0] - 1

    @property
    def stopped(self) -> bool:
        return self.stop_index is not None

    def start(self) -> LatticePoint:
        return LatticePoint(tuple(int(c) for c in self.vertices[0]))

    def endpoint(self) -> LatticePoint:
        """Position at the stopping time, or the final position if unstopped."""
        i = self.stop_index if self.stop_index is not None else -1
        return LatticePoint(tuple(int(c) for c in self.vertices[i]))

    def position(self, t: int) -> LatticePoint:
        return LatticePoint(tuple(int(c) for c in self.vertices[t]))

    def trace(self, chopped: bool = True) -> frozenset[tuple[int, ...]]:
        """Set of visited points.

        With chopped=True (the default) the trace ends at the stopping time,
        which is the only notion of trace the estimators and the coupling
        pipeline ever use; extensions past the stop are excluded.
        """
        if chopped and self.stop_index is not None:
            v = self.vertices[: self.stop_index + 1]
        else:
            v = self.vertices
        return frozenset(map(tuple, v.tolist()))


def walk_fixed_length(
    start: LatticePoint,
    n_steps: int,
    rng: RandomStream,
    stop_ball: Optional[BallSpec] = None,
) -> WalkPath:
    """A walk of exactly n_steps steps from `start`.

    When stop_ball is given, stop_index records the first visit to its inner
    vertex boundary (the vertices past it are kept, as an extension).
    """
    if n_steps < 0:
        raise UsageError("n_steps must be nonnegative")
    d = start.d
    gen = rng.generator()
    dirs = gen.integers(0, 2 * d, size=n_steps, dtype=np.uint8)
    verts = positions_from_dirs(dirs, start.coords)
    stop = _first_boundary_visit(verts, stop_ball)
    return WalkPath(vertices=verts, stop_index=stop, ball=stop_ball)


def _first_boundary_visit(verts: np.ndarray, ball: Optional[BallSpec]) -> Optional[int]:
    if ball is None:
        return None
    center = np.asarray(ball.center.coords, dtype=np.int64)
    rel = verts - center
    ns = np.einsum("ij,ij->i", rel, rel)
    mx = np.abs(rel).max(axis=1)
    r2 = ball.radius_sq
    hit = (ns < r2) & (ns + 2 * mx + 1 >= r2)
    idx = np.nonzero(hit)[0]
    return int(idx[0]) if len(idx) else None


def walk_to_boundary(
    start: LatticePoint,
    ball: BallSpec,
    rng: RandomStream,
    extension: int = 0,
    step_cap: Optional[int] = None,
    chunk: int = 512,
) -> WalkPath:
    """A walk from `start` run until its first visit to the boundary of
    `ball`, plus `extension` further steps recorded past the stop.

    The start must lie in the ball.  Raises HorizonExceeded if the stop has
    not happened after step_cap steps (default: default_step_cap(radius)).
    """
    region = ball.classify(start)
    if region == "outside":
        raise UsageError("walk_to_boundary start lies outside the ball")
    if step_cap is None:
        step_cap = default_step_cap(ball.radius)
    d = start.d
    gen = rng.generator()
    center = np.asarray(ball.center.coords, dtype=np.int64)
    r2 = ball.radius_sq

    pieces: list[np.ndarray] = [np.asarray([start.coords], dtype=np.int64)]
    taken = 0
    stop: Optional[int] = 0 if region == "boundary" else None
    pos = np.asarray(start.coords, dtype=np.int64)
    while stop is None:
        if taken >= step_cap:
            raise HorizonExceeded(
                f"no boundary visit within {step_cap} steps "
                f"(radius {ball.radius:g})"
            )
        n = min(chunk, step_cap - taken)
        dirs = gen.integers(0, 2 * d, size=n, dtype=np.uint8)
        deltas = _dirs_to_deltas(dirs, d)
        block = pos + np.cumsum(deltas, axis=0)
        rel = block - center
        ns = np.einsum("ij,ij->i", rel, rel)
        mx = np.abs(rel).max(axis=1)
        hit = (ns < r2) & (ns + 2 * mx + 1 >= r2)
        idx = np.nonzero(hit)[0]
        if len(idx):
            first = int(idx[0])
            pieces.append(block[: first + 1])
            stop = taken + first + 1
            taken += first + 1
        else:
            pieces.append(block)
            pos = block[-1]
            taken += n
    if extension > 0:
        dirs = gen.integers(0, 2 * d, size=extension, dtype=np.uint8)
        deltas = _dirs_to_deltas(dirs, d)
        last = pieces[-1][-1]
        pieces.append(last + np.cumsum(deltas, axis=0))
    verts = np.concatenate(pieces, axis=0)
    return WalkPath(vertices=verts, stop_index=stop, ball=ball)


# ---------------------------------------------------------------------------
# Path ensembles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathSet:
    """Fixed-length paths as direction codes plus derived per-path metadata.

    stop_indices[i] is the vertex index of path i's first visit to the inner
    vertex boundary of the stop ball (origin-centered, radius stop_radius),
    or -1 when the path never stops (or no stop ball was given).  endpoints
    holds the position at the stop when stopped, else the final position.
    Traces are the sorted distinct packed points of the chopped path,
    concatenated in trace_flat with trace_off delimiting path i.

    universe_size is the denominator of every path weight: (2d)^T for exact
    sets and the original sample count for empirical ones.  Subsets keep it,
    so a subset's total weight is the exact probability mass it represents.
    """

    dirs: np.ndarray
    start: tuple[int, ...]
    stop_radius: Optional[float]
    exact: bool
    universe_size: int
    stop_indices: np.ndarray
    endpoints: np.ndarray
    trace_flat: np.ndarray
    trace_off: np.ndarray

    @property
    def d(self) -> int:
        return len(self.start)

    @property
    def n_steps(self) -> int:
        return self.dirs.shape[1]

    def __len__(self) -> int:
        return self.dirs.shape[0]

    @property
    def path_weight(self) -> Fraction:
        """Probability mass carried by each single path."""
        return Fraction(1, self.universe_size)

    @property
    def total_weight(self) -> Fraction:
        return Fraction(len(self), self.universe_size)

    @property
    def coverage(self) -> float:
        """Fraction of paths that reached the stop boundary."""
        if len(self) == 0:
            return 0.0
        return float((self.stop_indices >= 0).mean())

    def vertices(self, i: int) -> np.ndarray:
        return positions_from_dirs(self.dirs[i], self.start)

    def trace_keys(self, i: int) -> np.ndarray:
        """Sorted distinct packed points of path i, chopped at its stop."""
        return self.trace_flat[self.trace_off[i]: self.trace_off[i + 1]]

    def endpoint(self, i: int) -> LatticePoint:
        return LatticePoint(tuple(int(c) for c in self.endpoints[i, : self.d]))

    def subset(self, idx: np.ndarray) -> "PathSet":
        """The paths at the given indices, keeping universe bookkeeping."""
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.nonzero(idx)[0]
        lens = self.trace_off[1:] - self.trace_off[:-1]
        new_lens = lens[idx]
        new_off = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(new_lens, out=new_off[1:])
        flat = np.empty(int(new_off[-1]), dtype=np.uint64)
        for k, i in enumerate(idx):
            flat[new_off[k]: new_off[k + 1]] = self.trace_keys(int(i))
        return replace(
            self,
            dirs=self.dirs[idx],
            stop_indices=self.stop_indices[idx],
            endpoints=self.endpoints[idx],
            trace_flat=flat,
            trace_off=new_off,
        )

    def dump(self, fp: IO[str]) -> None:
        """Writes the set as JSONL: a header object, then one object per path."""
        header = {
            "kind": "pathset",
            "version": 1,
            "d": self.d,
            "n_steps": self.n_steps,
            "start": list(self.start),
            "stop_radius": self.stop_radius,
            "exact": self.exact,
            "universe_size": self.universe_size,
        }
        fp.write(json.dumps(header) + "\n")
        for i in range(len(self)):
            fp.write(json.dumps({"dirs": "".join(map(str, self.dirs[i].tolist()))}) + "\n")


def load_path_set(fp: IO[str]) -> PathSet:
    """Reads a PathSet written by PathSet.dump; derived metadata is rebuilt."""
    header = json.loads(fp.readline())
    if header.get("kind") != "pathset":
        raise UsageError("not a pathset stream")
    rows = []
    for line in fp:
        line = line.strip()
        if not line:
            continue
        rows.append([int(ch) for ch in json.loads(line)["dirs"]])
    dirs = np.asarray(rows, dtype=np.uint8).reshape(len(rows), header["n_steps"])
    ps = _build_path_set(
        dirs,
        tuple(header["start"]),
        header["stop_radius"],
        header["exact"],
    )
    return replace(ps, universe_size=header["universe_size"])


def _build_path_set(
    dirs: np.ndarray,
    start: tuple[int, ...],
    stop_radius: Optional[float],
    exact: bool,
) -> PathSet:
    from . import _kernels

    d = len(start)
    if d > 4:
        raise UsageError("path ensembles support d <= 4")
    n, T = dirs.shape
    start4 = np.zeros(4, dtype=np.int64)
    start4[:d] = start
    r2 = float(stop_radius) ** 2 if stop_radius is not None else -1.0
    stop_out = np.empty(n, dtype=np.int64)
    end_out = np.empty((n, 4), dtype=np.int64)
    trace_flat = np.empty(n * (T + 1), dtype=np.uint64)
    trace_off = np.empty(n + 1, dtype=np.int64)
    scratch = np.empty(T + 1, dtype=np.uint64)
    _kernels.k_paths_metadata(
        dirs, start4, d, r2, stop_out, end_out, trace_flat, trace_off, scratch
    )
    universe = (2 * d) ** T if exact else n
    return PathSet(
        dirs=dirs,
        start=start,
        stop_radius=stop_radius,
        exact=exact,
        universe_size=universe,
        stop_indices=stop_out,
        endpoints=end_out,
        trace_flat=trace_flat[: trace_off[n]].copy(),
        trace_off=trace_off,
    )


def enumerate_paths(
    start: LatticePoint,
    n_steps: int,
    stop_radius: Optional[float] = None,
) -> PathSet:
    """Every direction word of length n_steps, in lexicographic order.

    The first step is the most significant digit.  Raises BudgetExceeded
    when (2d)^n_steps exceeds 2^24.
    """
    d = start.d
    total = (2 * d) ** n_steps
    if total > ENUM_BUDGET:
        raise BudgetExceeded(
            f"exact enumeration needs {total} paths, budget is {ENUM_BUDGET}"
        )
    base = 2 * d
    idx = np.arange(total, dtype=np.int64)
    dirs = np.empty((total, n_steps), dtype=np.uint8)
    for t in range(n_steps):
        power = base ** (n_steps - 1 - t)
        dirs[:, t] = (idx // power) % base
    return _build_path_set(dirs, start.coords, stop_radius, exact=True)


def sample_paths(
    start: LatticePoint,
    n_steps: int,
    n_paths: int,
    rng: RandomStream,
    stop_radius: Optional[float] = None,
) -> PathSet:
    """n_paths independent uniform paths of length n_steps from `start`."""
    if n_paths <= 0:
        raise UsageError("n_paths must be positive")
    d = start.d
    gen = rng.generator()
    dirs = gen.integers(0, 2 * d, size=(n_paths, n_steps), dtype=np.uint8)
    return _build_path_set(dirs, start.coords, stop_radius, exact=False)
