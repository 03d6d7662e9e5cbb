"""Hot loops, compiled with numba.

Everything here is an implementation detail of the public modules.  Walks are
simulated in Z^4 (coordinate loops are unrolled against d=4 where it pays;
path-batch helpers take d as an argument).  Randomness comes from an in-kernel
xoshiro256** generator whose 256-bit state the caller derives per replica
block from a RandomStream, so results never depend on thread scheduling.

Conventions shared with the rest of the package:
  - balls are open, membership is |p|^2 < r^2 in exact integer-vs-float compare
  - "stopped at the boundary" means the first visit to the inner vertex
    boundary, detected by |p|^2 < r^2 <= |p|^2 + 2*max|p_i| + 1
  - lattice points pack into one nonzero uint64, 16 bits per coordinate with
    offset 2^15 (coordinates up to +-32766, far beyond desk scale)
"""

from __future__ import annotations

import numpy as np
from numba import njit
from numba import int64, uint64, float64  # noqa: F401  (kept for signatures in comments)

U1 = np.uint64(1)
U0 = np.uint64(0)
_OFFSET = np.uint64(1 << 15)


# ---------------------------------------------------------------------------
# RNG: xoshiro256**
# ---------------------------------------------------------------------------

@njit(inline="always", cache=True)
def _rotl(x, k):
    return np.uint64((x << np.uint64(k)) | (x >> np.uint64(64 - k)))


@njit(inline="always", cache=True)
def xs_next(s):
    r = _rotl(np.uint64(s[1] * np.uint64(5)), 7) * np.uint64(9)
    t = np.uint64(s[1] << np.uint64(17))
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return r


@njit(inline="always", cache=True)
def rand_below(s, n):
    # unbiased integer in [0, n); fast path for powers of two
    un = np.uint64(n)
    if un & (un - U1) == U0:
        return xs_next(s) & (un - U1)
    lim = un * (np.uint64(0xFFFFFFFFFFFFFFFF) // un)
    while True:
        u = xs_next(s)
        if u < lim:
            return u % un


# ---------------------------------------------------------------------------
# Point packing and open-addressing hash set
# ---------------------------------------------------------------------------

@njit(inline="always", cache=True)
def mix_u64(x):
    x = np.uint64(x)
    x = np.uint64((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9))
    x = np.uint64((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB))
    return np.uint64(x ^ (x >> np.uint64(31)))


@njit(inline="always", cache=True)
def pack4(c0, c1, c2, c3):
    return (
        (np.uint64(c0) + _OFFSET)
        | ((np.uint64(c1) + _OFFSET) << np.uint64(16))
        | ((np.uint64(c2) + _OFFSET) << np.uint64(32))
        | ((np.uint64(c3) + _OFFSET) << np.uint64(48))
    )


@njit(cache=True)
def pack_dim(pos, d):
    # generic-d packing; unused coordinate fields carry the offset so the
    # key is never zero (zero is the empty-slot sentinel)
    key = U0
    for i in range(4):
        c = pos[i] if i < d else np.int64(0)
        key |= (np.uint64(c) + _OFFSET) << np.uint64(16 * i)
    return key


@njit(inline="always", cache=True)
def ht_insert(table, key):
    # returns True when the key was new; table length is a power of two
    mask = np.uint64(len(table) - 1)
    h = np.int64(mix_u64(key) & mask)
    while True:
        k = table[h]
        if k == U0:
            table[h] = key
            return True
        if k == key:
            return False
        h = np.int64((np.uint64(h) + U1) & mask)


@njit(inline="always", cache=True)
def ht_slot(table, key):
    # slot holding key, or -1
    mask = np.uint64(len(table) - 1)
    h = np.int64(mix_u64(key) & mask)
    while True:
        k = table[h]
        if k == U0:
            return np.int64(-1)
        if k == key:
            return h
        h = np.int64((np.uint64(h) + U1) & mask)


# ---------------------------------------------------------------------------
# Single-purpose walk kernels (d = 4)
# ---------------------------------------------------------------------------
#
# Each kernel keeps pos[0..3], ns = |pos|^2 and, when the stop rule needs it,
# mx = max |coordinate|.  The incremental max update recomputes only when the
# stepped coordinate was at the old maximum.

@njit(cache=True, nogil=True)
def k_exit_time(state, n_rep, r2, step_cap, t_grid, tail_out):
    """Walks from the origin to the boundary of B(r).

    Returns (sum_tau, sumsq_tau, n_capped); tail_out[j] counts tau > t_grid[j].
    """
    sum_t = np.int64(0)
    sumsq = np.int64(0)
    capped = np.int64(0)
    pos = np.zeros(4, np.int64)
    for _ in range(n_rep):
        for i in range(4):
            pos[i] = 0
        ns = np.int64(0)
        mx = np.int64(0)
        t = np.int64(0)
        while t < step_cap:
            if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
        if t >= step_cap:
            capped += 1
        sum_t += t
        sumsq += t * t
        for j in range(len(t_grid)):
            if t > t_grid[j]:
                tail_out[j] += 1
    return sum_t, sumsq, capped


@njit(cache=True, nogil=True)
def k_green(state, n_rep, target, target_ns, r2, step_cap):
    """Counts walks from the origin that visit `target` before stopping
    on the boundary of B(r).  Returns (hits, capped)."""
    hits = np.int64(0)
    capped = np.int64(0)
    pos = np.zeros(4, np.int64)
    for _ in range(n_rep):
        for i in range(4):
            pos[i] = 0
        ns = np.int64(0)
        mx = np.int64(0)
        t = np.int64(0)
        while True:
            if ns == target_ns:
                if (
                    pos[0] == target[0]
                    and pos[1] == target[1]
                    and pos[2] == target[2]
                    and pos[3] == target[3]
                ):
                    hits += 1
                    break
            if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
            if t >= step_cap:
                capped += 1
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
    return hits, capped


@njit(cache=True, nogil=True)
def k_annulus(state, n_rep, nr, r2, a2n2, A2n2, step_cap):
    """Walks started uniformly on the boundary of B(r) (squared radius r2,
    integer box half-width nr) until leaving B(An) (outer) or entering B(an)
    (inner).  Starts are exact-uniform by rejection from the enclosing box.
    Returns (outer, capped)."""
    outer = np.int64(0)
    capped = np.int64(0)
    box = np.int64(2 * nr + 1)
    pos = np.zeros(4, np.int64)
    for _ in range(n_rep):
        # rejection: uniform point of the box, kept iff on the boundary
        ns = np.int64(0)
        while True:
            ns = np.int64(0)
            mx = np.int64(0)
            for i in range(4):
                c = np.int64(rand_below(state, box)) - nr
                pos[i] = c
                ns += c * c
                a = c if c >= 0 else -c
                if a > mx:
                    mx = a
            if np.float64(ns) < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
        t = np.int64(0)
        while True:
            if np.float64(ns) >= A2n2:
                outer += 1
                break
            if np.float64(ns) < a2n2:
                break
            if t >= step_cap:
                capped += 1
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            ns += 2 * pos[ax] * st + 1
            pos[ax] += st
            t += 1
    return outer, capped


@njit(cache=True, nogil=True)
def k_hitting_exits(state, n_rep, start, r2, step_cap, out_packed):
    """Walks from `start` to the boundary of B(r); stores each stop point,
    packed, in out_packed.  Returns capped count."""
    capped = np.int64(0)
    pos = np.zeros(4, np.int64)
    for rep in range(n_rep):
        ns = np.int64(0)
        mx = np.int64(0)
        for i in range(4):
            pos[i] = start[i]
            ns += pos[i] * pos[i]
            a = pos[i] if pos[i] >= 0 else -pos[i]
            if a > mx:
                mx = a
        t = np.int64(0)
        while t < step_cap:
            if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
        if t >= step_cap:
            capped += 1
        out_packed[rep] = pack4(pos[0], pos[1], pos[2], pos[3])
    return capped


@njit(cache=True, nogil=True)
def k_escape_maxdisp(state, n_rep, start, r2, step_cap, out_maxdisp2):
    """Walks from `start` to the boundary of B(r); records the maximum
    squared displacement from the start along the stopped walk."""
    capped = np.int64(0)
    pos = np.zeros(4, np.int64)
    for rep in range(n_rep):
        ns = np.int64(0)
        mx = np.int64(0)
        for i in range(4):
            pos[i] = start[i]
            ns += pos[i] * pos[i]
            a = pos[i] if pos[i] >= 0 else -pos[i]
            if a > mx:
                mx = a
        disp = np.int64(0)  # |pos-start|^2, updated incrementally
        best = np.int64(0)
        t = np.int64(0)
        while t < step_cap:
            if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            disp += 2 * (c - start[ax]) * st + 1
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            if disp > best:
                best = disp
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
        if t >= step_cap:
            capped += 1
        out_maxdisp2[rep] = best
    return capped


@njit(cache=True, nogil=True)
def k_invsq_sums(state, n_rep, n_steps, out_sums):
    """Free walks from the origin; out_sums[rep] = sum over t=1..n of
    (|R(t)| + 1)^-2."""
    pos = np.zeros(4, np.int64)
    for rep in range(n_rep):
        for i in range(4):
            pos[i] = 0
        ns = np.int64(0)
        acc = 0.0
        for _ in range(n_steps):
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            ns += 2 * pos[ax] * st + 1
            pos[ax] += st
            r = np.sqrt(np.float64(ns)) + 1.0
            acc += 1.0 / (r * r)
        out_sums[rep] = acc
    return np.int64(0)


@njit(cache=True, nogil=True)
def k_layer_counts(state, n_rep, r2, r2_inner, step_cap, table, keybuf, out_counts):
    """Walks from the origin to the boundary of B(r); counts distinct visited
    points outside B(r - k) (squared radius r2_inner).  The hash table is
    cleared between replicas via keybuf."""
    capped = np.int64(0)
    pos = np.zeros(4, np.int64)
    for rep in range(n_rep):
        for i in range(4):
            pos[i] = 0
        ns = np.int64(0)
        mx = np.int64(0)
        nkeys = np.int64(0)
        count = np.int64(0)
        t = np.int64(0)
        while t < step_cap:
            if np.float64(ns) >= r2_inner:
                key = pack4(pos[0], pos[1], pos[2], pos[3])
                if ht_insert(table, key):
                    keybuf[nkeys] = key
                    nkeys += 1
                    count += 1
            if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
        if t >= step_cap:
            capped += 1
        out_counts[rep] = count
        # resolve every slot before zeroing any: deleting mid-scan would
        # break the linear probe chains the remaining lookups rely on
        for j in range(nkeys):
            keybuf[j] = np.uint64(ht_slot(table, keybuf[j]))
        for j in range(nkeys):
            table[np.int64(keybuf[j])] = U0
    return capped


@njit(cache=True, nogil=True)
def k_trace_to_boundary(state, start, r2, step_cap, table, keybuf):
    """One walk from `start` to the boundary of B(r), inserting every distinct
    visited point into `table` and logging it in keybuf.

    Returns (tau, n_distinct, end_packed, status) with status 0 ok,
    1 step cap hit, 2 keybuf overflow (caller clears and retries bigger).
    """
    pos = np.empty(4, np.int64)
    ns = np.int64(0)
    mx = np.int64(0)
    for i in range(4):
        pos[i] = start[i]
        ns += pos[i] * pos[i]
        a = pos[i] if pos[i] >= 0 else -pos[i]
        if a > mx:
            mx = a
    nkeys = np.int64(0)
    cap = np.int64(len(keybuf))
    t = np.int64(0)
    status = np.int64(0)
    while True:
        key = pack4(pos[0], pos[1], pos[2], pos[3])
        if ht_insert(table, key):
            if nkeys >= cap:
                status = np.int64(2)
                break
            keybuf[nkeys] = key
            nkeys += 1
        if ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
            break
        if t >= step_cap:
            status = np.int64(1)
            break
        u = xs_next(state)
        k = np.int64(u & np.uint64(7))
        ax = k >> 1
        st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
        c = pos[ax]
        ns += 2 * c * st + 1
        c += st
        pos[ax] = c
        a = c if c >= 0 else -c
        if a > mx:
            mx = a
        else:
            old = c - st
            if old < 0:
                old = -old
            if old == mx:
                m2 = np.int64(0)
                for i in range(4):
                    b = pos[i] if pos[i] >= 0 else -pos[i]
                    if b > m2:
                        m2 = b
                mx = m2
        t += 1
    end = pack4(pos[0], pos[1], pos[2], pos[3])
    return t, nkeys, end, status


@njit(cache=True, nogil=True)
def k_clear_keys(table, keybuf, nkeys):
    # two passes: all lookups must finish before the first deletion,
    # otherwise earlier zeroed slots break later probe chains
    slots = np.empty(nkeys, np.int64)
    for j in range(nkeys):
        slots[j] = ht_slot(table, keybuf[j])
    for j in range(nkeys):
        if slots[j] >= 0:
            table[slots[j]] = U0


@njit(cache=True, nogil=True)
def k_hit_trace(state, n_rep, start, table, r2_stop, inner_boundary_stop, step_cap):
    """Counts walks from `start` that visit a point of `table` before
    stopping.  Stop rule: inner vertex boundary of B(r_stop) when
    inner_boundary_stop, else first exit (|p|^2 >= r2_stop).
    Returns (hits, capped)."""
    hits = np.int64(0)
    capped = np.int64(0)
    pos = np.empty(4, np.int64)
    for _ in range(n_rep):
        ns = np.int64(0)
        mx = np.int64(0)
        for i in range(4):
            pos[i] = start[i]
            ns += pos[i] * pos[i]
            a = pos[i] if pos[i] >= 0 else -pos[i]
            if a > mx:
                mx = a
        t = np.int64(0)
        while True:
            key = pack4(pos[0], pos[1], pos[2], pos[3])
            if ht_slot(table, key) >= 0:
                hits += 1
                break
            if inner_boundary_stop:
                if ns < r2_stop and np.float64(ns + 2 * mx + 1) >= r2_stop:
                    break
            else:
                if np.float64(ns) >= r2_stop:
                    break
            if t >= step_cap:
                capped += 1
                break
            u = xs_next(state)
            k = np.int64(u & np.uint64(7))
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(4):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            t += 1
    return hits, capped


@njit(cache=True, nogil=True)
def k_count_common(state, start, table, alive, r2_stop, inner_boundary_stop,
                   step_cap, slotbuf):
    """One walk from `start`; counts distinct points shared with `table`
    (slots whose alive flag is set).  Restores alive flags before returning.
    Returns (count, status) with status 1 on step-cap, 2 on slotbuf overflow.
    """
    pos = np.empty(4, np.int64)
    ns = np.int64(0)
    mx = np.int64(0)
    for i in range(4):
        pos[i] = start[i]
        ns += pos[i] * pos[i]
        a = pos[i] if pos[i] >= 0 else -pos[i]
        if a > mx:
            mx = a
    count = np.int64(0)
    nhit = np.int64(0)
    cap = np.int64(len(slotbuf))
    status = np.int64(0)
    t = np.int64(0)
    while True:
        key = pack4(pos[0], pos[1], pos[2], pos[3])
        s = ht_slot(table, key)
        if s >= 0 and alive[s] == 1:
            if nhit >= cap:
                status = np.int64(2)
                break
            alive[s] = 0
            slotbuf[nhit] = s
            nhit += 1
            count += 1
        if inner_boundary_stop:
            if ns < r2_stop and np.float64(ns + 2 * mx + 1) >= r2_stop:
                break
        else:
            if np.float64(ns) >= r2_stop:
                break
        if t >= step_cap:
            status = np.int64(1)
            break
        u = xs_next(state)
        k = np.int64(u & np.uint64(7))
        ax = k >> 1
        st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
        c = pos[ax]
        ns += 2 * c * st + 1
        c += st
        pos[ax] = c
        a = c if c >= 0 else -c
        if a > mx:
            mx = a
        else:
            old = c - st
            if old < 0:
                old = -old
            if old == mx:
                m2 = np.int64(0)
                for i in range(4):
                    b = pos[i] if pos[i] >= 0 else -pos[i]
                    if b > m2:
                        m2 = b
                mx = m2
        t += 1
    for j in range(nhit):
        alive[slotbuf[j]] = 1
    return count, status


@njit(cache=True, nogil=True)
def k_fixed_count_common(state, start, table, alive, n_steps, slotbuf):
    """Like k_count_common but for a fixed-length free walk of n_steps."""
    pos = np.empty(4, np.int64)
    for i in range(4):
        pos[i] = start[i]
    count = np.int64(0)
    nhit = np.int64(0)
    cap = np.int64(len(slotbuf))
    status = np.int64(0)
    for t in range(n_steps + 1):
        key = pack4(pos[0], pos[1], pos[2], pos[3])
        s = ht_slot(table, key)
        if s >= 0 and alive[s] == 1:
            if nhit >= cap:
                status = np.int64(2)
                break
            alive[s] = 0
            slotbuf[nhit] = s
            nhit += 1
            count += 1
        if t == n_steps:
            break
        u = xs_next(state)
        k = np.int64(u & np.uint64(7))
        ax = k >> 1
        st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
        pos[ax] += st
    for j in range(nhit):
        alive[slotbuf[j]] = 1
    return count, status


@njit(cache=True, nogil=True)
def k_walk_positions(state, n_steps, start, out_pos):
    """Free walk writing all n_steps+1 positions into out_pos (rows)."""
    pos = np.empty(4, np.int64)
    for i in range(4):
        pos[i] = start[i]
        out_pos[0, i] = pos[i]
    for t in range(n_steps):
        u = xs_next(state)
        k = np.int64(u & np.uint64(7))
        ax = k >> 1
        st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
        pos[ax] += st
        for i in range(4):
            out_pos[t + 1, i] = pos[i]
    return np.int64(0)


# ---------------------------------------------------------------------------
# Path batches (generic d) for the coupling pipeline
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def k_paths_metadata(dirs, start, d, r2, stop_out, end_out, trace_flat, trace_off,
                     scratch):
    """Derive stop index, endpoint, and sorted distinct chopped trace for each
    direction row.  r2 <= 0 means no stopping ball.  Returns coverage count
    (paths with a stop).  trace_off[i]..trace_off[i+1] delimits path i's trace
    in trace_flat; scratch must hold T+1 entries."""
    n, T = dirs.shape
    covered = np.int64(0)
    pos = np.empty(4, np.int64)
    off = np.int64(0)
    trace_off[0] = 0
    for p in range(n):
        ns = np.int64(0)
        mx = np.int64(0)
        for i in range(4):
            pos[i] = start[i] if i < d else np.int64(0)
            ns += pos[i] * pos[i]
            a = pos[i] if pos[i] >= 0 else -pos[i]
            if a > mx:
                mx = a
        stop = np.int64(-1)
        if r2 > 0.0 and ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
            stop = 0
            for i in range(4):
                end_out[p, i] = pos[i]
        scratch[0] = pack_dim(pos, d)
        npts = np.int64(1)
        for t in range(T):
            k = np.int64(dirs[p, t])
            ax = k >> 1
            st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
            c = pos[ax]
            ns += 2 * c * st + 1
            c += st
            pos[ax] = c
            a = c if c >= 0 else -c
            if a > mx:
                mx = a
            else:
                old = c - st
                if old < 0:
                    old = -old
                if old == mx:
                    m2 = np.int64(0)
                    for i in range(d):
                        b = pos[i] if pos[i] >= 0 else -pos[i]
                        if b > m2:
                            m2 = b
                    mx = m2
            if stop < 0:
                scratch[npts] = pack_dim(pos, d)
                npts += 1
                if r2 > 0.0 and ns < r2 and np.float64(ns + 2 * mx + 1) >= r2:
                    stop = t + 1
                    for i in range(4):
                        end_out[p, i] = pos[i]
        if stop < 0:
            for i in range(4):
                end_out[p, i] = pos[i]
        else:
            covered += 1
        stop_out[p] = stop
        sub = scratch[:npts]
        sub.sort()
        prev = U0
        for j in range(npts):
            v = sub[j]
            if v != prev:
                trace_flat[off] = v
                off += 1
                prev = v
        trace_off[p + 1] = off
    return covered


@njit(cache=True, nogil=True)
def k_cross_hits(lkeys, lids, rkeys, rids, words, out_bits):
    """Sorted merge of two (key, owner-id) streams; for every key present in
    both, sets bit r in row l of out_bits for each owning pair (l, r).
    out_bits has shape (n_left, words)."""
    i = np.int64(0)
    j = np.int64(0)
    nl = np.int64(len(lkeys))
    nr = np.int64(len(rkeys))
    while i < nl and j < nr:
        a = lkeys[i]
        b = rkeys[j]
        if a < b:
            i += 1
        elif b < a:
            j += 1
        else:
            i2 = i
            while i2 < nl and lkeys[i2] == a:
                i2 += 1
            j2 = j
            while j2 < nr and rkeys[j2] == a:
                j2 += 1
            for ii in range(i, i2):
                row = lids[ii]
                for jj in range(j, j2):
                    r = rids[jj]
                    out_bits[row, r >> 6] |= U1 << np.uint64(r & 63)
            i = i2
            j = j2
    return np.int64(0)


@njit(cache=True, nogil=True)
def k_pair_sep_ok(lends, rends, sep2, out_bits):
    """Sets bit r in row l when |end_l - end_r|^2 > sep2 (strict)."""
    nl = len(lends)
    nr = len(rends)
    for l in range(nl):
        for r in range(nr):
            ds = np.int64(0)
            for i in range(4):
                dd = lends[l, i] - rends[r, i]
                ds += dd * dd
            if np.float64(ds) > sep2:
                out_bits[l, r >> 6] |= U1 << np.uint64(r & 63)
    return np.int64(0)


@njit(cache=True, nogil=True)
def k_kuhn_match(adj, nl, nr, match_l, match_r):
    """Maximum bipartite matching on bitset adjacency rows (Kuhn's algorithm
    with a greedy warm start).  match_l / match_r are filled with -1 for
    unmatched.  Returns matching size."""
    words = adj.shape[1]
    for i in range(nl):
        match_l[i] = -1
    for j in range(nr):
        match_r[j] = -1
    size = np.int64(0)
    # greedy pass
    for l in range(nl):
        done = False
        for w in range(words):
            if done:
                break
            bits = adj[l, w]
            while bits != U0:
                b = bits & (U0 - bits)
                r = np.int64(w * 64 + np.int64(np.log2(np.float64(b))))
                if match_r[r] < 0:
                    match_r[r] = l
                    match_l[l] = r
                    size += 1
                    done = True
                    break
                bits ^= b
    # augmenting passes (iterative DFS)
    visited = np.empty(nr, np.int64)
    for j in range(nr):
        visited[j] = -1
    stack_l = np.empty(nl + 1, np.int64)
    stack_w = np.empty(nl + 1, np.int64)
    stack_bits = np.empty(nl + 1, np.uint64)
    parent_r = np.empty(nr, np.int64)  # right node through which we reached l
    for root in range(nl):
        if match_l[root] >= 0:
            continue
        top = np.int64(0)
        stack_l[0] = root
        stack_w[0] = 0
        stack_bits[0] = adj[root, 0] if words > 0 else U0
        found = np.int64(-1)
        while top >= 0:
            l = stack_l[top]
            w = stack_w[top]
            bits = stack_bits[top]
            advanced = False
            while w < words:
                if bits == U0:
                    w += 1
                    if w < words:
                        bits = adj[l, w]
                    continue
                b = bits & (U0 - bits)
                bits ^= b
                r = np.int64(w * 64 + np.int64(np.log2(np.float64(b))))
                if visited[r] != root:
                    visited[r] = root
                    parent_r[r] = l
                    if match_r[r] < 0:
                        found = r
                        break
                    # descend into the left vertex currently matched to r
                    stack_w[top] = w
                    stack_bits[top] = bits
                    top += 1
                    nl2 = match_r[r]
                    stack_l[top] = nl2
                    stack_w[top] = 0
                    stack_bits[top] = adj[nl2, 0] if words > 0 else U0
                    advanced = True
                    break
            if found >= 0:
                break
            if not advanced:
                top -= 1
        if found >= 0:
            # walk the alternating path back to the root
            r = found
            while True:
                l = parent_r[r]
                prev = match_l[l]
                match_l[l] = r
                match_r[r] = l
                if l == root:
                    break
                r = prev
            size += 1
    return size


# ---------------------------------------------------------------------------
# Good-time condition sums
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def k_good_time_sums(pos, n_times, window, c1_out, c2_out):
    """Condition sums for times 0..n_times-1 on the position rows `pos`.

    c1[t] = sum_{s=1..w} q(R(t+s) - R(t))
    c2[t] = sum_{s1=1..w} q(R(t+s1) - R(t)) * c1w[t+s1]
    with q(x) = 1 if x = 0 else |x|^-2 (a revisit counts as probability one),
    and c1w[u] the window sum starting at u.  pos must have at least
    n_times + 2*window rows beyond index 0.
    """
    need = n_times + window
    c1w = np.empty(need, np.float64)
    for u in range(need):
        acc = 0.0
        for s in range(1, window + 1):
            ds = np.int64(0)
            for i in range(4):
                dd = pos[u + s, i] - pos[u, i]
                ds += dd * dd
            acc += 1.0 if ds == 0 else 1.0 / np.float64(ds)
        c1w[u] = acc
    for t in range(n_times):
        acc2 = 0.0
        for s in range(1, window + 1):
            ds = np.int64(0)
            for i in range(4):
                dd = pos[t + s, i] - pos[t, i]
                ds += dd * dd
            q = 1.0 if ds == 0 else 1.0 / np.float64(ds)
            acc2 += q * c1w[t + s]
        c1_out[t] = c1w[t]
        c2_out[t] = acc2
    return np.int64(0)


# ---------------------------------------------------------------------------
# Boundary enumeration (d = 4)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _limit_below(r2):
    # largest k >= 0 with k*k < r2
    if r2 <= 0.0:
        return np.int64(-1)
    k = np.int64(np.sqrt(r2))
    while np.float64((k + 1) * (k + 1)) < r2:
        k += 1
    while k >= 0 and np.float64(k * k) >= r2:
        k -= 1
    return k


@njit(cache=True, nogil=True)
def k_boundary_shell_d4(r2, out, count_only):
    """Enumerates the inner vertex boundary of the origin ball of squared
    radius r2 in lexicographic coordinate order.  Returns the point count;
    fills `out` (rows) unless count_only."""
    lim = _limit_below(r2)
    # every boundary point has |p|^2 >= r2 - 2*lim - 1 (its max coordinate
    # is at most lim), which confines the innermost loop to a thin shell
    r2lo = r2 - np.float64(2 * lim + 1)
    n = np.int64(0)
    for x1 in range(-lim, lim + 1):
        s1 = np.int64(x1) * x1
        l2 = _limit_below(r2 - np.float64(s1))
        for x2 in range(-l2, l2 + 1):
            s2 = s1 + np.int64(x2) * x2
            l3 = _limit_below(r2 - np.float64(s2))
            for x3 in range(-l3, l3 + 1):
                s3 = s2 + np.int64(x3) * x3
                hi4 = _limit_below(r2 - np.float64(s3))
                if hi4 < 0:
                    continue
                lo4 = np.int64(0)
                if np.float64(s3) < r2lo:
                    lo4 = np.int64(np.sqrt(r2lo - np.float64(s3)))
                    while lo4 > 0 and np.float64(s3 + (lo4 - 1) * (lo4 - 1)) >= r2lo:
                        lo4 -= 1
                    while np.float64(s3 + lo4 * lo4) < r2lo:
                        lo4 += 1
                if lo4 > hi4:
                    continue
                a1 = x1 if x1 >= 0 else -x1
                a2 = x2 if x2 >= 0 else -x2
                a3 = x3 if x3 >= 0 else -x3
                m3 = max(a1, max(a2, a3))
                # ascending x4 over [-hi4,-lo4] then [lo4,hi4], no duplicates
                second_start = lo4 if lo4 > 0 else np.int64(1)
                for x4 in range(-hi4, -lo4 + 1):
                    ns = s3 + np.int64(x4) * x4
                    a4 = -x4 if x4 < 0 else x4
                    mx = m3 if m3 >= a4 else a4
                    if np.float64(ns + 2 * mx + 1) >= r2:
                        if not count_only:
                            out[n, 0] = x1
                            out[n, 1] = x2
                            out[n, 2] = x3
                            out[n, 3] = x4
                        n += 1
                for x4 in range(second_start, hi4 + 1):
                    ns = s3 + np.int64(x4) * x4
                    mx = m3 if m3 >= x4 else x4
                    if np.float64(ns + 2 * mx + 1) >= r2:
                        if not count_only:
                            out[n, 0] = x1
                            out[n, 1] = x2
                            out[n, 2] = x3
                            out[n, 3] = x4
                        n += 1
    return n


# ---------------------------------------------------------------------------
# Paired-walk composites
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def k_trace_fixed(state, start, n_steps, table, keybuf):
    """Fixed-length free walk from start, inserting every distinct visited
    point into table/keybuf.  Returns (nkeys, status); status 2 on keybuf
    overflow."""
    pos = np.empty(4, np.int64)
    for i in range(4):
        pos[i] = start[i]
    nkeys = np.int64(0)
    cap = np.int64(len(keybuf))
    status = np.int64(0)
    for t in range(n_steps + 1):
        key = pack4(pos[0], pos[1], pos[2], pos[3])
        if ht_insert(table, key):
            if nkeys >= cap:
                status = np.int64(2)
                break
            keybuf[nkeys] = key
            nkeys += 1
        if t == n_steps:
            break
        u = xs_next(state)
        k = np.int64(u & np.uint64(7))
        ax = k >> 1
        st = np.int64(1) if (k & 1) == 1 else np.int64(-1)
        pos[ax] += st
    return nkeys, status


@njit(cache=True, nogil=True)
def k_set_alive(table, keybuf, nkeys, alive, flag):
    """Sets the alive flag of every key's slot; keys must be present."""
    for j in range(nkeys):
        s = ht_slot(table, keybuf[j])
        if s >= 0:
            alive[s] = flag
    return np.int64(0)


@njit(cache=True, nogil=True)
def k_pair_common(state, n_rep, x, n_steps, r2_stop, step_cap, table, keybuf,
                  alive, slotbuf, out_counts):
    """Per replicate: a fixed n_steps walk from the origin fills the table,
    then a walk from x stopped on first exit past r2_stop counts distinct
    common points into out_counts.  Returns (capped, overflow)."""
    zero = np.zeros(4, np.int64)
    capped = np.int64(0)
    overflow = np.int64(0)
    for rep in range(n_rep):
        nkeys, status = k_trace_fixed(state, zero, n_steps, table, keybuf)
        if status != 0:
            overflow += 1
            out_counts[rep] = -1
            k_clear_keys(table, keybuf, nkeys)
            continue
        k_set_alive(table, keybuf, nkeys, alive, np.uint8(1))
        cnt, st2 = k_count_common(state, x, table, alive, r2_stop, False,
                                  step_cap, slotbuf)
        if st2 == 1:
            capped += 1
        elif st2 == 2:
            overflow += 1
        out_counts[rep] = cnt
        k_set_alive(table, keybuf, nkeys, alive, np.uint8(0))
        k_clear_keys(table, keybuf, nkeys)
    return capped, overflow


@njit(cache=True, nogil=True)
def k_pair_hit(state, n_rep, s1, s2, r2, step_cap, table, keybuf):
    """Per replicate: a walk from s1 to the boundary of B(r) fills the table,
    then a walk from s2 stopped on the same boundary succeeds if it touches
    the table first.  Returns (hits, capped, overflow)."""
    hits = np.int64(0)
    capped = np.int64(0)
    overflow = np.int64(0)
    for _ in range(n_rep):
        tau, nkeys, end, status = k_trace_to_boundary(state, s1, r2, step_cap,
                                                      table, keybuf)
        if status == 1:
            capped += 1
        elif status == 2:
            overflow += 1
        h, c = k_hit_trace(state, 1, s2, table, r2, True, step_cap)
        hits += h
        capped += c
        k_clear_keys(table, keybuf, nkeys)
    return hits, capped, overflow


@njit(cache=True, nogil=True)
def k_insert_keys(table, keys):
    """Bulk insert of already-packed keys; keys doubles as the clear buffer."""
    for i in range(len(keys)):
        ht_insert(table, keys[i])
    return np.int64(0)
