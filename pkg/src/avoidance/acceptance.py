"""The quantitative checks behind `avoidance verify-all`.

Each check reruns one verification at a pinned scale and reports pass or
fail together with the margins it saw.  Scales, replica counts, and
stream tags are frozen so that a given seed always reproduces the same
numbers; the default seed is the one the test suite uses.  Calibrated
constants (the tail multiplier in the inverse-square check, the linear
constant in the hittability check) are recomputed at a smaller scale on
every run rather than stored, so a pass never leans on a stale number.
"""

from __future__ import annotations

import json
import math
import os
import time
import warnings
from dataclasses import dataclass
from fractions import Fraction
from itertools import permutations
from typing import Callable, Optional, Sequence

import numpy as np

from .coupling import (
    build_instance,
    coupling_measure,
    hall_check,
    make_schedule,
    mask_avoids,
    max_matching,
    multiscale_drive,
    one_step_couple,
    pack_points,
)
from .errors import UsageError
from .estimators import (
    annulus_exit_limit,
    annulus_exit_prob,
    estimate_green,
    exit_time_tail,
    green_exact,
    inverse_square_samples,
)
from .intersections import expected_intersections, hittability_sweep
from .lattice import LatticePoint, origin
from .streams import RandomStream
from .walker import enumerate_paths

DEFAULT_SEED = 0xA11CE


@dataclass(frozen=True)
class CheckResult:
    """One check's verdict: the margins live in `detail` (human-readable)
    and `numbers` (machine-readable)."""

    name: str
    passed: bool
    detail: str
    numbers: dict
    wall_time: float


def check_annulus_exit(seed: int = DEFAULT_SEED) -> CheckResult:
    """Walks from the boundary of B(100) leave {51 <= |z| <= 200} through
    the outside at the scale-free rate, inside three standard errors and
    under a minute."""
    t0 = time.perf_counter()
    rng = RandomStream(seed).tagged("acc-annulus")
    est = annulus_exit_prob(100.0, 0.51, 2.0, 200_000, rng)
    target = 0.79139  # annulus_exit_limit(0.51, 2) rounded to five digits
    diff = abs(est.value - target)
    wall = time.perf_counter() - t0
    passed = diff <= 3 * est.stderr and est.stderr < 0.003 and wall < 60.0
    detail = (f"p={est.value:.5f}, |p-{target}|={diff:.5f} <= "
              f"{3 * est.stderr:.5f}, se={est.stderr:.5f} < 0.003, "
              f"{wall:.1f}s < 60s")
    numbers = {"value": est.value, "stderr": est.stderr, "target": target,
               "limit": annulus_exit_limit(0.51, 2.0)}
    return CheckResult("annulus-exit", passed, detail, numbers, wall)


def check_green_decay(seed: int = DEFAULT_SEED) -> CheckResult:
    """log2 G(0,x) falls with slope near -2 in log2 |x| along the axis, and
    the walk estimate at e1 agrees with the linear solve when both are
    truncated at the same ball."""
    t0 = time.perf_counter()
    root = RandomStream(seed).tagged("acc-green")
    radii = (4, 8, 16, 32)
    vals = [estimate_green((r, 0, 0, 0), 1_000_000, root.child(r)).value
            for r in radii]
    slope = float(np.polyfit(np.log2(radii), np.log2(vals), 1)[0])
    e1 = estimate_green((1, 0, 0, 0), 1_000_000,
                        RandomStream(seed).tagged("acc-green-e1"),
                        truncation_radius=40.0)
    oracle = green_exact((1, 0, 0, 0), 40)
    dev = abs(e1.value - oracle)
    passed = -2.3 <= slope <= -1.7 and dev <= 3 * e1.stderr
    detail = (f"slope={slope:.4f} in [-2.3, -1.7]; e1: |{e1.value:.6f}-"
              f"{oracle:.6f}|={dev:.6f} <= {3 * e1.stderr:.6f}")
    numbers = {"slope": slope, "green": dict(zip(map(str, radii), vals)),
               "e1_value": e1.value, "e1_stderr": e1.stderr,
               "e1_oracle": oracle}
    return CheckResult("green-decay", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_intersection_growth(seed: int = DEFAULT_SEED) -> CheckResult:
    """The expected number of shared points at |x| = 4 keeps growing as the
    first walk lengthens, by increments within a factor of 3 of each
    other (the signature of logarithmic growth)."""
    t0 = time.perf_counter()
    root = RandomStream(seed).tagged("acc-ei")
    steps = (64, 256, 1024)
    vals = [expected_intersections((4, 0, 0, 0), n, 20_000, root.child(n)).value
            for n in steps]
    d1 = vals[1] - vals[0]
    d2 = vals[2] - vals[1]
    increasing = vals[0] < vals[1] < vals[2]
    passed = increasing and d1 / 3.0 <= d2 <= 3.0 * d1
    detail = (f"values {vals[0]:.4f} < {vals[1]:.4f} < {vals[2]:.4f}; "
              f"increments {d1:.4f}, {d2:.4f}, ratio {d2 / d1:.2f} in [1/3, 3]")
    numbers = {"values": dict(zip(map(str, steps), vals)),
               "increments": [d1, d2]}
    return CheckResult("intersection-growth", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_exit_time_scaling(seed: int = DEFAULT_SEED) -> CheckResult:
    """Mean exit time of B(n) roughly quadruples when n doubles."""
    t0 = time.perf_counter()
    root = RandomStream(seed).tagged("acc-tau")
    means = {n: exit_time_tail(float(n), 20_000, root.child(n)).mean.value
             for n in (10, 20, 40)}
    r1 = means[20] / means[10]
    r2 = means[40] / means[20]
    passed = 2.5 <= r1 <= 6.0 and 2.5 <= r2 <= 6.0
    detail = (f"means {means[10]:.1f}, {means[20]:.1f}, {means[40]:.1f}; "
              f"ratios {r1:.2f}, {r2:.2f} in [2.5, 6]")
    numbers = {"means": {str(k): v for k, v in means.items()},
               "ratios": [r1, r2]}
    return CheckResult("exit-time-scaling", passed, detail, numbers,
                       time.perf_counter() - t0)


_INVSQ_GRID = (2, 3, 4, 6, 8, 12, 16)


def check_inverse_square_tails(seed: int = DEFAULT_SEED) -> CheckResult:
    """sum (|R(t)|+1)^-2 over n steps concentrates at the log2 n scale.

    The multiplier K is calibrated at n = 1000 as the smallest grid value
    whose tails clear half the final margins, then judged fresh at
    n = 10000 against the full ones."""
    t0 = time.perf_counter()
    cal = inverse_square_samples(1000, 10_000,
                                 RandomStream(seed).tagged("acc-invsq-cal"))
    lg1 = math.log2(1000.0)
    K = None
    for cand in _INVSQ_GRID:
        up = float((cal > cand * lg1).mean())
        lo = float((cal < lg1 / cand).mean())
        if up <= 0.005 and lo <= 0.025:
            K = cand
            break
    if K is None:
        return CheckResult(
            "inverse-square-tails", False,
            f"no K in {_INVSQ_GRID} clears the calibration margins at n=1000",
            {"grid": list(_INVSQ_GRID)}, time.perf_counter() - t0)
    chk = inverse_square_samples(10_000, 10_000,
                                 RandomStream(seed).tagged("acc-invsq"))
    lg2 = math.log2(10_000.0)
    up2 = float((chk > K * lg2).mean())
    lo2 = float((chk < lg2 / K).mean())
    passed = up2 <= 0.01 and lo2 <= 0.05
    detail = (f"K={K}; at n=10000: P(sum > K log2 n)={up2:.4f} <= 0.01, "
              f"P(sum < log2(n)/K)={lo2:.4f} <= 0.05")
    numbers = {"K": K, "upper_tail": up2, "lower_tail": lo2}
    return CheckResult("inverse-square-tails", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_hittability_tail(seed: int = DEFAULT_SEED) -> CheckResult:
    """delta(eps) is nondecreasing and sits under K * eps, with K taken
    from the upper confidence ends of a half-scale sweep."""
    t0 = time.perf_counter()
    eps = [0.1, 0.2, 0.4]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cal = hittability_sweep(32.0, 128.0, eps, 400, 400,
                                RandomStream(seed).tagged("acc-hit-cal"))
        K = max(est.ci95[1] / e for e, est in cal)
        sweep = hittability_sweep(64.0, 256.0, eps, 400, 400,
                                  RandomStream(seed).tagged("acc-hit"))
    vals = [est.value for _, est in sweep]
    mono = all(a <= b for a, b in zip(vals, vals[1:]))
    dominated = all(v <= K * e for v, e in zip(vals, eps))
    passed = mono and dominated
    detail = (f"K={K:.4f}; delta={[round(v, 5) for v in vals]} vs bounds "
              f"{[round(K * e, 5) for e in eps]}; nondecreasing={mono}")
    numbers = {"K": K, "eps": eps, "delta": vals,
               "cal_delta": [est.value for _, est in cal]}
    return CheckResult("hittability-tail", passed, detail, numbers,
                       time.perf_counter() - t0)


_BASE_2D = ((1, 0), (0, 1), (1, 1), (-1, 1), (2, 0), (0, 2),
            (2, 1), (1, 2), (-1, -1), (2, 2), (3, 0), (1, -1))


def check_pass_through_ratio(seed: int = DEFAULT_SEED) -> CheckResult:
    """Requiring a planar walk to pass through one more point costs at
    most a fixed constant times (dist+1)^-2, over every length-6 path
    and 66 point configurations of size up to 3.

    Exhaustive, so deterministic; the seed is accepted for interface
    uniformity and never used."""
    t0 = time.perf_counter()
    ps = enumerate_paths(origin(2), 6)
    visit = {}
    for pt in _BASE_2D:
        keys = pack_points(np.array([pt], dtype=np.int64))
        visit[pt] = ~mask_avoids(keys)(ps)
    configs = [(p,) for p in _BASE_2D]
    configs += list(permutations(_BASE_2D[:6], 2))
    configs += list(permutations(_BASE_2D[:4], 3))
    worst = 0.0
    worst_cfg: Optional[tuple] = None
    all_positive = True
    for cfg in configs:
        prefix, last = cfg[:-1], cfg[-1]
        mask = np.ones(len(ps), dtype=bool)
        for p in prefix:
            mask &= visit[p]
        n_base = int(mask.sum())
        if n_base == 0:
            all_positive = False
            continue
        n_ext = int((mask & visit[last]).sum())
        anchors = ((0, 0),) + prefix
        dist = min(math.hypot(last[0] - a[0], last[1] - a[1]) for a in anchors)
        ratio = (n_ext / n_base) * (dist + 1.0) ** 2
        if ratio > worst:
            worst, worst_cfg = ratio, cfg
    # the exact maximum over this family is 136/140 * 4 = 3.8857...
    bound = 4.0
    passed = len(configs) >= 50 and all_positive and worst <= bound
    detail = (f"{len(configs)} configurations, all base events positive: "
              f"{all_positive}; worst (P(E')/P(E))(dist+1)^2 = {worst:.6f} "
              f"<= {bound} at {worst_cfg}")
    numbers = {"configs": len(configs), "worst_ratio": worst,
               "worst_config": [list(p) for p in worst_cfg], "bound": bound}
    return CheckResult("pass-through-ratio", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_coupling_structure(seed: int = DEFAULT_SEED) -> CheckResult:
    """Hall's condition agrees with maximum matching on 100 random filtered
    ensembles, the exact coupling table balances to rational identity with
    disjoint matched traces, and the standard desk stage carries positive
    success mass."""
    t0 = time.perf_counter()
    root = RandomStream(seed).tagged("acc-hall")
    n_holds = n_viols = 0
    equiv = True
    viol_valid = True
    for i in range(100):
        gen = root.child(i).generator()
        t_len = 2 + i % 2
        c1 = tuple(int(x) for x in gen.integers(-2, 3, size=4))
        c2 = tuple(int(x) for x in gen.integers(-2, 3, size=4))
        m = float(6 + 2 * (i % 4))
        e1 = enumerate_paths(LatticePoint(c1), t_len, stop_radius=m)
        e2 = enumerate_paths(LatticePoint(c2), t_len, stop_radius=m)
        k1 = int(gen.integers(3, 41))
        k2 = int(gen.integers(3, 41))
        s1 = e1.subset(np.sort(gen.choice(len(e1), size=min(k1, len(e1)),
                                          replace=False)))
        s2 = e2.subset(np.sort(gen.choice(len(e2), size=min(k2, len(e2)),
                                          replace=False)))
        inst = build_instance(s1, s2, m, (0.0, 1.0, 2.0, 4.0)[i % 4])
        res = hall_check(inst)
        matching = max_matching(inst)
        equiv &= res.holds == (len(matching) == len(s1))
        if res.holds:
            n_holds += 1
        else:
            n_viols += 1
            union = np.zeros_like(inst.adjacency[0])
            for l in res.violating_subset:
                union |= inst.adjacency[l]
            viol_valid &= (int(np.bitwise_count(union).sum())
                           < len(res.violating_subset))

    left = enumerate_paths(origin(4), 4, stop_radius=6.0)
    right = enumerate_paths(LatticePoint((4, 0, 0, 0)), 4, stop_radius=6.0)
    inst = build_instance(left, right, 6.0, 0.0)
    table = coupling_measure(max_matching(inst), left, right)
    table.verify()
    w = Fraction(1, len(left))
    balanced = table.mu_mass + table.residual_mass == 1
    marginals_ok = (all(v == w for v in table.left_marginal().values())
                    and all(v == w for v in table.right_marginal().values()))
    pairs_disjoint = all(
        inst.recompute(l, r)
        and len(np.intersect1d(left.trace_keys(l), right.trace_keys(r))) == 0
        for l, r in table.pairs)

    desk = one_step_couple((-3, -2, -1, -1), (-1, 2, 2, 2), 4.0, 8.0, 384, (),
                           RandomStream(seed).tagged("acc-desk"),
                           sample_size=512, hittability_budget=64)
    positive = desk.success_prob.value > 0.0

    passed = (equiv and viol_valid and n_holds >= 1 and n_viols >= 1
              and balanced and marginals_ok and pairs_disjoint and positive)
    detail = (f"hall==matching on 100 instances ({n_holds} hold, "
              f"{n_viols} violate, certificates valid: {viol_valid}); table "
              f"mu={table.mu_mass}, residual={table.residual_mass}, "
              f"marginals exact: {marginals_ok}, matched traces disjoint: "
              f"{pairs_disjoint}; desk success={desk.success_prob.value:.4f} > 0")
    numbers = {"hall_holds": n_holds, "hall_violations": n_viols,
               "mu_mass": float(table.mu_mass),
               "residual_mass": float(table.residual_mass),
               "matched_pairs": len(table.pairs),
               "desk_success": desk.success_prob.value}
    return CheckResult("coupling-structure", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_drive_positivity(seed: int = DEFAULT_SEED) -> CheckResult:
    """Of 1000 full drives through radii 8, 16, 64, at least 1% end with
    completely disjoint traces, and every success-mass sequence is
    nonincreasing."""
    t0 = time.perf_counter()
    schedule = make_schedule([8.0, 16.0, 64.0])
    root = RandomStream(seed).tagged("acc-drive")
    replicas = 1000
    wins = 0
    mono = True
    for i in range(replicas):
        res = multiscale_drive(schedule, None, root.child(i))
        if res.success and res.disjoint:
            wins += 1
        seq = res.p_sequence
        mono &= all(b <= a for a, b in zip(seq, seq[1:]))
    need = replicas // 100
    passed = wins >= need and mono
    detail = (f"{wins}/{replicas} drives fully disjoint (need >= {need}); "
              f"all p-sequences nonincreasing: {mono}")
    numbers = {"wins": wins, "replicas": replicas, "fraction": wins / replicas}
    return CheckResult("drive-positivity", passed, detail, numbers,
                       time.perf_counter() - t0)


def check_determinism(seed: int = DEFAULT_SEED) -> CheckResult:
    """Every subcommand is a pure function of its config: a rerun is
    byte-identical once wall_time is dropped, and the worker count never
    touches the numbers.

    verify-all itself is exercised by running this suite, not from inside
    it."""
    from . import cli  # deferred; cli imports this module

    t0 = time.perf_counter()
    s = str(seed)
    annulus_argv = ["annulus", "--n", "20", "--a", "0.51", "--A", "2",
                    "--replicas", "2000", "--seed", s]
    couple_argv = ["couple-step", "--s1", "1,0,0,0", "--s2=-1,1,0,0",
                   "--n", "2", "--m", "4", "--T", "4",
                   "--sample-size", "none", "--seed", s]
    cases = [
        ["green", "--x", "1,0,0,0", "--replicas", "2000", "--seed", s],
        annulus_argv,
        ["exit-time", "--n", "5", "--replicas", "500", "--seed", s],
        ["boundary-layer", "--n", "15", "--k", "5", "--lam", "2",
         "--replicas", "500", "--seed", s],
        ["hitting-measure", "--n", "5", "--m", "10", "--x", "0,0,0,0",
         "--replicas", "500", "--seed", s],
        ["escape", "--n", "20", "--x", "17,0,0,0", "--k", "4",
         "--replicas", "500", "--seed", s],
        ["invsq", "--n", "100", "--replicas", "500", "--seed", s],
        ["intersect", "--s1", "8,0,0,0", "--s2=-8,0,0,0", "--m", "16",
         "--replicas", "200", "--seed", s],
        ["moments", "--n", "4", "--m", "8", "--k", "2", "--r", "2",
         "--replicas", "100", "--seed", s],
        ["good-times", "--n", "64", "--steps", "256", "--lam", "4",
         "--window", "32", "--replicas", "8", "--seed", s],
        ["hittability", "--n", "8", "--m", "16", "--eps", "0.2,0.4",
         "--outer", "20", "--inner", "20", "--seed", s],
        ["event-h", "--n", "8", "--k", "2", "--outer", "4", "--inner", "4",
         "--grid", "8", "--seed", s],
        couple_argv,
        ["drive", "--radii", "4,8", "--replicas", "1",
         "--sample-size", "64", "--budget", "8", "--seed", s],
    ]

    def render_once(argv):
        record = cli.run(cli.parse_config(argv))
        record.pop("wall_time")
        return json.dumps(record, sort_keys=True)

    unstable = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for argv in cases:
            if render_once(argv) != render_once(argv):
                unstable.append(argv[0])

        prior = os.environ.get("AVOIDANCE_THREADS")
        outs = {}
        try:
            for workers in ("1", "8"):
                os.environ["AVOIDANCE_THREADS"] = workers
                records = [cli.run(cli.parse_config(argv))
                           for argv in (annulus_argv, couple_argv)]
                outs[workers] = [(r["value"], r["stderr"]) for r in records]
        finally:
            if prior is None:
                os.environ.pop("AVOIDANCE_THREADS", None)
            else:
                os.environ["AVOIDANCE_THREADS"] = prior
    thread_ok = outs["1"] == outs["8"]

    passed = not unstable and thread_ok
    detail = (f"{len(cases)} subcommands byte-stable"
              + (f" except {unstable}" if unstable else "")
              + f"; workers 1 vs 8 identical: {thread_ok}")
    numbers = {"subcommands": len(cases), "unstable": unstable,
               "thread_invariant": thread_ok}
    return CheckResult("determinism", passed, detail, numbers,
                       time.perf_counter() - t0)


CHECKS: tuple[tuple[str, Callable[[int], CheckResult]], ...] = (
    ("annulus-exit", check_annulus_exit),
    ("green-decay", check_green_decay),
    ("intersection-growth", check_intersection_growth),
    ("exit-time-scaling", check_exit_time_scaling),
    ("inverse-square-tails", check_inverse_square_tails),
    ("hittability-tail", check_hittability_tail),
    ("pass-through-ratio", check_pass_through_ratio),
    ("coupling-structure", check_coupling_structure),
    ("drive-positivity", check_drive_positivity),
    ("determinism", check_determinism),
)


def run_all(seed: int = DEFAULT_SEED,
            only: Optional[Sequence[str]] = None) -> list[CheckResult]:
    """Run the checks in their fixed order; `only` restricts by name."""
    if only is not None:
        known = {name for name, _ in CHECKS}
        unknown = sorted(set(only) - known)
        if unknown:
            raise UsageError(f"unknown check names: {', '.join(unknown)}")
    wanted = set(only) if only is not None else None
    return [fn(seed) for name, fn in CHECKS
            if wanted is None or name in wanted]
