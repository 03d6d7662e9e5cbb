"""Mutual intersections of two walks and the hittability tail.

Two independent walks on Z^4 share only a logarithmic number of points;
doubling the length of one adds a near-constant increment.  The second
half sweeps delta(eps), the fraction of outer paths whose trace a probe
walk hits with probability above eps.

Run: python3 demos/intersections_and_hittability.py
"""

import warnings

import avoidance as av

rng = av.RandomStream(2024)

x = (4, 0, 0, 0)
print(f"expected #(trace(R) /\\ trace(R')) with R' from {x}, 5k pairs")
prev = None
for n in (64, 256, 1024):
    est = av.expected_intersections(x, n, 5_000, rng.tagged(f"ei-{n}"))
    inc = "" if prev is None else f"  (+{est.value - prev:.3f})"
    print(f"  {n:>5} steps: {est.value:.4f} +- {est.stderr:.4f}{inc}")
    prev = est.value

print("\nP(two walks from opposite starts share a point), stop at B(32):")
est = av.intersection_prob((8, 0, 0, 0), (-8, 0, 0, 0), 32.0, 5_000,
                           rng.tagged("ip"))
print(f"  {est.value:.4f} +- {est.stderr:.4f}")

print("\ndelta(eps): outer paths n=32 -> B(128), 200x200")
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    sweep = av.hittability_sweep(32.0, 128.0, [0.1, 0.2, 0.4], 200, 200,
                                 rng.tagged("sweep"))
for eps, est in sweep:
    print(f"  eps={eps:<4} delta={est.value:.4f} +- {est.stderr:.4f}")
print("  (nondecreasing in eps and far below eps itself)")
