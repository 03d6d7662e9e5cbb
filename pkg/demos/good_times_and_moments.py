"""Good times along a walk, intersection moments, and the far-visibility
event.

A time is good when the walk neither lingers (inverse-square sum over the
next window stays moderate) nor revisits; bad times are rare.  The moment
check compares the r-th moment of the total intersection count against
its analytic envelope shape.

Run: python3 demos/good_times_and_moments.py
"""

import math

import numpy as np

import avoidance as av

rng = av.RandomStream(2024)

flags = []
for i in range(32):
    path = av.walk_fixed_length(av.origin(4), 2048, rng.tagged("gt").child(i))
    mask = av.classify_good_times(path, 1024.0, 4.0, 32)
    flags.append(mask.flags.mean())
print(f"good-time fraction over 32 walks of 2048 steps: "
      f"{np.mean(flags):.4f} (lam=4, window=32)")

n, m, k = 8.0, 32.0, 4
print(f"\nmoments of X = total intersections with {k} fresh walks, "
      f"n={n:.0f}, m={m:.0f}:")
for r in (1, 2):
    est = av.moment_sum(n, m, k, r, 2_000, rng.tagged(f"mom-{r}"))
    shape = av.moment_sum_bound_shape(n, m, k, r)
    print(f"  E[X^{r}] = {est.value:8.3f} +- {est.stderr:.3f}   "
          f"envelope shape {shape:9.1f}  ratio {est.value / shape:.4f}")
print("  (the ratio is the implied constant; the envelope holds with room)")

n = 32.0
kk = n / math.log2(n)
est = av.event_H_prob(n, kk, 0.05, 32, 16, rng.tagged("event-h"),
                      grid_size=24, horizon_factor=4.0)
thr = av.event_h_threshold(n, kk, 0.05)
print(f"\nP(some far boundary point sees the trace with prob > {thr:.4f}) "
      f"at n={n:.0f}: {est.value:.3f} +- {est.stderr:.3f}")
