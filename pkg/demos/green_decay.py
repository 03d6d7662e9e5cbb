"""Hitting probabilities G(0,x) along the x-axis: walk estimates against
the linear solve, and the decay slope in log-log coordinates.

Run: python3 demos/green_decay.py
"""

import numpy as np

import avoidance as av

rng = av.RandomStream(2024)

print("G(0,x) on the axis, 200k walks per point, truncated at B(40)")
print(f"{'x':>12} {'estimate':>10} {'exact':>10} {'sigma':>7}")
for r in (1, 2, 3, 4):
    x = (r, 0, 0, 0)
    est = av.estimate_green(x, 200_000, rng.tagged(f"green-{r}"),
                            truncation_radius=40.0)
    exact = av.green_exact(x, 40)
    sig = abs(est.value - exact) / est.stderr if est.stderr else 0.0
    print(f"{str(x):>12} {est.value:>10.5f} {exact:>10.5f} {sig:>6.1f}s")

radii = (4, 8, 16, 32)
vals = [av.estimate_green((r, 0, 0, 0), 200_000, rng.tagged(f"slope-{r}")).value
        for r in radii]
slope = np.polyfit(np.log2(radii), np.log2(vals), 1)[0]
print(f"\nlog2 G vs log2 |x| over {radii}: slope {slope:.3f} (|x|^-2 decay)")
