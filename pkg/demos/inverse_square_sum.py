"""Concentration of sum (|R(t)|+1)^-2 at the log2(n) scale.

The sum over the first n steps of a free walk grows like log2(n): the
demo prints the sample quartiles against log2(n) for three decades and
the tail fractions outside [log2(n)/4, 4 log2(n)].

Run: python3 demos/inverse_square_sum.py
"""

import math

import numpy as np

import avoidance as av

rng = av.RandomStream(2024)

print(f"{'n':>7} {'log2 n':>7} {'q25':>7} {'median':>7} {'q75':>7} "
      f"{'P(>4L)':>8} {'P(<L/4)':>8}")
for n in (100, 1_000, 10_000):
    sums = av.inverse_square_samples(n, 20_000, rng.tagged(f"invsq-{n}"))
    lg = math.log2(n)
    q25, q50, q75 = np.percentile(sums, (25, 50, 75))
    hi = float((sums > 4 * lg).mean())
    lo = float((sums < lg / 4).mean())
    print(f"{n:>7} {lg:>7.2f} {q25:>7.2f} {q50:>7.2f} {q75:>7.2f} "
          f"{hi:>8.4f} {lo:>8.4f}")
print("\nthe quartiles track log2(n); both tails stay small")
