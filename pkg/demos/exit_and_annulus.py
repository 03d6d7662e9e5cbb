"""Exit-time scaling, the annulus exit probability against its scale-free
limit, and the boundary-layer occupation tail.

Run: python3 demos/exit_and_annulus.py
"""

import avoidance as av

rng = av.RandomStream(2024)

print("mean exit time of B(n), 20k walks per radius")
prev = None
for n in (10, 20, 40):
    res = av.exit_time_tail(float(n), 20_000, rng.tagged(f"tau-{n}"))
    ratio = "" if prev is None else f"  x{res.mean.value / prev:.2f}"
    print(f"  n={n:<3} mean tau = {res.mean.value:8.1f}{ratio}")
    prev = res.mean.value
print("  (doubling n roughly quadruples the mean, the n^2 law)")

a, A = 0.51, 2.0
limit = av.annulus_exit_limit(a, A)
est = av.annulus_exit_prob(100.0, a, A, 100_000, rng.tagged("annulus"))
print(f"\nexit {{{a}n <= |z| <= {A}n}} outward from |z|=n at n=100:")
print(f"  estimate {est.value:.5f} +- {est.stderr:.5f}, limit {limit:.5f}")

est = av.boundary_layer_tail(15.0, 5.0, 2.0, 20_000, rng.tagged("layer"))
print(f"\nP(more than 2k^2 trace points in the depth-5 shell of B(15)): "
      f"{est.value:.4f}")
