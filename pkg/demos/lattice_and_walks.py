"""The ground floor: balls, boundaries, walks, and exact enumeration.

Run: python3 demos/lattice_and_walks.py
"""

import numpy as np

import avoidance as av

print("inner vertex boundary of B(n) = {x : |x| < n} in Z^4")
for n in (2.0, 4.0, 8.0, 16.0):
    print(f"  n={n:>4.0f}: {av.boundary_size(av.ball(n)):>6} boundary points")

rng = av.RandomStream(2024)
path = av.walk_to_boundary(av.origin(4), av.ball(8.0), rng.tagged("one-walk"))
print(f"\none walk to the boundary of B(8): {path.stop_index} steps, "
      f"endpoint {tuple(path.endpoint().coords)}, "
      f"{len(path.trace())} distinct points")

ps = av.enumerate_paths(av.origin(4), 4, stop_radius=4.0)
stopped = int(av.mask_stopped(ps).sum())
print(f"\nall 8^4 = {len(ps)} four-step words from the origin, "
      f"{stopped} stopped at B(4) early")

lengths = np.array([len(av.walk_to_boundary(av.origin(4), av.ball(8.0),
                                            rng.tagged("lens").child(i)).trace())
                    for i in range(200)])
print(f"trace sizes over 200 walks to B(8): "
      f"min {lengths.min()}, median {int(np.median(lengths))}, "
      f"max {lengths.max()}")
