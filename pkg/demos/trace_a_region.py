"""Follow one region backwards through three integer flow fields.

The region at (x, y) = (3, 4) in the current frame moved there from (2, 4),
which in turn came from (3, 4), which came from (1, 3). Each flow field maps
a pixel of frame t to its source in frame t-1.
"""

import numpy as np

from tcnet.trajectory import build_location_map

flows = [np.zeros((8, 8, 2), dtype=np.int64) for _ in range(3)]  # most recent first
flows[0][4, 3] = (-1, 0)
flows[1][4, 2] = (1, 0)
flows[2][4, 3] = (-2, -1)

loc = build_location_map(flows)
path = [tuple(int(v) for v in p) for p in loc.coords[4, 3]]
print("trajectory of (3, 4):", " -> ".join(map(str, path)))

# pixels that never move keep their coordinate at every step
print("trajectory of (0, 0):", [tuple(int(v) for v in p) for p in loc.coords[0, 0]])

