"""Estimate a grasp point from a depth image and a candidate bounding box.

A synthetic tabletop: a flat background plane at 1.5 m with a box-shaped
object at 1.0 m. Every valid depth pixel inside the candidate box is
back-projected through the pinhole model; the per-axis median lands on the
object even with background pixels and dropouts inside the box.
"""

import numpy as np

from pickrank.corpus import Box
from pickrank.grasp import Intrinsics, grasp_point

H, W = 240, 320
intrinsics = Intrinsics(fx=300.0, fy=300.0, cx=(W - 1) / 2, cy=(H - 1) / 2)

depth = np.full((H, W), 1.5)                      # background plane
depth[100:160, 140:200] = 1.0                     # the object
rng = np.random.default_rng(0)
dropout_v = rng.integers(100, 160, size=200)      # sensor dropouts inside the object
dropout_u = rng.integers(140, 200, size=200)
depth[dropout_v, dropout_u] = 0.0

box = Box(x=132, y=92, w=78, h=74)                # detection box, slightly loose
point = grasp_point(depth, box, intrinsics)
print(f"candidate box: {box}")
print(f"grasp point (camera frame, meters): x={point[0]:+.4f} y={point[1]:+.4f} z={point[2]:.4f}")

assert abs(point[2] - 1.0) < 1e-9, "median depth must land on the object, not the background"
print("median landed on the object plane despite loose box and dropouts")

# a single-pixel box is the exact back-projection of that pixel
single = grasp_point(depth, Box(x=170, y=130, w=1, h=1), intrinsics)
u, v, z = 170, 130, depth[130, 170]
expected = np.array([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])
assert np.allclose(single, expected)
print(f"single-pixel box back-projects exactly to {single.round(4)}")
