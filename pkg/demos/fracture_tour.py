"""Break a shape, check the fracture algebra, and look at the pieces.

Run: python demos/fracture_tour.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from fracta.algebra import hard_intersection
from fracta.fracture import desk_shapes, random_fracture, save_tuple, validate_tuple
from fracta.geometry import is_watertight
from fracta.isosurface import query_grid
from fracta.render import fracture_camera, render_observation, write_pnm

out = Path(sys.argv[1] if len(sys.argv) > 1 else "fracture_tour")

# a complete shape and a random break primitive placed on its surface
shape = desk_shapes()[0]
tup = random_fracture(shape, seed=7, grid_k=64)
print(f"primitive: {tup.primitive.kind}, restoration fraction {tup.restoration_fraction:.3f}")

# the restoration is the part of the complete shape inside the break shape
report = validate_tuple(tup, 50_000, seed=1)
print(f"invariant violations on 50k random points: {report.total_violations}")

grid_c = query_grid(tup.complete, 64)
grid_b = query_grid(tup.break_shape, 64)
grid_r = hard_intersection(grid_c, grid_b)
print(f"occupied cells: complete {grid_c.occupied().sum()}, restoration {grid_r.occupied().sum()}")

for name in ("complete_mesh", "fractured_mesh", "restoration_mesh"):
    mesh = getattr(tup, name)
    print(f"{name}: {len(mesh.triangles)} triangles, watertight {bool(is_watertight(mesh))}")

# the observation a model sees: the fractured piece, viewed along the fracture normal
camera = fracture_camera(tup, width=128, height=128)
obs = render_observation(tup.fractured_mesh, camera)
print(f"camera at {np.round(camera.eye, 3)}, silhouette covers {obs.silhouette.mean():.1%} of the frame")

save_tuple(tup, out / "bundle")
write_pnm(obs.image, out / "observation.pgm")
print(f"wrote {out}/")
