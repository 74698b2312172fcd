"""Write a depth-scan record, read it back, and project a model into the scan camera.

Run: python demos/scan_masks.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from fracta.eval import dice, largest_component
from fracta.geometry import RigidTransform, box_mesh
from fracta.raster import intrinsics
from fracta.scan import DepthScanRecord, parse_scan, project_mask, write_scan

out = Path(sys.argv[1] if len(sys.argv) > 1 else "scan_masks")
out.mkdir(parents=True, exist_ok=True)

# the alignment T maps scan (camera) coordinates to model coordinates;
# here the model sits 2 units in front of the camera
T = RigidTransform(translation=(0.0, 0.0, -2.0))
rng = np.random.default_rng(0)
pts = rng.uniform(-0.2, 0.2, size=(500, 3)) + [0, 0, 2]
normals = np.tile([0.0, 0.0, -1.0], (500, 1))
rec = DepthScanRecord(pts, rng.random((500, 3)), normals, T.matrix())
write_scan(rec, out / "scan0.fxrg")
back = parse_scan(out / "scan0.fxrg")
print(f"read {len(back.points)} points, alignment translation {back.alignment.translation}")

# silhouette of a box model seen by a 64x64 pinhole camera
K = intrinsics(70, 70, 32, 32)
mask = project_mask(box_mesh(), back.alignment, K, (64, 64))
print(f"mask covers {mask.sum()} pixels")

# a noisy copy, cleaned by keeping its largest connected region
noisy = mask ^ (rng.random(mask.shape) < 0.02)
cleaned = largest_component(noisy)
print(f"dice vs the clean mask: noisy {dice(noisy, mask):.3f}, cleaned {dice(cleaned, mask):.3f}")
