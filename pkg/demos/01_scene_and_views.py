"""
A synthetic room, its frames, and view selection
================================================

Render one room, lift a frame back to 3D and watch how much of a window the
greedily selected frames cover as the frame budget grows.
"""

import numpy as np

from viewfuse.core import unproject
from viewfuse.pipeline import chunk_view_report
from viewfuse.synth import CLASS_NAMES, SynthConfig, generate_scene, random_scene_spec, surface_areas
from viewfuse.viewsel import build_coverage_index

config = SynthConfig(frames_per_scene=12)
spec = random_scene_spec(7, config)
scene = generate_scene(spec)
scene.coverage = build_coverage_index(scene.points, scene.frames)
print(f"room {np.round(spec.room, 2)}, {scene.points.n} points, {len(scene.frames)} frames")

# label histogram of the cloud follows the visible area of each class
counts = np.bincount(scene.points.labels, minlength=len(CLASS_NAMES))
for name, n, area in zip(CLASS_NAMES, counts, surface_areas(spec)):
    print(f"  {name:<7} {n:6d} points  {area:6.2f} m^2")

# every valid pixel of a frame lands on a surface of the room
frame = scene.frames[0]
lifted = unproject(frame)
print(f"frame 0: {lifted.n} of {frame.depth.size} pixels lifted, "
      f"depth range {frame.depth[frame.depth > 0].min():.2f}..{frame.depth.max():.2f} m")

# coverage of each inference window by the unprojection of its selected frames
for m in (1, 3, 5):
    windows = chunk_view_report(scene, m, n_chunk=1024)
    cov = np.mean([w["coverage"] for w in windows])
    print(f"M={m}: mean coverage {cov:.3f} over {len(windows)} windows, "
          f"first window uses frames {windows[0]['frames']}")
