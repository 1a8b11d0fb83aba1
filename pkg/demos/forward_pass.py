"""Generate one scene, run an untrained model and print what each branch returns."""

import numpy as np

from sparsefuse import nncore as nn
from sparsefuse.config import RunConfig
from sparsefuse.geometry import project_points
from sparsefuse.model import SparseFusionModel
from sparsefuse.scenegen import generate_scene

cfg = RunConfig()
scene = generate_scene(0, cfg.generator)
print(f"scene 0: {len(scene.points)} points, {len(scene.objects)} objects, {len(scene.cameras)} cameras")

for o in scene.objects:
    r = float(np.hypot(*o.box.center[:2]))
    seen = [c.view_id for c in scene.cameras if project_points(o.box.center[None], c)[2][0]]
    print(f"  class {o.category} at {r:5.1f} m, visible in views {seen}")

model = SparseFusionModel(cfg)
with nn.no_grad():
    out = model.forward(scene)
print("lidar queries:", len(out.lidar.boxes.scores))
print("camera queries:", len(out.camera.boxes.scores))
print("fused outputs:", len(out.fused.boxes.scores))
