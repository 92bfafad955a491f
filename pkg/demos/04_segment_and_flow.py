# coding: utf-8

# # Motion masks and scene flow from a fitted model
#
# Both come for free once per-pixel motion is known: threshold its length to
# find what moves, project it to get optical flow.

# In[1]:

from pathlib import Path

import numpy as np

from splat4d.evalapps import angular_error_deg, mask_iou, scene_flow, segment_moving
from splat4d.fitting import FitConfig, fit_scene
from splat4d.formats import write_image
from splat4d.geometry import unproject_depth
from splat4d.geometry import normalize_scene
from splat4d.motion import motion_map_from_field
from splat4d.synth import dynamic_spec, generate

out_dir = Path(__file__).with_name("out")
out_dir.mkdir(exist_ok=True)

scene = generate(dynamic_spec(seed=0, resolution=(32, 32)))
bundle, rec = normalize_scene(scene.bundle)
res = fit_scene(bundle, FitConfig(iterations=800))

N, (H, W) = bundle.n_frames, bundle.resolution
mm = motion_map_from_field(res.field, res.sources, N, (H, W), bundle.timestamps)


# Each frame is compared against the keyframe farthest away in time, where
# the motion is largest.

# In[2]:

for i in range(N):
    q = N - 1 if i <= (N - 1) / 2 else 0
    mask = segment_moving(mm.displacements[q, i], 0.05)
    print(f"frame {i}: IoU {mask_iou(mask, scene.masks[i]):.3f}")
    write_image(out_dir / f"moving_{i}.png", np.concatenate([mask, scene.masks[i]], axis=1).astype(float))


# Flow from the first frame to the last, against flow built from the true
# motion of the surface seen at each pixel.

# In[3]:

cams = bundle.cameras
i, q = 0, N - 1
pos = np.zeros((N, H, W, 3))
pos[res.sources[:, 0], res.sources[:, 1], res.sources[:, 2]] = res.pixels.position
pred = scene_flow(mm.displacements[q, i], pos[i], cams[i], cams[q])
gt_pts, _ = unproject_depth(bundle.depths[i], cams[i])
gt = scene_flow(scene.pixel_motion(i, cams[q].timestamp) / rec.scale, gt_pts, cams[i], cams[q])
sel = scene.masks[i] & pred.valid & gt.valid
err = angular_error_deg(pred.flow[sel], gt.flow[sel])
print(f"{np.mean(err < 5):.1%} of {sel.sum()} moving pixels within 5 deg, median error {np.median(err):.2f} deg")
