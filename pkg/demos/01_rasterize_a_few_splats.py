# coding: utf-8

# # Rendering splatter pixels
#
# A handful of anisotropic Gaussians, splatted into a 64x64 pinhole camera.
# The tiled renderer and the brute-force reference should agree to float
# round-off, and the backward pass gives gradients for every attribute.

# In[1]:

from pathlib import Path

import numpy as np

from splat4d.core import Camera, SplatterPixels
from splat4d.formats import write_image
from splat4d.rasterizer import rasterize, rasterize_backward, reference_rasterize

out_dir = Path(__file__).with_name("out")
out_dir.mkdir(exist_ok=True)


# A camera at the origin looking down +z. Intrinsics are in pixels.

# In[2]:

cam = Camera(np.eye(3), np.zeros(3), fx=64, fy=64, cx=32, cy=32, width=64, height=64)

rng = np.random.default_rng(7)
n = 40
pixels = SplatterPixels(
    position=np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2, 4, n)],
    rotation=rng.normal(size=(n, 4)),
    log_scale=np.log(rng.uniform(0.04, 0.25, (n, 3))),
    opacity_logit=rng.normal(1.0, 1.0, n),
    color=rng.uniform(size=(n, 3)),
)


# In[3]:

out = rasterize(pixels, cam, background=(1.0, 1.0, 1.0))
ref = reference_rasterize(pixels, cam, background=(1.0, 1.0, 1.0))
print("max |tiled - reference| rgb:  ", np.abs(out.rgb - ref.rgb).max())
print("max |tiled - reference| depth:", np.abs(out.depth - ref.depth).max())
print("coverage (mean alpha):", out.alpha.mean().round(3))

write_image(out_dir / "splats_rgb.png", np.clip(out.rgb, 0, 1))
write_image(out_dir / "splats_alpha.png", out.alpha)


# Gradients of a simple objective, the mean red channel, with respect to every
# Gaussian. Only the red colour gradient of visible Gaussians is non-zero in
# the colour group.

# In[4]:

g_rgb = np.zeros_like(out.rgb)
g_rgb[..., 0] = 1.0 / (cam.width * cam.height)
grads = rasterize_backward(out, grad_rgb=g_rgb)
for name, g in grads.items():
    print(f"{name:14s} shape {g.shape}  |g|max {np.abs(g).max():.3e}")
