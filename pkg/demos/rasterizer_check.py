"""Compare the tiled rasterizer with the per-pixel oracle and check one gradient by finite differences."""
import time

import numpy as np

from emohead4d.core import GaussianCloud, look_at_camera
from emohead4d.rasterizer import render, render_backward, render_oracle

rng = np.random.default_rng(0)
n = 150
p = rng.uniform(0.05, 0.95, n)
cloud = GaussianCloud(rng.uniform(-0.3, 0.3, (n, 3)), np.log(rng.uniform(0.03, 0.1, (n, 3))),
                      rng.normal(size=(n, 4)), np.log(p / (1 - p)), rng.normal(0, 0.3, (n, 48)))
cam = look_at_camera([0.3, 0.1, 2.0], [0, 0, 0], 64, 64, fx=80.0)

render(cloud, cam)  # compile the kernels first
t = time.perf_counter()
fast = render(cloud, cam)
t_fast = time.perf_counter() - t
t = time.perf_counter()
slow = render_oracle(cloud, cam)
t_slow = time.perf_counter() - t
print(f"max |tiled - oracle| = {np.abs(fast.rgb - slow.rgb).max():.2e}  ({t_fast * 1e3:.1f} ms vs {t_slow * 1e3:.1f} ms)")

w = rng.normal(size=fast.rgb.shape)
grad = render_backward(cloud, cam, None, w)
h, i = 1e-4, 7
for field in ("positions", "log_scales", "opacity_logits"):
    x = getattr(cloud, field).reshape(-1)
    old = x[i]
    x[i] = old + h
    fp = np.sum(render(cloud, cam).rgb * w)
    x[i] = old - h
    fm = np.sum(render(cloud, cam).rgb * w)
    x[i] = old
    print(f"{field}[{i}]: analytic {getattr(grad, field).reshape(-1)[i]:+.6f}  numeric {(fp - fm) / (2 * h):+.6f}")
