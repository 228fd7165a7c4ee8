"""
Pull and push embedding losses
==============================

Twelve pixels from three lanes start with random 2-d embeddings. Plain
gradient descent on the pull and push terms draws each lane together and
pushes the lane means apart, after which greedy clustering separates them.
"""
import numpy as np

from centerline_factory.heads import LossParams, embed_loss, pull_loss, push_loss

rng = np.random.default_rng(0)
instance = np.repeat([1, 2, 3], 4)
e = rng.normal(0, 1, (12, 2))
params = LossParams()

for step in range(1001):
    value, grad = embed_loss(e, instance, params)
    if step % 200 == 0:
        print(f"step {step:3d}  pull {pull_loss(e, instance, params.delta_pull)[0]:.4f}"
              f"  push {push_loss(e, instance, params.delta_push)[0]:.4f}")
    e -= 0.1 * grad

means = np.array([e[instance == k].mean(0) for k in (1, 2, 3)])
spread = max(np.linalg.norm(e[instance == k] - means[k - 1], axis=1).max() for k in (1, 2, 3))
gaps = [np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i + 1, 3)]
print(f"largest distance to own mean {spread:.3f} (pull margin {params.delta_pull})")
print(f"smallest distance between means {min(gaps):.3f} (push margin {params.delta_push})")
