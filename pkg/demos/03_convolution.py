"""The generalized point convolution.

For each query x:  out(x) = norm * sum_{y in N(x)} f(y)^T kappa P e(y - x)
The embedding e is pluggable; P projects its native dimension to a common
width so every embedding kind gets the same parameter budget.
"""

import numpy as np

from pne import (
    KernelPointEmbedding,
    PointCloud,
    ball_query,
    conv_backward,
    conv_forward,
    icosahedron_kernel_points,
    init_conv_layer,
)
from pne.geometry import NeighborList

rng = np.random.default_rng(0)
support = PointCloud(rng.uniform(-1, 1, size=(64, 3)))
query = PointCloud(rng.uniform(-1, 1, size=(20, 3)))
neighbors = ball_query(query, support, 0.6)

emb = KernelPointEmbedding(icosahedron_kernel_points(0.36), 0.4, "gaussian")
layer = init_conv_layer(emb, in_features=8, out_features=12, embed_dim=16, seed=1)
features = rng.standard_normal((64, 8))

out = conv_forward(layer, query, support, neighbors, features)
print(f"forward: {features.shape} features -> {out.shape} outputs")

# the sum over neighbors makes the layer permutation invariant
idx = neighbors.indices.copy()
for q in range(neighbors.num_queries):
    s, e = neighbors.offsets[q], neighbors.offsets[q + 1]
    idx[s:e] = rng.permutation(idx[s:e])
shuffled = conv_forward(layer, query, support,
                        NeighborList(neighbors.offsets, idx), features)
print(f"neighbor permutation changes output by {np.abs(out - shuffled).max():.1e}")

# exact analytic gradients for every learnable tensor
upstream = rng.standard_normal(out.shape)
grads = conv_backward(layer, query, support, neighbors, features, upstream)
print(f"gradients: kernel {grads.d_kernel.shape}, projection "
      f"{grads.d_projection.shape}, features {grads.d_features.shape}")

# finite-difference check on one kernel entry
h = 1e-6
layer.kernel[0, 0, 0] += h
up_ = conv_forward(layer, query, support, neighbors, features)
layer.kernel[0, 0, 0] -= 2 * h
dn_ = conv_forward(layer, query, support, neighbors, features)
layer.kernel[0, 0, 0] += h
fd = ((up_ - dn_) * upstream).sum() / (2 * h)
print(f"kernel[0,0,0]: analytic {grads.d_kernel[0, 0, 0]:.6f}, "
      f"finite difference {fd:.6f}")
