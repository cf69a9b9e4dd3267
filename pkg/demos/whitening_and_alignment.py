"""
Whitening a batch and aligning two views
========================================

A tour of the two building blocks that sit between the convolutional stem
and the shared classifier: the batch-whitening layer and the NT-Xent
similarity loss.
"""

# %%
# Start from a strongly correlated batch.
import numpy as np

from mmfl.autograd import Tensor
from mmfl.layers import BatchWhitening, compute_whitening_matrix
from mmfl.losses import ntxent_loss

rng = np.random.default_rng(0)
mix = np.array([[2.0, 0.0, 0.0], [1.5, 0.5, 0.0], [0.3, 0.2, 0.1]])
x = rng.normal(size=(256, 3)) @ mix.T + 4.0
print("input covariance\n", np.cov(x.T, bias=True).round(3))

# %%
# In training mode the layer centers the batch and multiplies by the inverse
# square root of its covariance. gamma and beta start at 1 and 0, so the
# output covariance is the identity up to the eps shrinkage.
layer = BatchWhitening(3, eps=1e-5).astype(np.float64)
out = layer(Tensor(x), "train").data
print("output covariance\n", np.cov(out.T, bias=True).round(6))

# %%
# The matrix itself, checked against its defining property.
cov = np.cov(x.T, bias=True)
w = compute_whitening_matrix(cov, 1e-5).data
print("W (C + eps I) W^T\n", (w @ (cov + 1e-5 * np.eye(3)) @ w.T).round(8))

# %%
# The running statistics moved one momentum step towards the batch.
print("running mean", layer.running_mean.round(3))

# %%
# NT-Xent pulls row z of one view towards row z of the other and pushes it
# away from the remaining rows. The positive pair is left out of the
# denominator, which gives these closed forms.
pair = Tensor(np.array([[0.3, -1.2], [0.3, -1.2]]))
print("two identical rows:", float(ntxent_loss(pair, pair).data))
same = Tensor(np.tile([1.0, 2.0, -0.5], (8, 1)))
print("eight identical rows:", float(ntxent_loss(same, same).data), "= 8 log 7 =", 8 * np.log(7))
eye = Tensor(np.eye(2))
print("orthogonal pair at tau=1:", float(ntxent_loss(eye, eye, tau=1.0).data))

# %%
# Aligned views score lower than unrelated ones.
a = rng.normal(size=(16, 8))
noisy = a + 0.1 * rng.normal(size=a.shape)
print("aligned  ", float(ntxent_loss(Tensor(a), Tensor(noisy)).data))
print("unrelated", float(ntxent_loss(Tensor(a), Tensor(rng.normal(size=a.shape))).data))
