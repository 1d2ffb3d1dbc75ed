"""
Tape-based reverse-mode differentiation
=======================================

Every operation appends one node to the active Graph. backward() walks the
tape in reverse and returns a gradient for each leaf that asked for one.
"""

import numpy as np

from hybridvfl import autodiff as ad
from hybridvfl.autodiff import Graph, Tensor

# f(W) = sum(relu(x @ W)); only W is a leaf we care about
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3)))
W = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

with Graph() as g:
    loss = ad.sum_(ad.relu(ad.matmul(x, W)))

print("loss:", loss.item())
print("tape length:", len(g.nodes))
grad = ad.backward(g, loss)[W]
print("dloss/dW:\n", grad)

# the same gradient by hand: x^T @ 1[x @ W > 0]
mask = (x.data @ W.data > 0).astype(float)
print("matches hand-derived rule:", np.allclose(grad, x.data.T @ mask))

# central differences as an independent check
err = ad.finite_diff_check(lambda w: ad.sum_(ad.relu(ad.matmul(x, w))), W)
print(f"finite-difference relative error: {err:.2e}")

# shapes never broadcast silently
try:
    ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
except ad.DimensionError as exc:
    print("rejected:", exc)
