"""
Encoders, fusion and the training objective
===========================================

Each client turns its raw rows into two 400-wide embeddings, one meant to be
shared across modalities (inv) and one modality-specific (spec). The server
stacks the four as tokens, runs one transformer block, mean-pools and
classifies. The loss is cross-entropy plus lambda times a cosine
consistency term on the two inv embeddings.
"""

import numpy as np

from hybridvfl import nn
from hybridvfl.autodiff import Tensor
from hybridvfl.data import SyntheticSpec, generate_synthetic
from hybridvfl.encoders import encode_image, encode_tabular, init_image_encoder, init_tabular_encoder
from hybridvfl.fusion import FusionConfig, HybridHead, build_sequence

ds = generate_synthetic(SyntheticSpec(n=14, seed=0))
x_img, x_tab, y = ds.image_view[:6], ds.tabular_view[:6], ds.labels[:6]
print("image rows:", x_img.shape, " tabular rows:", x_tab.shape)

img = encode_image(Tensor(x_img), init_image_encoder(seed=0))
tab = encode_tabular(Tensor(x_tab), init_tabular_encoder(seed=0, in_features=x_tab.shape[1]))
print("image bundle:", img.z_inv.shape, img.z_spec.shape)

seq = build_sequence(img, tab)
print("token sequence:", seq.shape, "(image.inv, image.spec, tabular.inv, tabular.spec)")

for lam in (0.0, 0.1, 1.0):
    out = HybridHead(FusionConfig(lambda_cons=lam), seed=0).forward(img, tab, y)
    print(f"lambda={lam:<4} cross-entropy={out.cross_entropy:.4f} consistency={out.consistency:.4f} total={out.loss.item():.4f}")

# the consistency term lives in [0, 2]: aligned, orthogonal, opposite
v = np.array([[1.0, 2.0, -1.0]])
u = np.array([[2.0, -1.0, 0.0]])
for name, other in (("same direction", 3 * v), ("orthogonal", u), ("opposite", -v)):
    print(f"{name:>15}: {nn.cosine_consistency(Tensor(v), Tensor(other)).item():.3f}")
