"""Neighborhood sampling, the learned K x K weighting and the adversarial losses.

Run with ``python3 demos/pointconv_and_losses.py``.
"""
import numpy as np

from psfseg import tensor as T
from psfseg.blocks import AdvLossInputs, AlphaGanBatch, adv_seg_losses, alpha_gan_losses, dense_block_forward, dense_block_params
from psfseg.data import generate_synthetic, normalize_unit_ball
from psfseg.pointconv import fps_downsample, knn_neighborhood, pointconv_forward, pointconv_layer, weighting

rng = T.make_rng(0, "demo")
pts = normalize_unit_ball(generate_synthetic("table", 1, 1024, rng).shapes[0]).points

# Farthest-point sampling spreads the queries over the shape.
q = pts[fps_downsample(pts, 64)]
nb = knn_neighborhood(pts, q, 8)
print(f"64 queries, 8 neighbors each; mean neighbor distance {np.linalg.norm(nb.local, axis=2).mean():.3f}")

# The s-MLP starts at the identity, so a fresh layer is a plain gathered conv.
layer = pointconv_layer(rng, 8, 3, 16)
w = weighting(nb.local, layer).data
print(f"initial W distance from identity: {np.abs(w - np.eye(8)).max():.3f}")
out = pointconv_forward(nb, pts, layer)
print("pointconv output", out.shape)

# A dense block concatenates five local layers with their global max and mean.
feats = dense_block_forward(pts, dense_block_params(rng, 3))
print("dense block features", feats.shape)

# Loss formulas on a toy segmentation.
y = np.eye(3)[rng.integers(0, 3, 10)]
seg = 0.7 * y + 0.1
for d_fake in (0.1, 0.5, 0.9):
    l_seg, l_d = adv_seg_losses(AdvLossInputs(seg, y, d_real=0.9, d_fake=d_fake))
    print(f"D_fake={d_fake}: L_SEG={l_seg:.4f}  L_D={l_d:.4f}")

x = (rng.random((8, 8, 8)) > 0.7).astype(float)
l_eg, l_d, l_dl = alpha_gan_losses(AlphaGanBatch(x, x, x, 0.5, 0.5, 0.5, 0.5, 0.5))
print(f"alpha-GAN at D=0.5: L_EG={l_eg:.6f} L_D={l_d:.6f} (3 ln 2 = {3 * np.log(2):.6f}) L_DL={l_dl:.6f}")
