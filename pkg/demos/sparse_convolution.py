"""Sparse voxel convolution on a synthetic lamp.

Run with ``python3 demos/sparse_convolution.py``.
"""
import numpy as np

from psfseg import tensor as T
from psfseg.data import generate_synthetic, normalize_unit_ball
from psfseg.sparse import (
    block_params,
    conv_params,
    receptive_block,
    sparse_conv_regular,
    sparse_conv_valid,
    voxelize,
)

rng = T.make_rng(0, "demo")

# A surface cloud touches only a thin shell of voxels.
pc = normalize_unit_ball(generate_synthetic("lamp", 1, 4096, rng).shapes[0])
vox = voxelize(pc, resolution=50, features="coords")
grid = vox.grid
print(f"{len(pc)} points -> {len(grid)} active voxels of 50^3 ({len(grid) / 50**3:.2%} active)")

# A regular convolution grows the active set by one voxel in every direction,
# so stacking a few of them fills space quickly.
occ = voxelize(pc, resolution=50).grid
p = conv_params(rng, 1, 1)
g = occ
for i in range(3):
    g = sparse_conv_regular(g, p)
    print(f"after {i + 1} regular conv(s): {len(g)} active sites")

# The valid convolution keeps the input sites, however deep the stack.
p = conv_params(rng, 4, 8)
out = sparse_conv_valid(grid, p)
print("valid conv keeps the active set:", out.key_set() == grid.key_set(), "width", out.channels)

# The receptive block adds a strided path that reaches two-voxel gaps.
bp = block_params(rng, 8)
out2 = receptive_block(out, bp)
print("receptive block keeps the active set:", out2.key_set() == grid.key_set())

# Majority labels per voxel are the training targets.
counts = np.bincount(vox.site_labels, minlength=3)
print("voxels per part:", counts.tolist())
