"""Quick in-process oracle and gradient checks behind ``psfseg selfcheck``."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import AdvLossInputs, AlphaGanBatch, adv_seg_losses, alpha_gan_losses, dense_block_forward, dense_block_params
from .data import PointCloud
from .hgrid import compose_full, random_hierarchy
from .pdnet import pd_node_forward
from .pointconv import knn_neighborhood, pointconv_forward, pointconv_layer
from .sparse import KeySet, SparseGrid, block_params, conv_params, receptive_block, sparse_conv_valid
from .trees import build_kd_largest_span

GRAD_TOL = 1e-4


def _unit(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _grid(rng, res, cin):
    keys = np.unique(rng.integers(0, res, size=(12, 3)), axis=0)
    return SparseGrid(KeySet(res, keys), T.Tensor(rng.standard_normal((len(keys), cin)), requires_grad=True))


def _grad_pd(rng):
    v1 = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    v2 = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w, b = T.glorot(rng, (6, 4, 5), "w"), T.Param(rng.standard_normal((6, 5)), "b")
    n1, n2 = _unit(rng, 3), _unit(rng, 3)
    return T.gradcheck(lambda: pd_node_forward(v1, v2, n1, n2, w, b), [v1, v2, w, b])


def _grad_vsc(rng):
    g = _grid(rng, 6, 2)
    p = conv_params(rng, 2, 3)
    return T.gradcheck(lambda: sparse_conv_valid(g, p).features, [g.features, p.weight, p.bias])


def _grad_block(rng):
    g = _grid(rng, 6, 2)
    bp = block_params(rng, 2)
    return T.gradcheck(lambda: receptive_block(g, bp).features, [g.features] + bp.params())


def _grad_pointconv(rng):
    src = rng.standard_normal((10, 3))
    nb = knn_neighborhood(src, src[:4], 3)
    layer = pointconv_layer(rng, 3, 2, 3, hidden=5)
    f = T.Tensor(rng.standard_normal((10, 2)), requires_grad=True)
    return T.gradcheck(lambda: pointconv_forward(nb, f, layer), [f] + layer.params())


def _grad_dense(rng):
    p = dense_block_params(rng, 3, widths=(4, 3))
    x = T.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    return T.gradcheck(lambda: dense_block_forward(x, p, "train"), [x] + p.params())


def _losses(rng):
    seg = np.full((4, 2), 0.5)
    y = np.eye(2)[[0, 1, 1, 0]]
    _, l_d = adv_seg_losses(AdvLossInputs(seg, y, 0.5, 0.5))
    g = np.zeros((2, 2, 2))
    _, l_d2, l_dl = alpha_gan_losses(AlphaGanBatch(g, g, g, 0.5, 0.5, 0.5, 0.5, 0.5))
    return max(abs(l_d - 2 * np.log(2)), abs(l_d2 - 3 * np.log(2)), abs(l_dl - 2 * np.log(2)))


def _kd_invariance(rng):
    pts = rng.standard_normal((37, 3))
    a = build_kd_largest_span(PointCloud(pts)).leaf_points()
    b = build_kd_largest_span(PointCloud(pts[rng.permutation(37)])).leaf_points()
    return float(np.abs(a - b).max())


def _compose(rng):
    hg = random_hierarchy(rng, base=2, levels=3)
    occ = compose_full(hg)
    worst = 0
    for v in np.ndindex(occ.shape):
        cell = None
        for l in range(hg.depth):
            c = hg.levels[l].get(tuple(x >> (hg.depth - 1 - l) for x in v))
            if c is None:
                break
            cell = c
        worst = max(worst, abs(int(cell.p >= 0.5) - int(occ[v])))
    return float(worst)


CHECKS = [
    ("grad pd_node_forward", _grad_pd, GRAD_TOL),
    ("grad sparse_conv_valid", _grad_vsc, GRAD_TOL),
    ("grad receptive_block", _grad_block, GRAD_TOL),
    ("grad pointconv_forward", _grad_pointconv, GRAD_TOL),
    ("grad dense_block_forward", _grad_dense, GRAD_TOL),
    ("loss worked values", _losses, 1e-9),
    ("kd-tree order invariance", _kd_invariance, 0.0),
    ("hgrid composition oracle", _compose, 0.0),
]


def run_selfcheck(seeds: int = 3) -> list[tuple[str, float, float, bool]]:
    """(name, worst error over seeds, tolerance, passed) per check."""
    out = []
    for name, fn, tol in CHECKS:
        worst = max(fn(np.random.default_rng(s)) for s in range(seeds))
        out.append((name, worst, tol, worst <= tol))
    return out
