import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import adv_losses_naive, alpha_gan_naive

from psfseg import tensor as T
from psfseg.blocks import (
    CLAMP,
    AdvLossInputs,
    AlphaGanBatch,
    DomainError,
    adv_seg_losses,
    alpha_gan_losses,
    bce,
    dense_block_forward,
    dense_block_params,
)
from psfseg.errors import DimensionError
from psfseg.tensor import DegenerateBatchError

LN2 = math.log(2)


# -- dense block ----------------------------------------------------------

def test_default_width_960():
    params = dense_block_params(np.random.default_rng(0), 3)
    out = dense_block_forward(np.random.default_rng(1).standard_normal((20, 3)), params)
    assert out.shape == (20, 960) and params.local_width == 320


@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.integers(1, 4))
def test_general_width_formula(widths, c_in):
    params = dense_block_params(np.random.default_rng(0), c_in, tuple(widths))
    out = dense_block_forward(np.random.default_rng(1).standard_normal((4, c_in)), params)
    assert out.shape == (4, 3 * sum(widths)) == (4, params.out_width)
    assert [l.weight.shape[0] for l in params.layers] == [c_in + sum(widths[:i]) for i in range(len(widths))]


def test_identical_rows_pool_equal():
    params = dense_block_params(np.random.default_rng(0), 3, (4, 4))
    x = np.tile([[0.3, -1.0, 2.0]], (5, 1))
    out = dense_block_forward(x, params, "eval").data
    local, gmax, gavg = out[:, :8], out[:, 8:16], out[:, 16:]
    assert np.all(local == local[0]) and np.allclose(gmax, gavg, atol=1e-15)


def test_pooling_broadcasts_over_points():
    params = dense_block_params(np.random.default_rng(0), 2, (3,))
    out = dense_block_forward(np.random.default_rng(2).standard_normal((6, 2)), params).data
    local = out[:, :3]
    assert np.array_equal(out[:, 3:6], np.tile(local.max(0), (6, 1)))
    assert np.allclose(out[:, 6:], np.tile(local.mean(0), (6, 1)), atol=1e-15)


def test_single_point_train_mode():
    params = dense_block_params(np.random.default_rng(0), 2, (3,))
    with pytest.raises(DegenerateBatchError):
        dense_block_forward(np.ones((1, 2)), params)
    with pytest.raises(DimensionError):
        dense_block_forward(np.ones(2), params)


@pytest.mark.parametrize("seed", range(3))
def test_dense_block_gradient(seed):
    rng = np.random.default_rng(seed)
    params = dense_block_params(rng, 3, (4, 3))
    for p in params.params():
        p.data += 0.1 * rng.standard_normal(p.shape)
    x = T.Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    assert T.gradcheck(lambda: dense_block_forward(x, params), [x] + params.params()) <= 1e-4


# -- adversarial segmentation losses --------------------------------------

def random_seg(rng, n, p):
    seg = rng.dirichlet(np.ones(p), n)
    y = np.eye(p)[rng.integers(0, p, n)]
    return seg, y


@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 5), st.floats(0, 1), st.floats(0, 1), st.floats(0, 3))
def test_adv_matches_naive(seed, n, p, d_real, d_fake, lam):
    seg, y = random_seg(np.random.default_rng(seed), n, p)
    got = adv_seg_losses(AdvLossInputs(seg, y, d_real, d_fake, lam))
    want = adv_losses_naive(seg.tolist(), y.tolist(), d_real, d_fake, lam)
    assert np.allclose(got, want, rtol=0, atol=1e-12)
    assert all(np.isfinite(got)) and min(got) >= 0


def test_adv_worked_values():
    seg, y = random_seg(np.random.default_rng(0), 4, 3)
    _, l_d = adv_seg_losses(AdvLossInputs(seg, y, 0.5, 0.5))
    assert abs(l_d - 2 * LN2) <= 1e-12 and abs(l_d - 1.386294) <= 1e-6
    l_seg, _ = adv_seg_losses(AdvLossInputs(y, y, 0.5, 1.0))
    assert 0 <= l_seg <= 1e-6


def test_adv_lambda_zero_is_cross_entropy():
    seg, y = random_seg(np.random.default_rng(1), 6, 4)
    l_seg, _ = adv_seg_losses(AdvLossInputs(seg, y, 0.3, 0.2, lam=0.0))
    assert l_seg == -(y * np.log(np.clip(seg, CLAMP, 1 - CLAMP))).sum(1).mean()


def test_adv_domain_errors():
    seg, y = random_seg(np.random.default_rng(2), 3, 2)
    with pytest.raises(DomainError):
        adv_seg_losses(AdvLossInputs(seg * 1.1, y, 0.5, 0.5))
    with pytest.raises(DomainError):
        adv_seg_losses(AdvLossInputs(seg, y, 1.5, 0.5))
    with pytest.raises(DomainError):
        adv_seg_losses(AdvLossInputs(seg, y * 0.5, 0.5, 0.5))
    with pytest.raises(DimensionError):
        adv_seg_losses(AdvLossInputs(seg, y[:2], 0.5, 0.5))


def test_bce_clamped():
    assert np.isfinite(bce(0.0, 1.0)) and np.isfinite(bce(1.0, 0.0))
    assert abs(bce(0.0, 1.0) + math.log(CLAMP)) <= 1e-12


# -- alpha-GAN ------------------------------------------------------------

def gan_batch(rng, shape=(4, 4, 4), **scalars):
    vals = dict(d_real=0.5, d_recon=0.5, d_gen=0.5, dl_enc=0.5, dl_gen=0.5)
    vals.update(scalars)
    grids = [rng.random(shape) for _ in range(3)]
    return AlphaGanBatch(*grids, **vals)


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_alpha_gan_matches_naive(seed, ds):
    rng = np.random.default_rng(seed)
    b = gan_batch(rng, (3, 2, 2), **dict(zip(("d_real", "d_recon", "d_gen", "dl_enc", "dl_gen"), ds)))
    b.x_real = (b.x_real > 0.5).astype(float)
    got = alpha_gan_losses(b)
    want = alpha_gan_naive(b.x_real, b.x_recon, *ds)
    assert np.allclose(got, want, rtol=0, atol=1e-12)
    assert all(np.isfinite(got)) and min(got) >= 0


def test_alpha_gan_worked_values():
    x = (np.random.default_rng(0).random((4, 4, 4)) > 0.5).astype(float)
    l_eg, l_d, l_dl = alpha_gan_losses(AlphaGanBatch(x, x, x, 0.5, 0.5, 0.5, 0.5, 0.5))
    assert abs(l_d - 3 * LN2) <= 1e-12 and abs(l_d - 2.079442) <= 1e-6
    assert abs(l_dl - 2 * LN2) <= 1e-12
    assert 0 <= l_eg - 3 * LN2 <= 1e-6


def test_alpha_gan_extremes_finite():
    ones, zeros = np.ones((2, 2, 2)), np.zeros((2, 2, 2))
    out = alpha_gan_losses(AlphaGanBatch(ones, zeros, ones, 0.0, 1.0, 0.0, 0.0, 1.0))
    assert all(np.isfinite(out))


def test_alpha_gan_errors():
    b = gan_batch(np.random.default_rng(0))
    b.x_gen = b.x_gen[:2]
    with pytest.raises(DimensionError):
        alpha_gan_losses(b)
    b = gan_batch(np.random.default_rng(0), d_real=-0.1)
    with pytest.raises(DomainError):
        alpha_gan_losses(b)
