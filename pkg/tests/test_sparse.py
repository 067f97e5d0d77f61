import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dense_conv3, dense_deconv, dense_strided, dilation

from psfseg import tensor as T
from psfseg.data import PointCloud, generate_synthetic, normalize_unit_ball
from psfseg.errors import ConfigError, DataError, DimensionError
from psfseg.sparse import (
    OFFSETS2,
    OFFSETS3,
    BoundsError,
    EmptyGridError,
    KeySet,
    ResolutionError,
    SparseConvParams,
    SparseGrid,
    SparseNetConfig,
    SparseSegNet,
    SparseTrainSettings,
    block_params,
    coarsen,
    conv_params,
    deconv_up,
    devoxelize_labels,
    dilate,
    receptive_block,
    sparse_conv_regular,
    sparse_conv_valid,
    sparse_segnet_forward,
    strided_down,
    train_sparse_segnet,
    voxelize,
)

CENTER = 13  # index of (0, 0, 0) in OFFSETS3


def random_grid(rng, r, n, c):
    keys = rng.integers(0, r, size=(n, 3))
    ks = KeySet(r, keys)
    return SparseGrid(ks, rng.standard_normal((len(ks), c)))


def random_conv(rng, taps, cin, cout):
    return SparseConvParams(T.Param(rng.standard_normal((taps, cin, cout))), T.Param(rng.standard_normal(cout)))


def identity_conv(c, taps=27, tap=CENTER):
    w = np.zeros((taps, c, c))
    w[tap] = np.eye(c)
    return SparseConvParams(T.Param(w), T.Param(np.zeros(c)))


def rows_at(dense, keys):
    return dense[tuple(np.asarray(keys).T)]


def test_offset_order():
    assert OFFSETS3[0].tolist() == [-1, -1, -1] and OFFSETS3[CENTER].tolist() == [0, 0, 0]
    assert OFFSETS2.tolist()[1] == [0, 0, 1] and len(OFFSETS2) == 8


# -- key sets -------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(2, 8), st.integers(0, 30))
def test_keyset_sorted_unique_lookup(seed, r, n):
    rng = np.random.default_rng(seed)
    keys = rng.integers(0, r, size=(n, 3))
    ks = KeySet(r, keys)
    assert {tuple(k) for k in ks.keys} == {tuple(k) for k in keys}
    assert np.all(np.diff(ks.lin) > 0)
    assert np.array_equal(ks.keys[ks.lookup(keys)], keys.reshape(-1, 3))
    probe = rng.integers(-1, r + 1, size=(20, 3))
    got = ks.lookup(probe)
    present = {tuple(k) for k in keys}
    assert all((g >= 0) == (tuple(p) in present) for g, p in zip(got, probe))


def test_keyset_bounds():
    with pytest.raises(BoundsError):
        KeySet(4, [[0, 0, 4]])


@given(st.integers(0, 2**32 - 1), st.integers(2, 7), st.integers(1, 12))
def test_dilation_matches_oracle(seed, r, n):
    keys = np.random.default_rng(seed).integers(0, r, size=(n, 3))
    ks = KeySet(r, keys)
    got = {tuple(int(c) for c in k) for k in dilate(ks).keys}
    assert got == dilation({tuple(k) for k in keys.tolist()}, r)
    assert {tuple(k) for k in keys.tolist()} <= got


# -- convolutions versus dense oracles ------------------------------------

@pytest.mark.parametrize("seed", range(6))
def test_regular_conv_matches_dense(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 6, 15, 2)
    p = random_conv(rng, 27, 2, 3)
    out = sparse_conv_regular(g, p)
    dense = dense_conv3(g.dense(), p.weight.data, p.bias.data)
    assert out.key_set() == dilation(g.key_set(), 6)
    assert np.abs(out.features.data - rows_at(dense, out.keys)).max() <= 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_valid_conv_matches_dense_on_active(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 7, 25, 3)
    p = random_conv(rng, 27, 3, 2)
    out = sparse_conv_valid(g, p)
    dense = dense_conv3(g.dense(), p.weight.data, p.bias.data)
    assert np.array_equal(out.keys, g.keys)
    assert np.abs(out.features.data - rows_at(dense, g.keys)).max() <= 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_strided_matches_dense(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 8, 30, 2)
    p = random_conv(rng, 8, 2, 3)
    out = strided_down(g, p)
    assert out.key_set() == {tuple(int(c) // 2 for c in k) for k in g.keys}
    dense = dense_strided(g.dense(), p.weight.data, p.bias.data)
    assert np.abs(out.features.data - rows_at(dense, out.keys)).max() <= 1e-12


@pytest.mark.parametrize("seed", range(6))
def test_deconv_matches_dense(seed):
    rng = np.random.default_rng(seed)
    coarse = random_grid(rng, 4, 10, 3)
    target = KeySet(8, rng.integers(0, 8, size=(40, 3)))
    p = random_conv(rng, 8, 3, 2)
    out = deconv_up(coarse, target, p)
    expect = dense_deconv(coarse.dense(), p.weight.data, p.bias.data, target.keys)
    assert np.array_equal(out.keys, target.keys)
    assert np.abs(out.features.data - expect).max() <= 1e-12


def test_strided_then_deconv_round_trip_sites():
    rng = np.random.default_rng(0)
    g = random_grid(rng, 8, 30, 2)
    low = strided_down(g, random_conv(rng, 8, 2, 2))
    up = deconv_up(low, g.sites, random_conv(rng, 8, 2, 2))
    assert up.sites.same_sites(g.sites)


def test_identity_kernels():
    rng = np.random.default_rng(1)
    g = random_grid(rng, 6, 20, 3)
    assert np.array_equal(sparse_conv_valid(g, identity_conv(3)).features.data, g.features.data)
    reg = sparse_conv_regular(g, identity_conv(3))
    assert np.array_equal(rows_at(reg.dense(), g.keys), g.features.data)
    new = set(reg.key_set()) - g.key_set()
    assert all(not reg.get(k).any() for k in new)


def test_single_site_regular_conv_touches_27():
    g = SparseGrid.from_dict(5, {(2, 2, 2): [1.0]})
    w = np.arange(27, dtype=float).reshape(27, 1, 1)
    out = sparse_conv_regular(g, SparseConvParams(T.Param(w), T.Param(np.zeros(1))))
    assert len(out) == 27
    # out[y] = in[y + o] w[o], so site 2 - o reads tap o
    for t, o in enumerate(OFFSETS3):
        assert out.get(2 - o)[0] == t


def test_averaging_kernel_on_full_block():
    keys = np.array([[i, j, k] for i in range(3) for j in range(3) for k in range(3)])
    g = SparseGrid.from_arrays(3, keys, np.ones((27, 1)))
    p = SparseConvParams(T.Param(np.full((27, 1, 1), 1 / 27)), T.Param(np.zeros(1)))
    out = sparse_conv_valid(g, p)
    assert abs(out.get((1, 1, 1))[0] - 1.0) <= 1e-12
    assert abs(out.get((0, 0, 0))[0] - 8 / 27) <= 1e-12


def test_empty_grid():
    g = SparseGrid(KeySet(4, np.zeros((0, 3))), np.zeros((0, 2)))
    assert len(sparse_conv_valid(g, conv_params(np.random.default_rng(0), 2, 2))) == 0
    assert len(strided_down(g, conv_params(np.random.default_rng(0), 2, 2, 2))) == 0


def test_conv_errors():
    rng = np.random.default_rng(0)
    g = random_grid(rng, 6, 5, 2)
    with pytest.raises(DimensionError):
        sparse_conv_valid(g, conv_params(rng, 3, 2))
    with pytest.raises(DimensionError):
        sparse_conv_valid(g, conv_params(rng, 2, 2, 2))
    with pytest.raises(ResolutionError):
        coarsen(KeySet(5, [[0, 0, 0]]))
    with pytest.raises(BoundsError):
        deconv_up(random_grid(rng, 3, 2, 2), KeySet(8, [[0, 0, 0]]), conv_params(rng, 2, 2, 2))


# -- receptive block ------------------------------------------------------

def test_receptive_field_reaches_three():
    # valid convs alone cannot connect two sites with no chain of active neighbors
    g = SparseGrid.from_dict(8, {(0, 0, 0): [1.0], (3, 3, 3): [0.0]})
    vsc_only = sparse_conv_valid(g, identity_conv(1))
    assert vsc_only.get((3, 3, 3))[0] == 0
    bp = block_params(np.random.default_rng(0), 1)
    for conv, val in ((bp.down, 1.0), (bp.coarse, 1.0), (bp.up, 1.0)):
        conv.weight.data[:] = val
        conv.bias.data[:] = 0
    bp.vsc.weight.data[:] = 0
    out = receptive_block(g, bp)
    assert out.get((3, 3, 3))[0] > 0


def test_block_zero_paths_reduce_to_valid_conv():
    rng = np.random.default_rng(3)
    g = random_grid(rng, 8, 20, 2)
    bp = block_params(rng, 2)
    for conv in (bp.down, bp.coarse, bp.up):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    assert np.array_equal(receptive_block(g, bp).features.data, sparse_conv_valid(g, bp.vsc).features.data)


@pytest.mark.parametrize("seed", range(3))
def test_block_gradient(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 6, 12, 2)
    x = T.Tensor(g.features.data, requires_grad=True)
    bp = block_params(rng, 2)
    for p in bp.params():
        p.data += 0.1 * rng.standard_normal(p.shape)
    assert T.gradcheck(lambda: receptive_block(SparseGrid(g.sites, x), bp).features, [x] + bp.params()) <= 1e-4


# -- voxelization ---------------------------------------------------------

def test_voxelize_origin():
    vox = voxelize(PointCloud([[0, 0, 0], [1, 1, 1]], [0, 1]), 50)
    assert vox.point_sites.tolist() == [[25, 25, 25], [49, 49, 49]]
    assert len(vox.grid) == 2 and vox.grid.channels == 1


def test_voxelize_requires_normalized():
    with pytest.raises(DataError):
        voxelize(PointCloud([[2.0, 0, 0]]), 10, labelled=False)


def test_voxel_majority_tie_takes_smallest():
    pts = [[0.01, 0.01, 0.01]] * 4
    vox = voxelize(PointCloud(pts, [2, 1, 2, 1]), 10)
    assert vox.site_labels.tolist() == [1]
    vox = voxelize(PointCloud(pts, [2, 2, 1, 0]), 10)
    assert vox.site_labels.tolist() == [2]


def test_voxel_feature_modes():
    pc = PointCloud([[0, 0, 0], [0.01, 0, 0], [0.9, 0.9, 0.9]])
    assert voxelize(pc, 4, False, "count").grid.features.data[:, 0].tolist() == [2, 1]
    coords = voxelize(pc, 4, False, "coords").grid.features.data
    assert coords.shape == (2, 4) and coords[0].tolist() == [1, 0.25, 0.25, 0.25]
    with pytest.raises(ConfigError):
        voxelize(pc, 4, False, "normals")


def test_devoxelize_two_voxels():
    ks = KeySet(8, [[0, 0, 0], [4, 4, 4]])
    post = np.array([[1.0, 0.0], [0.0, 1.0]])
    sites = [[0, 0, 0], [4, 4, 4], [1, 1, 0], [3, 4, 4], [2, 2, 2]]
    got = devoxelize_labels(ks, post, sites)
    # (2,2,2) ties by both distances; lexicographic order picks (0,0,0)
    assert got.argmax(1).tolist() == [0, 1, 0, 1, 0]


def test_devoxelize_empty():
    with pytest.raises(EmptyGridError):
        devoxelize_labels(KeySet(4, np.zeros((0, 3))), np.zeros((0, 2)), [[0, 0, 0]])


# -- network --------------------------------------------------------------

def test_identity_network_with_occupancy():
    net = SparseSegNet([("vsc", 1, 1), ("vsc", 1, 1)], 2, np.random.default_rng(0))
    for _, p in net.layers:
        p.weight.data[:] = 0
        p.weight.data[CENTER] = 1
        p.bias.data[:] = 0
    net.head_w.data[:] = [[1.0, -1.0]]
    net.head_b.data[:] = 0
    vox = voxelize(normalize_unit_ball(PointCloud(np.random.default_rng(1).standard_normal((50, 3)))), 10, False)
    logits = net.forward(vox.grid).data
    assert np.array_equal(logits, np.tile([1.0, -1.0], (len(vox.grid), 1)))


def test_default_network_shapes():
    cfg = SparseNetConfig()
    assert cfg.resolution == 50 and cfg.in_channels == 4
    net = SparseSegNet(cfg.layers(), 3, np.random.default_rng(0), resolution=cfg.resolution)
    pc = normalize_unit_ball(generate_synthetic("lamp", 1, 1024, np.random.default_rng(0)).shapes[0])
    vox = voxelize(pc, 50, features="coords")
    post = sparse_segnet_forward(vox.grid, net)
    assert post.shape == (len(vox.grid), 3) and np.abs(post.sum(1) - 1).max() <= 1e-9


@pytest.mark.parametrize("seed", range(2))
def test_network_gradient_small(seed):
    rng = np.random.default_rng(seed)
    g = random_grid(rng, 4, 12, 1)
    net = SparseSegNet([("vsc", 1, 2), ("block", 2)], 2, rng, resolution=4)
    for p in net.params():
        p.data += 0.1 * rng.standard_normal(p.shape)
    labels = rng.integers(0, 2, len(g))
    assert T.gradcheck(lambda: T.softmax_cross_entropy(net.forward(g), labels)[0], net.params()) <= 1e-4


def test_odd_resolution_rejected():
    with pytest.raises(ConfigError):
        SparseNetConfig(resolution=51).validate()
    with pytest.raises(ConfigError):
        SparseSegNet([("vsc", 1, 2), ("block", 2)], 2, np.random.default_rng(0), resolution=5)
    SparseNetConfig(resolution=51, blocks=0).validate()


def test_dump_round_trip():
    rng = np.random.default_rng(0)
    g = random_grid(rng, 6, 10, 2)
    back = SparseGrid.load_dump(g.dump(), 6)
    assert np.array_equal(back.keys, g.keys) and np.array_equal(back.features.data, g.features.data)
    with pytest.raises(DataError):
        SparseGrid.load_dump("0 0 x 1.0\n", 6)


def test_train_lr_zero_and_determinism():
    split = generate_synthetic("table", 3, 128, np.random.default_rng(0))
    cfg = SparseNetConfig(resolution=16, channels=4, blocks=1)
    init = SparseSegNet(cfg.layers(), 2, np.random.default_rng(1), resolution=16)
    before = [p.data.copy() for p in init.params()]
    net, _ = train_sparse_segnet(split, cfg, SparseTrainSettings(epochs=1, lr=0.0), np.random.default_rng(2), net=init)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, net.params()))
    runs = [
        train_sparse_segnet(split, cfg, SparseTrainSettings(epochs=2, batch_size=2), np.random.default_rng(2), init_rng=np.random.default_rng(1))[1]
        for _ in range(2)
    ]
    assert [r["loss"] for r in runs[0]] == [r["loss"] for r in runs[1]]


def test_cost_scales_with_active_sites():
    # doubling the active set should cost about twice as much, never like R^3
    rng = np.random.default_rng(0)
    net = SparseSegNet(SparseNetConfig(blocks=1).layers(), 3, rng, resolution=64)

    def timed(n):
        g = random_grid(np.random.default_rng(n), 64, n, 4)
        best = np.inf
        for _ in range(3):
            start = time.perf_counter()
            net.forward(g)
            best = min(best, time.perf_counter() - start)
        return best

    small, big = timed(2000), timed(8000)
    assert big <= 8 * small
