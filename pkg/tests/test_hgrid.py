import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import hier_compose_walk

from psfseg.errors import DataError, DimensionError
from psfseg.hgrid import (
    BOUNDARY,
    CHILD_OFFSETS,
    FREE,
    OCCUPIED,
    MaxDepthError,
    RefinementError,
    compose_full,
    from_level0,
    load_grid,
    load_hier,
    load_raw,
    random_hierarchy,
    refine,
    rle_encode,
    save_grid,
    save_hier,
    save_raw,
    voxel_iou,
)


def small(rng, base=2, levels=3, **kw):
    return random_hierarchy(rng, base=base, levels=levels, **kw)


# -- structure and refinement ---------------------------------------------

def test_default_resolutions():
    hg = from_level0(np.zeros((16, 16, 16)))
    assert hg.resolutions == [16, 32, 64, 128, 256] and hg.cell_count() == 16**3
    hg.check()


def test_labels_from_thresholds():
    hg = from_level0(np.full((1, 1, 1), 0.1), levels=2)
    assert hg.cell(0, (0, 0, 0)).label == FREE
    assert hg.label_for(0.1) == FREE and hg.label_for(0.25) == BOUNDARY
    assert hg.label_for(0.75) == BOUNDARY and hg.label_for(0.9) == OCCUPIED


def test_refine_creates_children():
    probs = np.zeros((2, 2, 2))
    probs[1, 0, 1] = 0.5
    hg = from_level0(probs, levels=3)
    refine(hg, 0, (1, 0, 1))
    kids = hg.levels[1]
    assert sorted(kids) == sorted((2 + i, j, 2 + k) for i, j, k in CHILD_OFFSETS)
    assert all(c.p == 0.5 and c.label == BOUNDARY for c in kids.values())
    assert hg.cell(0, (1, 0, 1)).refined
    hg.check()


def test_refine_idempotent():
    hg = from_level0(np.full((2, 2, 2), 0.5), levels=3)
    refine(hg, 0, (0, 0, 0))
    hg.set_prob(1, (0, 0, 0), 0.9)
    refine(hg, 0, (0, 0, 0))
    assert len(hg.levels[1]) == 8 and hg.cell(1, (0, 0, 0)).p == 0.9


def test_refine_errors():
    hg = from_level0(np.full((2, 2, 2), 0.9), levels=2)
    with pytest.raises(RefinementError):
        refine(hg, 0, (0, 0, 0))
    hg = from_level0(np.full((2, 2, 2), 0.5), levels=2)
    refine(hg, 0, (0, 0, 0))
    with pytest.raises(MaxDepthError):
        refine(hg, 1, (0, 0, 0))
    with pytest.raises(RefinementError):
        refine(hg, 1, (3, 3, 3))
    with pytest.raises(RefinementError):
        hg.set_prob(0, (0, 0, 0), 0.95)


def test_from_level0_validation():
    with pytest.raises(DimensionError):
        from_level0(np.zeros((2, 3, 2)))
    with pytest.raises(DataError):
        from_level0(np.full((2, 2, 2), 1.5))


# -- composition ----------------------------------------------------------

def test_compose_all_ones_and_zeros():
    ones = compose_full(from_level0(np.ones((16, 16, 16))))
    assert ones.shape == (256, 256, 256) and ones.dtype == np.uint8 and ones.all()
    assert not compose_full(from_level0(np.zeros((16, 16, 16)))).any()


def test_compose_deepest_wins():
    hg = from_level0(np.full((2, 2, 2), 0.6), levels=2)
    refine(hg, 0, (0, 0, 0))
    hg.set_prob(1, (1, 1, 1), 0.4)
    out = compose_full(hg)
    assert out.sum() == 63 and out[1, 1, 1] == 0


@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 4), st.floats(0, 1))
def test_compose_matches_walk(seed, base, levels, refine_prob):
    hg = small(np.random.default_rng(seed), base, levels, refine_prob=refine_prob)
    hg.check()
    assert np.array_equal(compose_full(hg), hier_compose_walk(hg))


@given(st.integers(0, 2**32 - 1))
def test_memory_bound(seed):
    hg = small(np.random.default_rng(seed), base=3, levels=4, refine_prob=0.6)
    assert hg.cell_count() == hg.base**3 + 8 * hg.refined_count()


def test_check_catches_orphans():
    hg = from_level0(np.full((2, 2, 2), 0.5), levels=2)
    refine(hg, 0, (0, 0, 0))
    hg.cell(0, (0, 0, 0)).refined = False
    with pytest.raises(RefinementError):
        hg.check()


# -- voxel IoU ------------------------------------------------------------

def test_iou_cases():
    a = np.zeros((4, 4, 4), bool)
    a[:2, :2, :2] = True
    b = np.ones((4, 4, 4), bool)
    assert voxel_iou(a, b) == 0.125
    assert voxel_iou(a, a) == 1.0
    c = np.zeros_like(a)
    c[3, 3, 3] = True
    assert voxel_iou(a, c) == 0.0
    assert voxel_iou(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(DimensionError):
        voxel_iou(a, np.zeros((2, 2, 2)))


@given(st.integers(0, 2**32 - 1))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 5, 5, 5)) < rng.random(2)[:, None, None, None]
    v = voxel_iou(a, b)
    assert v == voxel_iou(b, a) and 0 <= v <= 1


# -- files ----------------------------------------------------------------

@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_grid_round_trip(tmp_path_factory, seed, n):
    grid = (np.random.default_rng(seed).random((n, n + 1, n)) < 0.3).astype(np.uint8)
    path = tmp_path_factory.mktemp("g") / "g.psfg"
    save_grid(path, grid)
    assert np.array_equal(load_grid(path), grid)


def test_rle_runs():
    runs = rle_encode(np.array([0, 0, 1, 1, 1, 0]).reshape(1, 2, 3))
    assert runs["value"].tolist() == [0, 1, 0] and runs["length"].tolist() == [2, 3, 1]


def test_raw_round_trip(tmp_path):
    grid = (np.random.default_rng(0).random((4, 4, 4)) < 0.5).astype(np.uint8)
    save_raw(tmp_path / "g.raw", grid)
    assert np.array_equal(load_raw(tmp_path / "g.raw", 4), grid)
    with pytest.raises(DataError):
        load_raw(tmp_path / "g.raw", 5)


def test_grid_load_errors(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"XXXX")
    with pytest.raises(DataError):
        load_grid(bad)
    save_grid(tmp_path / "g", np.ones((2, 2, 2), np.uint8))
    blob = (tmp_path / "g").read_bytes()
    (tmp_path / "t").write_bytes(blob[:-1])
    with pytest.raises(DataError):
        load_grid(tmp_path / "t")
    with pytest.raises(DataError):
        save_grid(tmp_path / "h", np.full((2, 2, 2), 2))


def test_hier_round_trip(tmp_path):
    hg = small(np.random.default_rng(5), base=3, levels=3, refine_prob=0.5)
    save_hier(tmp_path / "h.txt", hg)
    back = load_hier(tmp_path / "h.txt")
    assert back.levels == hg.levels and back.base == hg.base
    assert np.array_equal(compose_full(back), compose_full(hg))


def test_hier_load_errors(tmp_path):
    f = tmp_path / "h.txt"
    f.write_text("nope\n")
    with pytest.raises(DataError):
        load_hier(f)
    f.write_text("hgrid 1 base=1 levels=2 low=0.25 high=0.75 threshold=0.5\n0 0 0 0 0.5 0\n1 0 0 0 0.5 0\n")
    with pytest.raises(DataError, match="orphan"):
        load_hier(f)
    f.write_text("hgrid 1 base=1 levels=2 low=0.25 high=0.75 threshold=0.5\n0 0 0 0 1.5 0\n")
    with pytest.raises(DataError):
        load_hier(f)
