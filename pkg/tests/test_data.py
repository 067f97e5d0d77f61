import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psfseg.data import (
    FAMILIES,
    DatasetSplit,
    PointCloud,
    augment,
    generate_synthetic,
    load_dataset,
    load_point_cloud,
    normalize_unit_ball,
    save_dataset,
    save_point_cloud,
)
from psfseg.errors import ConfigError, DataError


def test_load_three_points(tmp_path):
    f = tmp_path / "a.pts"
    f.write_text("0 0 0\n1 0 0\n0 1 0\n")
    pc = load_point_cloud(f)
    assert len(pc) == 3 and pc.points[1].tolist() == [1, 0, 0]


def test_short_labels_file(tmp_path):
    (tmp_path / "a.pts").write_text("0 0 0\n1 0 0\n0 1 0\n")
    (tmp_path / "a.seg").write_text("0\n1\n")
    with pytest.raises(DataError, match="mismatch"):
        load_point_cloud(tmp_path / "a.pts", tmp_path / "a.seg")


def test_malformed_line_number(tmp_path):
    (tmp_path / "a.pts").write_text("0 0 0\n1 x 0\n")
    with pytest.raises(DataError, match=":2:"):
        load_point_cloud(tmp_path / "a.pts")


def test_round_trip_exact(tmp_path):
    rng = np.random.default_rng(0)
    pc = PointCloud(rng.standard_normal((1024, 3)) * 1e3, rng.integers(0, 4, 1024))
    save_point_cloud(pc, tmp_path / "p.pts", tmp_path / "p.seg")
    back = load_point_cloud(tmp_path / "p.pts", tmp_path / "p.seg")
    assert np.array_equal(back.points, pc.points) and np.array_equal(back.labels, pc.labels)


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    split = generate_synthetic("table", 3, 64, rng)
    save_dataset(split, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.part_count == {"table": 2}
    for a, b in zip(split.shapes, back.shapes):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.labels, b.labels)


def test_point_cloud_validation():
    with pytest.raises(DataError):
        PointCloud(np.zeros((0, 3)))
    with pytest.raises(DataError):
        PointCloud([[0, 0, np.nan]])
    with pytest.raises(DataError):
        PointCloud(np.zeros((3, 3)), [0, 1])


def test_split_label_bound():
    with pytest.raises(DataError):
        DatasetSplit([PointCloud(np.zeros((2, 3)), [0, 2], "t")], {"t": 2})


def test_normalize_two_points():
    out = normalize_unit_ball(PointCloud([[0, 0, 0], [2, 0, 0]]))
    assert out.points.tolist() == [[-1, 0, 0], [1, 0, 0]]


def test_normalize_degenerate():
    out = normalize_unit_ball(PointCloud(np.full((4, 3), 5.0)))
    assert np.all(out.points == 0)


@given(st.integers(0, 2**32 - 1), st.integers(2, 200))
def test_normalize_unit_max_and_idempotent(seed, n):
    rng = np.random.default_rng(seed)
    pc = PointCloud(rng.standard_normal((n, 3)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5, 3))
    once = normalize_unit_ball(pc)
    assert abs(np.linalg.norm(once.points, axis=1).max() - 1) <= 1e-12
    twice = normalize_unit_ball(once)
    assert np.abs(twice.points - once.points).max() <= 1e-12


def test_augment_identity():
    rng = np.random.default_rng(0)
    pc = PointCloud(rng.standard_normal((20, 3)), rng.integers(0, 3, 20))
    out = augment(pc, rng, 0.0, (1.0, 1.0), 0.0)
    assert np.array_equal(out.points, pc.points)


def test_augment_deterministic_and_labels_kept():
    pc = PointCloud(np.random.default_rng(1).standard_normal((50, 3)), np.arange(50) % 3)
    a = augment(pc, np.random.default_rng(5))
    b = augment(pc, np.random.default_rng(5))
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(np.bincount(a.labels), np.bincount(pc.labels))


def test_augment_noise_statistics():
    pc = PointCloud(np.zeros((10_000, 3)))
    out = augment(pc, np.random.default_rng(2), 0.002, (1.0, 1.0), 0.0)
    std = out.points.std(axis=0)
    assert np.all((std >= 0.0017) & (std <= 0.0023))


def test_barbell_parts_present():
    split = generate_synthetic("barbell", 1, 1024, np.random.default_rng(0))
    counts = np.bincount(split.shapes[0].labels, minlength=3)
    assert len(split.shapes[0]) == 1024
    assert np.all(counts >= 0.05 * 1024)


def test_same_seed_identical():
    a = generate_synthetic("lamp", 3, 200, np.random.default_rng(9))
    b = generate_synthetic("lamp", 3, 200, np.random.default_rng(9))
    for x, y in zip(a.shapes, b.shapes):
        assert x.points.tobytes() == y.points.tobytes() and x.labels.tobytes() == y.labels.tobytes()


def test_table_two_labels():
    split = generate_synthetic("table", 5, 300, np.random.default_rng(3))
    assert all(set(np.unique(pc.labels)) == {0, 1} for pc in split.shapes)


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_every_part_present(family):
    split = generate_synthetic(family, 20, 256, np.random.default_rng(4))
    parts = FAMILIES[family][1]
    for pc in split.shapes:
        assert len(np.unique(pc.labels)) == parts


def test_unknown_family():
    with pytest.raises(ConfigError):
        generate_synthetic("chair", 1, 10, np.random.default_rng(0))
