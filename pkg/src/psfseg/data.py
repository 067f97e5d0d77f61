"""Point-cloud containers, text I/O, normalization, augmentation and synthetic shapes."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None
    category: str = ""
    # index into the cloud this one was derived from (padding, splitting)
    origin: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise DataError("a point cloud needs at least one point")
        if not np.isfinite(self.points).all():
            raise DataError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise DataError(
                    f"{len(self.labels)} labels for {len(self.points)} points"
                )
        if self.origin is not None:
            self.origin = np.asarray(self.origin, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        return PointCloud(
            self.points[idx],
            None if self.labels is None else self.labels[idx],
            self.category,
            idx,
        )


@dataclass
class DatasetSplit:
    shapes: list[PointCloud]
    part_count: dict[str, int]
    name: str = "train"

    def __post_init__(self):
        for i, pc in enumerate(self.shapes):
            if pc.labels is None:
                continue
            p = self.part_count.get(pc.category)
            if p is None:
                raise DataError(f"shape {i}: no part count for category {pc.category!r}")
            if pc.labels.size and (pc.labels.min() < 0 or pc.labels.max() >= p):
                raise DataError(f"shape {i}: label outside [0, {p})")

    @property
    def categories(self) -> list[str]:
        return sorted({pc.category for pc in self.shapes})

    def by_category(self, category: str) -> "DatasetSplit":
        return DatasetSplit(
            [pc for pc in self.shapes if pc.category == category],
            {category: self.part_count[category]},
            self.name,
        )


# -- text files -----------------------------------------------------------

def load_point_cloud(points_path, labels_path=None, category: str = "") -> PointCloud:
    pts = []
    with open(points_path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                pts.append([float(v) for v in parts])
            except ValueError:
                raise DataError(f"{points_path}:{lineno}: expected 'x y z', got {line.strip()!r}") from None
    labels = None
    if labels_path is not None:
        labels = []
        with open(labels_path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    labels.append(int(line))
                except ValueError:
                    raise DataError(f"{labels_path}:{lineno}: expected an integer, got {line.strip()!r}") from None
        if len(labels) != len(pts):
            raise DataError(
                f"count mismatch: {len(pts)} points in {points_path}, {len(labels)} labels in {labels_path}"
            )
    if not pts:
        raise DataError(f"{points_path}: no points")
    return PointCloud(np.array(pts), None if labels is None else np.array(labels), category)


def save_point_cloud(pc: PointCloud, points_path, labels_path=None) -> None:
    # %.17g round-trips float64 exactly
    np.savetxt(points_path, pc.points, fmt="%.17g")
    if labels_path is not None:
        if pc.labels is None:
            raise DataError("cloud has no labels to save")
        np.savetxt(labels_path, pc.labels, fmt="%d")


MANIFEST = "manifest.txt"


def save_dataset(split: DatasetSplit, out_dir) -> None:
    """Write one points/labels file pair per shape plus a tab-separated manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, pc in enumerate(split.shapes):
        stem = f"{pc.category}_{i:05d}"
        pts, lab = stem + ".pts", stem + ".seg"
        save_point_cloud(pc, os.path.join(out_dir, pts), None if pc.labels is None else os.path.join(out_dir, lab))
        lines.append(f"{pc.category}\t{pts}\t{lab if pc.labels is not None else '-'}")
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(data_dir, name: str = "train") -> DatasetSplit:
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} in {data_dir}")
    shapes = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'category<TAB>points<TAB>labels'")
            cat, pts, lab = parts
            shapes.append(
                load_point_cloud(
                    os.path.join(data_dir, pts),
                    None if lab == "-" else os.path.join(data_dir, lab),
                    cat,
                )
            )
    counts = {}
    for pc in shapes:
        known = FAMILIES.get(pc.category, (None, None))[1]
        top = 0 if pc.labels is None else int(pc.labels.max()) + 1
        counts[pc.category] = max(counts.get(pc.category, known or 0), top)
    return DatasetSplit(shapes, counts, name)


# -- preprocessing --------------------------------------------------------

def normalize_unit_ball(pc: PointCloud) -> PointCloud:
    """Center on the centroid and divide by the largest point norm.

    A cloud whose points all coincide collapses to the origin.
    """
    centered = pc.points - pc.points.mean(axis=0)
    r = np.sqrt((centered**2).sum(axis=1)).max()
    pts = centered / r if r > 0 else np.zeros_like(centered)
    return replace(pc, points=pts)


def augment(
    pc: PointCloud,
    rng: np.random.Generator,
    noise_sigma: float = 0.002,
    scale_range: tuple[float, float] = (0.9, 1.1),
    translate_range: float = 0.02,
) -> PointCloud:
    """Per-axis scale, then translation, then per-point Gaussian jitter."""
    lo, hi = scale_range
    if not 0 < lo <= hi:
        raise ConfigError(f"scale_range must satisfy 0 < lo <= hi, got {scale_range}")
    scale = rng.uniform(lo, hi, size=3)
    shift = rng.uniform(-translate_range, translate_range, size=3)
    pts = pc.points * scale + shift
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return replace(pc, points=pts)


# -- synthetic shapes -----------------------------------------------------

def _sphere(rng, n, center, radius):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return center + radius * v


def _tube(rng, n, z0, z1, r0, r1):
    """Lateral surface of a z-aligned frustum, uniform by area."""
    u = rng.random(n)
    if abs(r1 - r0) < 1e-12:
        t = u
    else:
        t = (np.sqrt(r0**2 + u * (r1**2 - r0**2)) - r0) / (r1 - r0)
    r = r0 + (r1 - r0) * t
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), r * np.sin(th), z0 + (z1 - z0) * t], axis=1)


def _disk(rng, n, z, radius):
    r = radius * np.sqrt(rng.random(n))
    th = rng.uniform(0, 2 * np.pi, n)
    return np.stack([r * np.cos(th), r * np.sin(th), np.full(n, z)], axis=1)


def _box(rng, n, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.random((n, 3)) * ext
    axis = face % 3
    side = face // 3
    pts[np.arange(n), axis] = np.where(side == 0, lo[axis], hi[axis])
    return pts


def _allocate(n: int, areas, min_frac: float = 0.1) -> np.ndarray:
    """Split n points across parts by area with a per-part floor."""
    w = np.asarray(areas, float) / np.sum(areas)
    w = np.maximum(w, min_frac)
    w /= w.sum()
    counts = np.floor(w * n).astype(int)
    counts[np.argmax(w)] += n - counts.sum()
    return counts


def _barbell(rng, n):
    r_a = rng.uniform(0.28, 0.36)
    r_b = rng.uniform(0.2, 0.26)
    rod = rng.uniform(0.05, 0.08)
    half = rng.uniform(0.55, 0.7)
    areas = [4 * np.pi * r_a**2, 4 * np.pi * r_b**2, 2 * np.pi * rod * 2 * half]
    ca, cb, cc = _allocate(n, areas)
    a = _sphere(rng, ca, np.array([-half - r_a * 0.8, 0, 0]), r_a)
    b = _sphere(rng, cb, np.array([half + r_b * 0.8, 0, 0]), r_b)
    c = _tube(rng, cc, -half, half, rod, rod)[:, [2, 0, 1]]
    return [a, b, c]


def _lamp(rng, n):
    base_r = rng.uniform(0.3, 0.4)
    pole_r = rng.uniform(0.025, 0.04)
    height = rng.uniform(0.9, 1.2)
    shade_h = rng.uniform(0.3, 0.4)
    shade_top, shade_bot = rng.uniform(0.12, 0.18), rng.uniform(0.3, 0.4)
    z_shade = height - 0.5 * shade_h
    slant = np.hypot(shade_h, shade_bot - shade_top)
    areas = [np.pi * base_r**2, 2 * np.pi * pole_r * z_shade, np.pi * (shade_top + shade_bot) * slant]
    ca, cb, cc = _allocate(n, areas)
    base = _disk(rng, ca, 0.0, base_r)
    pole = _tube(rng, cb, 0.0, z_shade, pole_r, pole_r)
    shade = _tube(rng, cc, z_shade, height, shade_bot, shade_top)
    return [base, pole, shade]


def _table(rng, n):
    w, d = rng.uniform(0.8, 1.1), rng.uniform(0.5, 0.8)
    h = rng.uniform(0.55, 0.8)
    th = rng.uniform(0.04, 0.07)
    leg = rng.uniform(0.04, 0.06)
    inset = rng.uniform(0.03, 0.08)
    top_area = 2 * w * d + 2 * th * (w + d)
    leg_area = 4 * 4 * leg * h
    ct, cl = _allocate(n, [top_area, leg_area])
    top = _box(rng, ct, [-w / 2, -d / 2, h], [w / 2, d / 2, h + th])
    per_leg = np.full(4, cl // 4)
    per_leg[: cl % 4] += 1
    legs = []
    for (sx, sy), m in zip([(-1, -1), (-1, 1), (1, -1), (1, 1)], per_leg):
        cx = sx * (w / 2 - inset - leg / 2)
        cy = sy * (d / 2 - inset - leg / 2)
        legs.append(_box(rng, m, [cx - leg / 2, cy - leg / 2, 0], [cx + leg / 2, cy + leg / 2, h]))
    return [top, np.concatenate(legs)]


# family id -> (sampler, part count)
FAMILIES = {"barbell": (_barbell, 3), "lamp": (_lamp, 3), "table": (_table, 2)}


def _rotation(rng, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * k @ k


def generate_synthetic(
    family: str,
    count: int,
    points_per_shape: int,
    rng: np.random.Generator,
    name: str = "train",
    max_rotation_deg: float = 15.0,
) -> DatasetSplit:
    """Sample ``count`` labelled surface clouds of one shape family."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown shape family {family!r}; choose from {sorted(FAMILIES)}")
    sampler, parts = FAMILIES[family]
    shapes = []
    for _ in range(count):
        pieces = sampler(rng, points_per_shape)
        pts = np.concatenate(pieces)
        labels = np.concatenate([np.full(len(p), i) for i, p in enumerate(pieces)])
        pts = pts @ _rotation(rng, max_rotation_deg).T
        pts = pts * rng.uniform(0.8, 1.2, size=3) + rng.uniform(-0.1, 0.1, size=3)
        order = rng.permutation(len(pts))
        shapes.append(PointCloud(pts[order], labels[order], family))
    return DatasetSplit(shapes, {family: parts}, name)
