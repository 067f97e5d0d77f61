"""Hierarchical three-label occupancy grids and their full-resolution composition.

Level 0 is a dense grid of cells. Every other level only holds the eight
children of cells that were refined one level up, and only boundary cells
may be refined. Composition takes, for each finest voxel, the deepest cell
covering it and thresholds its probability.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, PsfError

FREE, BOUNDARY, OCCUPIED = 0, 1, 2
LABEL_NAMES = ("free", "boundary", "occupied")
CHILD_OFFSETS = [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)]


class RefinementError(PsfError, ValueError):
    pass


class MaxDepthError(RefinementError):
    pass


@dataclass
class Cell:
    p: float
    label: int
    refined: bool = False


@dataclass
class HierGrid:
    levels: list[dict[tuple[int, int, int], Cell]]
    base: int = 16
    low: float = 0.25
    high: float = 0.75
    threshold: float = 0.5

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def resolutions(self) -> list[int]:
        return [self.base << l for l in range(self.depth)]

    @property
    def fine_resolution(self) -> int:
        return self.base << (self.depth - 1)

    def label_for(self, p: float) -> int:
        if p < self.low:
            return FREE
        if p > self.high:
            return OCCUPIED
        return BOUNDARY

    def cell(self, level: int, site) -> Cell:
        try:
            return self.levels[level][tuple(int(c) for c in site)]
        except (KeyError, IndexError):
            raise RefinementError(f"no cell at level {level} site {tuple(site)}") from None

    def set_prob(self, level: int, site, p: float) -> None:
        """Update a cell's probability; the label follows the thresholds.

        A refined cell must stay a boundary cell.
        """
        c = self.cell(level, site)
        label = self.label_for(p)
        if c.refined and label != BOUNDARY:
            raise RefinementError(f"refined cell at level {level} {tuple(site)} must stay boundary")
        c.p, c.label = float(p), label

    def cell_count(self) -> int:
        return sum(len(lv) for lv in self.levels)

    def refined_count(self) -> int:
        return sum(c.refined for lv in self.levels for c in lv.values())

    def check(self) -> None:
        """Raise if a structural invariant is broken."""
        n = self.base
        if len(self.levels[0]) != n**3:
            raise RefinementError("level 0 is not dense")
        for l, lv in enumerate(self.levels):
            for site, c in lv.items():
                if c.refined and c.label != BOUNDARY:
                    raise RefinementError(f"refined non-boundary cell at level {l} {site}")
                if c.refined and l == self.depth - 1:
                    raise RefinementError(f"refined cell at the finest level {site}")
                if l == 0:
                    if not all(0 <= s < n for s in site):
                        raise RefinementError(f"level 0 site {site} out of range")
                    continue
                parent = self.levels[l - 1].get(tuple(s // 2 for s in site))
                if parent is None or not parent.refined:
                    raise RefinementError(f"orphan cell at level {l} {site}")


def from_level0(probs: np.ndarray, levels: int = 5, low: float = 0.25, high: float = 0.75) -> HierGrid:
    """A hierarchy with only the dense base level filled from ``probs`` (n, n, n)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or len(set(probs.shape)) != 1:
        raise DimensionError(f"level 0 must be a cube, got {probs.shape}")
    if probs.size and (probs.min() < 0 or probs.max() > 1):
        raise DataError("probabilities must lie in [0, 1]")
    if levels < 1:
        raise DimensionError("need at least one level")
    hg = HierGrid([{} for _ in range(levels)], base=probs.shape[0], low=low, high=high)
    for site in np.ndindex(probs.shape):
        p = float(probs[site])
        hg.levels[0][site] = Cell(p, hg.label_for(p))
    return hg


def refine(hg: HierGrid, level: int, site) -> HierGrid:
    """Mark a boundary cell refined and create its eight children.

    Children inherit the parent probability. Refining an already refined
    cell changes nothing.
    """
    site = tuple(int(s) for s in site)
    c = hg.cell(level, site)
    if level >= hg.depth - 1:
        raise MaxDepthError(f"cannot refine past level {hg.depth - 1}")
    if c.refined:
        return hg
    if c.label != BOUNDARY:
        raise RefinementError(f"only boundary cells refine; level {level} {site} is {LABEL_NAMES[c.label]}")
    c.refined = True
    kids = hg.levels[level + 1]
    for o in CHILD_OFFSETS:
        kids[(2 * site[0] + o[0], 2 * site[1] + o[1], 2 * site[2] + o[2])] = Cell(c.p, hg.label_for(c.p))
    return hg


def _upsample2(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    out = np.empty((2 * n,) * 3, dtype=a.dtype)
    out.reshape(n, 2, n, 2, n, 2)[...] = a[:, None, :, None, :, None]
    return out


def compose_full(hg: HierGrid) -> np.ndarray:
    """Dense uint8 occupancy at the finest resolution.

    Each level's decision is upsampled and then overwritten by the cells
    present one level down, so every voxel ends up with its deepest cell.
    """
    n = hg.base
    occ = np.zeros((n, n, n), dtype=np.uint8)
    for l, lv in enumerate(hg.levels):
        if l:
            occ = _upsample2(occ)
        if lv:
            sites = np.fromiter((s for site in lv for s in site), dtype=np.int64, count=3 * len(lv)).reshape(-1, 3)
            vals = np.fromiter((c.p >= hg.threshold for c in lv.values()), dtype=np.uint8, count=len(lv))
            occ[sites[:, 0], sites[:, 1], sites[:, 2]] = vals
    return occ


def voxel_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary grids; both empty gives 1.0."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise DimensionError(f"grid shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# -- files ---------------------------------------------------------------

GRID_MAGIC = b"PSFG"
_RUN = np.dtype([("value", "u1"), ("length", "<u4")])


def rle_encode(grid: np.ndarray) -> np.ndarray:
    """Run-length pairs (value, length) of the C-order flattened grid."""
    flat = np.asarray(grid).astype(np.uint8).reshape(-1)
    if flat.size == 0:
        return np.zeros(0, dtype=_RUN)
    starts = np.flatnonzero(np.concatenate([[True], flat[1:] != flat[:-1]]))
    lengths = np.diff(np.append(starts, flat.size))
    runs = np.zeros(len(starts), dtype=_RUN)
    runs["value"], runs["length"] = flat[starts], lengths
    return runs


def save_grid(path, grid: np.ndarray) -> None:
    """Binary grid file: magic, version, three dims, run count, then runs."""
    grid = np.asarray(grid)
    if grid.ndim != 3:
        raise DimensionError(f"grid must be 3-D, got {grid.shape}")
    if grid.size and not np.isin(grid, (0, 1)).all():
        raise DataError("grid must be binary")
    runs = rle_encode(grid)
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<I3IQ", 1, *grid.shape, len(runs)))
        f.write(runs.tobytes())


def load_grid(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != GRID_MAGIC:
        raise DataError(f"{path}: not a grid file")
    head = struct.calcsize("<I3IQ")
    if len(blob) < 4 + head:
        raise DataError(f"{path}: truncated header")
    version, nx, ny, nz, count = struct.unpack_from("<I3IQ", blob, 4)
    if version != 1:
        raise DataError(f"{path}: unsupported grid version {version}")
    body = blob[4 + head :]
    if len(body) != count * _RUN.itemsize:
        raise DataError(f"{path}: expected {count} runs, found {len(body) / _RUN.itemsize:g}")
    runs = np.frombuffer(body, dtype=_RUN)
    if runs["length"].sum(dtype=np.int64) != nx * ny * nz:
        raise DataError(f"{path}: runs cover {runs['length'].sum()} voxels, dims give {nx * ny * nz}")
    if np.any(runs["value"] > 1):
        raise DataError(f"{path}: non-binary run value")
    return np.repeat(runs["value"], runs["length"]).reshape(nx, ny, nz)


def save_raw(path, grid: np.ndarray) -> None:
    """Headerless 0/1 bytes in C order."""
    Path(path).write_bytes(np.asarray(grid).astype(np.uint8).tobytes())


def load_raw(path, n: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if data.size != n**3:
        raise DataError(f"{path}: {data.size} bytes, expected {n**3}")
    return data.reshape(n, n, n).copy()


def save_hier(path, hg: HierGrid) -> None:
    """Text form: a header line, then ``level x y z p refined`` per cell."""
    lines = [f"hgrid 1 base={hg.base} levels={hg.depth} low={hg.low!r} high={hg.high!r} threshold={hg.threshold!r}"]
    for l, lv in enumerate(hg.levels):
        for (x, y, z), c in sorted(lv.items()):
            lines.append(f"{l} {x} {y} {z} {c.p!r} {int(c.refined)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_hier(path) -> HierGrid:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("hgrid 1"):
        raise DataError(f"{path}: missing 'hgrid 1' header")
    try:
        meta = dict(kv.split("=", 1) for kv in text[0].split()[2:])
        hg = HierGrid(
            [{} for _ in range(int(meta["levels"]))],
            base=int(meta["base"]),
            low=float(meta["low"]),
            high=float(meta["high"]),
            threshold=float(meta["threshold"]),
        )
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: bad header: {e}") from None
    for no, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            l, x, y, z = (int(v) for v in parts[:4])
            p, refined = float(parts[4]), bool(int(parts[5]))
            if len(parts) != 6:
                raise ValueError("expected 6 fields")
        except (ValueError, IndexError) as e:
            raise DataError(f"{path}:{no}: {e}") from None
        if not 0 <= l < hg.depth:
            raise DataError(f"{path}:{no}: level {l} out of range")
        if not 0.0 <= p <= 1.0:
            raise DataError(f"{path}:{no}: probability {p} outside [0, 1]")
        hg.levels[l][(x, y, z)] = Cell(p, hg.label_for(p), refined)
    try:
        hg.check()
    except RefinementError as e:
        raise DataError(f"{path}: {e}") from None
    return hg


def random_hierarchy(
    rng: np.random.Generator,
    base: int = 16,
    levels: int = 5,
    refine_prob: float = 0.3,
    boundary_frac: float = 0.3,
) -> HierGrid:
    """Random valid hierarchy with partial refinement depths, for tests and demos."""
    n = base
    probs = rng.random((n, n, n))
    bnd = rng.random((n, n, n)) < boundary_frac
    probs[bnd] = rng.uniform(0.25, 0.75, size=bnd.sum())
    hg = from_level0(probs, levels)
    for l in range(levels - 1):
        for site, c in list(hg.levels[l].items()):
            if c.label == BOUNDARY and rng.random() < refine_prob:
                refine(hg, l, site)
                for o in CHILD_OFFSETS:
                    child = (2 * site[0] + o[0], 2 * site[1] + o[1], 2 * site[2] + o[2])
                    if rng.random() < boundary_frac:
                        p = rng.uniform(0.25, 0.75)
                    else:
                        p = rng.random()
                    hg.set_prob(l + 1, child, p)
    return hg
