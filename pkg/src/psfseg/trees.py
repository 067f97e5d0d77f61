"""Complete binary trees over point clouds.

Two builders share one representation: the largest-span median k-d tree,
which duplicates the median of odd-sized nodes into both children, and the
randomized principal-direction tree used by the pd-network. Both are built
level by level with every node of a level processed in one vectorized step;
this works because all nodes of a level always hold the same point count.

Heap indexing: node ``i`` has children ``2i`` and ``2i + 1``; the stored
normal of node ``i`` points from child ``2i`` toward child ``2i + 1``, so the
normal directed toward child k is ``-n`` for k = 1 and ``+n`` for k = 2.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import PointCloud
from .errors import DataError, PsfError


class TreeError(PsfError):
    pass


@dataclass
class BinaryPointTree:
    depth: int
    normals: np.ndarray  # (M, 3); row 0 unused, rows 1..M-1 are internal nodes
    offsets: np.ndarray  # (M,)
    leaves: np.ndarray  # (M,) leaf slot -> row of padded_points
    padded_points: np.ndarray  # (M, 3)
    origin_index: np.ndarray  # (M,) padded row -> original point index

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def leaf_points(self) -> np.ndarray:
        return self.padded_points[self.leaves]

    def leaf_origins(self) -> np.ndarray:
        return self.origin_index[self.leaves]

    def level_nodes(self, level: int) -> np.ndarray:
        """Heap indices of the nodes ``level`` steps below the root."""
        return np.arange(2**level, 2 ** (level + 1))

    def route(self, points: np.ndarray) -> np.ndarray:
        """Leaf slot reached by each point descending through the split planes."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        node = np.ones(len(points), dtype=np.int64)
        for _ in range(self.depth - 1):
            side = np.einsum("nd,nd->n", points, self.normals[node]) > self.offsets[node]
            node = 2 * node + side
        return node - self.leaf_count

    def to_bytes(self) -> bytes:
        head = b"PSFT" + struct.pack("<II", 1, self.depth)
        return head + b"".join(
            np.ascontiguousarray(a, dtype=dt).tobytes()
            for a, dt in [
                (self.normals, "<f8"),
                (self.offsets, "<f8"),
                (self.leaves, "<i8"),
                (self.padded_points, "<f8"),
                (self.origin_index, "<i8"),
            ]
        )

    @classmethod
    def from_bytes(cls, blob: bytes) -> "BinaryPointTree":
        if blob[:4] != b"PSFT":
            raise TreeError("not a serialized tree")
        _, depth = struct.unpack_from("<II", blob, 4)
        m = 2 ** (depth - 1)
        pos = 12

        def take(dtype, count, shape):
            nonlocal pos
            arr = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
            return arr

        normals = take("<f8", 3 * m, (m, 3))
        offsets = take("<f8", m, (m,))
        leaves = take("<i8", m, (m,))
        padded = take("<f8", 3 * m, (m, 3))
        origin = take("<i8", m, (m,))
        return cls(depth, normals, offsets, leaves, padded, origin)


def _lex_order(pts: np.ndarray, primary: np.ndarray | None = None) -> np.ndarray:
    """Argsort along axis -1 by (primary, x, y, z); ``pts`` is (..., s, 3)."""
    keys = [pts[..., 2], pts[..., 1], pts[..., 0]]
    if primary is not None:
        keys.append(primary)
    return np.lexsort(keys, axis=-1)


def _take(a: np.ndarray, order: np.ndarray) -> np.ndarray:
    if a.ndim == order.ndim:
        return np.take_along_axis(a, order, axis=-1)
    return np.take_along_axis(a, order[..., None], axis=-2)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def pad_to_pow2(pc: PointCloud, rng: np.random.Generator | None = None) -> PointCloud:
    """Grow the cloud to the next power of two by repeating points.

    Extra points are taken cyclically from a lexicographically sorted copy,
    so the result does not depend on row order. ``origin`` maps every output
    row to an input row.
    """
    n = len(pc)
    m = next_pow2(n)
    order = np.lexsort((np.arange(n), pc.points[:, 2], pc.points[:, 1], pc.points[:, 0]))
    extra = order[np.arange(m - n) % n]
    idx = np.concatenate([np.arange(n), extra])
    return pc.subset(idx)


def _assemble(depth, normals, offsets, pts, org) -> BinaryPointTree:
    m = 2 ** (depth - 1)
    return BinaryPointTree(
        depth=depth,
        normals=np.concatenate([np.zeros((1, 3))] + normals) if normals else np.zeros((1, 3)),
        offsets=np.concatenate([np.zeros(1)] + offsets) if offsets else np.zeros(1),
        leaves=np.arange(m),
        padded_points=pts.reshape(m, 3),
        origin_index=org.reshape(m),
    )


def build_kd_largest_span(pc: PointCloud) -> BinaryPointTree:
    """Median k-d tree splitting each node along its axis of largest range.

    Odd-sized nodes put their median point into both children, which makes
    the tree complete with ``next_pow2(N)`` leaves.
    """
    n = len(pc)
    if n < 2:
        raise TreeError(f"k-d tree needs at least 2 points, got {n}")
    pts = pc.points[None].copy()
    org = np.arange(n)[None]
    normals, offsets = [], []
    depth = 1
    while pts.shape[1] > 1:
        b, s, _ = pts.shape
        axis = np.argmax(pts.max(axis=1) - pts.min(axis=1), axis=1)
        key = np.take_along_axis(pts, axis[:, None, None], axis=2)[..., 0]
        order = _lex_order(pts, key)
        pts, org, key = _take(pts, order), _take(org, order), _take(key, order)
        half = (s + 1) // 2
        if s % 2:
            mid = s // 2
            lo, hi = slice(0, mid + 1), slice(mid, s)
            off = key[:, mid]
        else:
            lo, hi = slice(0, half), slice(half, s)
            off = 0.5 * (key[:, half - 1] + key[:, half])
        normals.append(np.eye(3)[axis])
        offsets.append(off)
        pts = np.stack([pts[:, lo], pts[:, hi]], axis=1).reshape(2 * b, half, 3)
        org = np.stack([org[:, lo], org[:, hi]], axis=1).reshape(2 * b, half)
        depth += 1
    tree = _assemble(depth, normals, offsets, pts, org)
    if pc.origin is not None:
        tree.origin_index = pc.origin[tree.origin_index]
    return tree


def dominant_direction(cov: np.ndarray, iters: int = 20, tol: float = 1e-10) -> np.ndarray:
    """Power iteration on a stack of 3x3 covariances, shape (B, 3, 3).

    Signs are fixed so the largest-magnitude component is positive.
    """
    b = len(cov)
    diag = np.einsum("bii->bi", cov)
    start = np.argmax(diag, axis=1)
    v = cov[np.arange(b), :, start] + 1e-3 * diag.max(axis=1, keepdims=True) * np.array([1.0, 0.6, 0.3])
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    for _ in range(iters):
        w = np.einsum("bij,bj->bi", cov, v)
        w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-300)
        done = np.abs(w - v).max() < tol
        v = w
        if done:
            break
    big = np.argmax(np.abs(v), axis=1)
    v *= np.sign(v[np.arange(b), big])[:, None]
    return v


def build_pd_randomized(
    pc: PointCloud,
    rng: np.random.Generator,
    subset_size: int = 32,
) -> BinaryPointTree:
    """Principal-direction tree over a power-of-two cloud.

    Each node draws a random subset of its points, takes the dominant
    covariance eigenvector as split normal, and halves its points at the
    median projection (ties by lexicographic point value). Nodes whose subset
    has zero covariance fall back to the largest-span axis.
    """
    n = len(pc)
    if n < 2 or n & (n - 1):
        raise TreeError(f"pd-tree needs a power-of-two cloud of >= 2 points, got {n}")
    if subset_size < 2:
        raise TreeError(f"subset_size must be >= 2, got {subset_size}")
    pts = pc.points[None].copy()
    org = np.arange(n)[None]
    normals, offsets = [], []
    depth = 1
    while pts.shape[1] > 1:
        b, s, _ = pts.shape
        k = min(subset_size, s)
        pick = np.argsort(rng.random((b, s)), axis=1)[:, :k]
        sub = _take(pts, pick)
        sub = sub - sub.mean(axis=1, keepdims=True)
        cov = np.einsum("bki,bkj->bij", sub, sub) / k
        nrm = dominant_direction(cov)
        flat = np.einsum("bii->b", cov) <= 1e-30
        if flat.any():
            span = pts[flat].max(axis=1) - pts[flat].min(axis=1)
            nrm[flat] = np.eye(3)[np.argmax(span, axis=1)]
        proj = np.einsum("bsd,bd->bs", pts, nrm)
        order = _lex_order(pts, proj)
        pts, org, proj = _take(pts, order), _take(org, order), _take(proj, order)
        half = s // 2
        normals.append(nrm)
        offsets.append(0.5 * (proj[:, half - 1] + proj[:, half]))
        pts = pts.reshape(2 * b, half, 3)
        org = org.reshape(2 * b, half)
        depth += 1
    tree = _assemble(depth, normals, offsets, pts, org)
    if pc.origin is not None:
        tree.origin_index = pc.origin[tree.origin_index]
    return tree


def normalize_count_2048(pc: PointCloud, rng: np.random.Generator, noise_sigma: float = 1e-3) -> list[PointCloud]:
    """Bring a padded cloud of 1024, 2048 or 4096 points to 2048-point clouds.

    1024 points gain a jittered copy of themselves; 4096 split into even and
    odd rows. ``origin`` on each output indexes rows of ``pc``.
    """
    n = len(pc)
    if n == 2048:
        return [pc.subset(np.arange(n))]
    if n == 4096:
        return [pc.subset(np.arange(0, n, 2)), pc.subset(np.arange(1, n, 2))]
    if n == 1024:
        out = pc.subset(np.concatenate([np.arange(n), np.arange(n)]))
        out.points[n:] += rng.normal(0.0, noise_sigma, size=(n, 3))
        return [out]
    raise DataError(f"unsupported cloud size {n}; expected 1024, 2048 or 4096")


def mirror_pad(points: np.ndarray, target: int) -> np.ndarray:
    """Reflect the first and last ``(target - M) / 2`` rows outward.

    ``[a, b, c, d]`` padded to 8 becomes ``[b, a, a, b, c, d, d, c]``.
    """
    points = np.asarray(points)
    m = len(points)
    surplus = target - m
    if surplus < 0 or surplus % 2:
        raise DataError(f"cannot mirror-pad {m} rows to {target}: surplus must be even and >= 0")
    h = surplus // 2
    if h > m:
        raise DataError(f"padding {h} per side exceeds {m} rows")
    if h == 0:
        return points.copy()
    return np.concatenate([points[:h][::-1], points, points[m - h :][::-1]])
