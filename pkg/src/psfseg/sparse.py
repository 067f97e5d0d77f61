"""Sparse voxel grids and submanifold convolutions.

A grid is a set of active integer sites in ``[0, R)^3`` plus one feature row
per site. Sites are kept in lexicographic order, which makes neighbor lookup
a ``searchsorted`` on linearized keys. Lookups are cached on the key set, so
stacked valid convolutions over one grid reuse a single neighbor table.

Kernel weights are stored as ``(n_offsets, C_in, C_out)``. Size-3 kernels
use the 27 offsets of ``{-1, 0, 1}^3`` and stride-2 kernels the 8 offsets of
``{0, 1}^3``, both enumerated in lexicographic order.
"""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetSplit, PointCloud, augment, normalize_unit_ball
from .errors import ConfigError, DataError, DimensionError, PsfError
from .metrics import shape_miou
from .tensor import Param, Tensor

log = logging.getLogger(__name__)

OFFSETS3 = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)
OFFSETS2 = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


class ResolutionError(PsfError, ValueError):
    pass


class BoundsError(PsfError, ValueError):
    pass


class EmptyGridError(PsfError, ValueError):
    pass


class KeySet:
    """Sorted active sites of one resolution, with cached neighbor tables."""

    def __init__(self, resolution: int, keys: np.ndarray, *, presorted: bool = False):
        self.resolution = int(resolution)
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
        if keys.size and (keys.min() < 0 or keys.max() >= resolution):
            raise BoundsError(f"site outside [0, {resolution})^3")
        lin = self._linear(keys)
        if not presorted:
            lin, first = np.unique(lin, return_index=True)
            keys = keys[first]
        self.keys = keys
        self.lin = lin
        self._cache: dict = {}

    def _linear(self, keys: np.ndarray) -> np.ndarray:
        r = self.resolution
        return (keys[:, 0] * r + keys[:, 1]) * r + keys[:, 2]

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, sites: np.ndarray) -> np.ndarray:
        """Row index of each site, -1 when inactive or out of bounds."""
        sites = np.asarray(sites, dtype=np.int64)
        shape = sites.shape[:-1]
        sites = sites.reshape(-1, 3)
        inside = ((sites >= 0) & (sites < self.resolution)).all(axis=1)
        lin = self._linear(np.where(inside[:, None], sites, 0))
        pos = np.searchsorted(self.lin, lin)
        pos = np.minimum(pos, max(len(self.lin) - 1, 0))
        hit = inside & (len(self.lin) > 0)
        if len(self.lin):
            hit &= self.lin[pos] == lin
        return np.where(hit, pos, -1).reshape(shape)

    def neighbors(self, out: "KeySet", offsets: np.ndarray, stride: int) -> np.ndarray:
        """(len(out), n_offsets) rows of ``self`` at ``stride * y + o``."""
        key = (id(out), offsets.tobytes(), stride)
        hit = self._cache.get(key)
        if hit is None or hit[0] is not out:
            table = self.lookup(stride * out.keys[:, None, :] + offsets[None, :, :])
            hit = (out, table)
            self._cache[key] = hit
        return hit[1]

    def derived(self, name: str, build):
        if name not in self._cache:
            self._cache[name] = build()
        return self._cache[name]

    def same_sites(self, other: "KeySet") -> bool:
        return self is other or (
            self.resolution == other.resolution and np.array_equal(self.lin, other.lin)
        )


class SparseGrid:
    def __init__(self, sites: KeySet, features):
        features = T.as_tensor(features)
        if features.ndim != 2 or features.shape[0] != len(sites):
            raise DimensionError(
                f"features {features.shape} do not match {len(sites)} active sites"
            )
        self.sites = sites
        self.features = features

    @classmethod
    def from_dict(cls, resolution: int, values: dict, channels: int | None = None) -> "SparseGrid":
        keys = np.array(sorted(values), dtype=np.int64).reshape(-1, 3)
        ks = KeySet(resolution, keys)
        feats = np.array([np.atleast_1d(values[tuple(int(c) for c in k)]) for k in ks.keys], dtype=float)
        if not len(feats):
            feats = np.zeros((0, channels or 1))
        return cls(ks, feats.reshape(len(ks), -1))

    @classmethod
    def from_arrays(cls, resolution: int, keys, features) -> "SparseGrid":
        ks = KeySet(resolution, keys)
        order = ks.lookup(np.asarray(keys, dtype=np.int64))
        feats = np.asarray(T.as_tensor(features).data)
        out = np.zeros((len(ks), feats.shape[1]))
        out[order] = feats
        return cls(ks, out)

    @property
    def resolution(self) -> int:
        return self.sites.resolution

    @property
    def keys(self) -> np.ndarray:
        return self.sites.keys

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return len(self.sites)

    def key_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(c) for c in k) for k in self.keys}

    def to_dict(self) -> dict:
        return {tuple(int(c) for c in k): self.features.data[i].copy() for i, k in enumerate(self.keys)}

    def get(self, site):
        i = int(self.sites.lookup(np.asarray(site)))
        return None if i < 0 else self.features.data[i]

    def dense(self) -> np.ndarray:
        r = self.resolution
        out = np.zeros((r, r, r, self.channels))
        out[tuple(self.keys.T)] = self.features.data
        return out

    def dump(self) -> str:
        """Text lines ``i j k v1 ... vC`` in lexicographic site order."""
        rows = []
        for k, v in zip(self.keys, self.features.data):
            rows.append(" ".join([str(int(c)) for c in k] + [repr(float(x)) for x in v]))
        return "\n".join(rows) + ("\n" if rows else "")

    @classmethod
    def load_dump(cls, text: str, resolution: int) -> "SparseGrid":
        keys, feats = [], []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            try:
                keys.append([int(p) for p in parts[:3]])
                feats.append([float(p) for p in parts[3:]])
            except ValueError:
                raise DataError(f"grid dump line {lineno}: cannot parse {line!r}") from None
        if len({len(f) for f in feats}) > 1:
            raise DataError("grid dump rows have differing channel counts")
        return cls.from_arrays(resolution, np.array(keys).reshape(-1, 3), np.array(feats).reshape(len(keys), -1))


# -- parameters -----------------------------------------------------------

@dataclass
class SparseConvParams:
    weight: Param  # (n_offsets, C_in, C_out)
    bias: Param

    @property
    def offsets(self) -> np.ndarray:
        return OFFSETS3 if self.weight.shape[0] == 27 else OFFSETS2

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[2]

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def conv_params(rng, c_in: int, c_out: int, kernel: int = 3, name: str = "conv") -> SparseConvParams:
    taps = {3: 27, 2: 8}[kernel]
    w = T.glorot(rng, (taps, c_in, c_out), f"{name}.w", fan_in=taps * c_in, fan_out=c_out)
    return SparseConvParams(w, T.zeros(c_out, f"{name}.b"))


def _check_channels(grid: SparseGrid, params: SparseConvParams) -> None:
    if grid.channels != params.c_in:
        raise DimensionError(f"grid has {grid.channels} channels, kernel expects {params.c_in}")


def _apply(grid: SparseGrid, out: KeySet, table: np.ndarray, params: SparseConvParams) -> SparseGrid:
    taps, cin, cout = params.weight.shape
    g = T.gather_rows(grid.features, table.reshape(-1))
    g = T.reshape(g, (len(out), taps * cin))
    y = T.linear(g, T.reshape(params.weight, (taps * cin, cout)), params.bias)
    return SparseGrid(out, y)


# -- convolutions ---------------------------------------------------------

def dilate(sites: KeySet) -> KeySet:
    """Active set of a regular size-3 convolution: dilation clipped to bounds."""

    def build():
        cand = (sites.keys[:, None, :] + OFFSETS3[None]).reshape(-1, 3)
        ok = ((cand >= 0) & (cand < sites.resolution)).all(axis=1)
        return KeySet(sites.resolution, cand[ok])

    return sites.derived("dilate", build)


def sparse_conv_regular(grid: SparseGrid, params: SparseConvParams) -> SparseGrid:
    """Size-3 convolution producing output on the whole dilated active set."""
    _check_channels(grid, params)
    if params.weight.shape[0] != 27:
        raise DimensionError("regular sparse convolution needs a size-3 kernel")
    out = dilate(grid.sites)
    return _apply(grid, out, grid.sites.neighbors(out, OFFSETS3, 1), params)


def sparse_conv_valid(grid: SparseGrid, params: SparseConvParams) -> SparseGrid:
    """Size-3 convolution evaluated only at the input's active sites."""
    _check_channels(grid, params)
    if params.weight.shape[0] != 27:
        raise DimensionError("valid sparse convolution needs a size-3 kernel")
    return _apply(grid, grid.sites, grid.sites.neighbors(grid.sites, OFFSETS3, 1), params)


def coarsen(sites: KeySet) -> KeySet:
    if sites.resolution % 2:
        raise ResolutionError(f"stride-2 convolution needs an even resolution, got {sites.resolution}")
    return sites.derived("coarse", lambda: KeySet(sites.resolution // 2, sites.keys // 2))


def strided_down(grid: SparseGrid, params: SparseConvParams) -> SparseGrid:
    """Stride-2 convolution with a {0,1}^3 kernel onto resolution R/2."""
    _check_channels(grid, params)
    if params.weight.shape[0] != 8:
        raise DimensionError("strided convolution needs a {0,1}^3 kernel")
    out = coarsen(grid.sites)
    return _apply(grid, out, grid.sites.neighbors(out, OFFSETS2, 2), params)


def deconv_up(coarse: SparseGrid, target: KeySet, params: SparseConvParams) -> SparseGrid:
    """Transposed stride-2 convolution evaluated exactly on ``target`` sites.

    ``out[x] = b + W[x mod 2] . in[x // 2]``; a missing parent contributes
    only the bias.
    """
    _check_channels(coarse, params)
    if params.weight.shape[0] != 8:
        raise DimensionError("deconvolution needs a {0,1}^3 kernel")
    if target.resolution != 2 * coarse.resolution:
        raise BoundsError(
            f"target resolution {target.resolution} is not twice the coarse resolution {coarse.resolution}"
        )

    def build():
        parent = coarse.sites.lookup(target.keys // 2)
        rem = target.keys % 2
        slot = rem[:, 0] * 4 + rem[:, 1] * 2 + rem[:, 2]
        onehot = np.zeros((len(target), 8))
        onehot[np.arange(len(target)), slot] = 1.0
        return coarse.sites, parent, onehot

    key = ("deconv", id(coarse.sites))
    hit = target.derived(key, build)
    if hit[0] is not coarse.sites:
        hit = target._cache[key] = build()
    _, parent, onehot = hit
    cin, cout = params.c_in, params.c_out
    g = T.gather_rows(coarse.features, parent)
    g8 = T.mul(T.reshape(g, (len(target), 1, cin)), onehot[:, :, None])
    y = T.linear(T.reshape(g8, (len(target), 8 * cin)), T.reshape(params.weight, (8 * cin, cout)), params.bias)
    return SparseGrid(target, y)


@dataclass
class BlockParams:
    vsc: SparseConvParams
    down: SparseConvParams
    coarse: SparseConvParams
    up: SparseConvParams

    def params(self) -> list[Param]:
        return self.vsc.params() + self.down.params() + self.coarse.params() + self.up.params()


def block_params(rng, channels: int, name: str = "block") -> BlockParams:
    return BlockParams(
        conv_params(rng, channels, channels, 3, f"{name}.vsc"),
        conv_params(rng, channels, channels, 2, f"{name}.down"),
        conv_params(rng, channels, channels, 3, f"{name}.coarse"),
        conv_params(rng, channels, channels, 2, f"{name}.up"),
    )


def receptive_block(grid: SparseGrid, bp: BlockParams) -> SparseGrid:
    """Valid conv plus a strided -> valid -> deconv path, summed on the input sites."""
    direct = sparse_conv_valid(grid, bp.vsc)
    low = sparse_conv_valid(strided_down(grid, bp.down), bp.coarse)
    up = deconv_up(low, grid.sites, bp.up)
    return SparseGrid(grid.sites, direct.features + up.features)


# -- voxels <-> points ----------------------------------------------------

@dataclass
class Voxelization:
    grid: SparseGrid
    site_labels: np.ndarray | None
    point_sites: np.ndarray  # (N, 3) site of each point
    point_rows: np.ndarray  # (N,) row of that site in the grid


FEATURE_MODES = ("occupancy", "count", "coords")


def voxelize(pc: PointCloud, resolution: int = 50, labelled: bool = True, features: str = "occupancy") -> Voxelization:
    """Bin a unit-ball cloud into ``resolution^3`` voxels.

    ``features``: ``occupancy`` (1.0), ``count`` (points per voxel) or
    ``coords`` (1.0 followed by the voxel-center coordinates).
    """
    if resolution < 2:
        raise ResolutionError(f"resolution must be >= 2, got {resolution}")
    if np.abs(pc.points).max() > 1 + 1e-9:
        raise DataError("voxelize expects coordinates in [-1, 1]; normalize the cloud first")
    if features not in FEATURE_MODES:
        raise ConfigError(f"unknown voxel feature mode {features!r}")
    sites = np.clip(np.floor((pc.points + 1) / 2 * resolution).astype(np.int64), 0, resolution - 1)
    ks = KeySet(resolution, sites)
    rows = ks.lookup(sites)
    n = len(ks)
    if features == "occupancy":
        feats = np.ones((n, 1))
    elif features == "count":
        feats = np.bincount(rows, minlength=n).astype(float)[:, None]
    else:
        centers = (ks.keys + 0.5) / resolution * 2 - 1
        feats = np.concatenate([np.ones((n, 1)), centers], axis=1)
    labels = None
    if labelled:
        if pc.labels is None:
            raise DataError("labelled voxelization needs point labels")
        parts = int(pc.labels.max()) + 1
        votes = np.zeros((n, parts), dtype=np.int64)
        np.add.at(votes, (rows, pc.labels), 1)
        labels = votes.argmax(axis=1)  # first maximum = smallest label id
    return Voxelization(SparseGrid(ks, feats), labels, sites, rows)


def devoxelize_labels(grid: SparseGrid | KeySet, posteriors: np.ndarray, point_sites: np.ndarray) -> np.ndarray:
    """Per-point rows of per-site posteriors.

    A point whose site is inactive takes the nearest active site by L-inf,
    then L2 distance, then lexicographic site order.
    """
    ks = grid.sites if isinstance(grid, SparseGrid) else grid
    if len(ks) == 0:
        raise EmptyGridError("cannot devoxelize against an empty grid")
    point_sites = np.asarray(point_sites, dtype=np.int64).reshape(-1, 3)
    rows = ks.lookup(point_sites)
    for i in np.flatnonzero(rows < 0):
        d = ks.keys - point_sites[i]
        linf = np.abs(d).max(axis=1)
        l2 = (d**2).sum(axis=1)
        # keys are lexicographic, so lexsort's stability settles the last tie
        rows[i] = np.lexsort((l2, linf))[0]
    return np.asarray(posteriors)[rows]


# -- segmentation network -------------------------------------------------

@dataclass
class SparseNetConfig:
    resolution: int = 50
    features: str = "coords"
    channels: int = 16
    blocks: int = 2

    @property
    def in_channels(self) -> int:
        return 4 if self.features == "coords" else 1

    def layers(self) -> list[tuple]:
        return [("vsc", self.in_channels, self.channels)] + [("block", self.channels)] * self.blocks

    def validate(self) -> None:
        if self.features not in FEATURE_MODES:
            raise ConfigError(f"sparse.features must be one of {FEATURE_MODES}")
        if self.blocks and self.resolution % 2:
            raise ConfigError(f"sparse.resolution {self.resolution} is odd but receptive blocks need stride 2")
        if self.channels < 1 or self.resolution < 2:
            raise ConfigError("sparse.channels and sparse.resolution must be positive")


class SparseSegNet:
    """A stack of valid convolutions and receptive blocks, ReLU between, then a per-site head."""

    def __init__(self, layers: list[tuple], part_count: int, rng, prefix: str = "sparse", resolution: int | None = None):
        self.layers = []
        width = None
        for i, spec in enumerate(layers):
            kind = spec[0]
            if kind == "vsc":
                _, cin, cout = spec
                if width is not None and cin != width:
                    raise ConfigError(f"layer {i} expects {cin} channels, previous layer gives {width}")
                self.layers.append(("vsc", conv_params(rng, cin, cout, 3, f"{prefix}.l{i}")))
                width = cout
            elif kind == "block":
                if resolution is not None and resolution % 2:
                    raise ConfigError(f"layer {i} is a strided block but resolution {resolution} is odd")
                (c,) = spec[1:]
                if width is not None and c != width:
                    raise ConfigError(f"block {i} has {c} channels, previous layer gives {width}")
                self.layers.append(("block", block_params(rng, c, f"{prefix}.l{i}")))
                width = c
            else:
                raise ConfigError(f"unknown sparse layer kind {kind!r}")
        self.head_w = T.glorot(rng, (width, part_count), f"{prefix}.head.w")
        self.head_b = T.zeros(part_count, f"{prefix}.head.b")
        self.part_count = part_count

    def params(self) -> list[Param]:
        ps = []
        for _, p in self.layers:
            ps += p.params()
        return ps + [self.head_w, self.head_b]

    def forward(self, grid: SparseGrid) -> Tensor:
        """Per-site logits; active sites are preserved throughout."""
        for kind, p in self.layers:
            if kind == "block" and grid.resolution % 2:
                raise ConfigError(f"strided block on odd resolution {grid.resolution}")
            grid = sparse_conv_valid(grid, p) if kind == "vsc" else receptive_block(grid, p)
            grid = SparseGrid(grid.sites, T.relu(grid.features))
        return T.linear(grid.features, self.head_w, self.head_b)

    def posteriors(self, grid: SparseGrid) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.forward(grid).data)


def sparse_segnet_forward(grid: SparseGrid, net: SparseSegNet) -> np.ndarray:
    return net.posteriors(grid)


def predict_points(pc: PointCloud, net: SparseSegNet, config: SparseNetConfig) -> np.ndarray:
    vox = voxelize(normalize_unit_ball(pc), config.resolution, labelled=False, features=config.features)
    return devoxelize_labels(vox.grid, net.posteriors(vox.grid), vox.point_sites)


@dataclass
class SparseTrainSettings:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    noise: float = 0.0
    max_steps: int | None = None


def train_sparse_segnet(
    split: DatasetSplit,
    config: SparseNetConfig,
    settings: SparseTrainSettings,
    rng: np.random.Generator,
    init_rng=None,
    callback=None,
    net: SparseSegNet | None = None,
) -> tuple[SparseSegNet, list[dict]]:
    """Adam on per-site cross-entropy against majority voxel labels."""
    config.validate()
    (category,) = split.categories
    parts = split.part_count[category]
    if net is None:
        net = SparseSegNet(
            config.layers(), parts, init_rng if init_rng is not None else rng, resolution=config.resolution
        )
    params = net.params()
    shapes = [normalize_unit_ball(pc) for pc in split.shapes]
    cached = {}

    def vox(i):
        if settings.noise > 0:
            pc = augment(shapes[i], rng, settings.noise, (1.0, 1.0), 0.0)
            pc = PointCloud(np.clip(pc.points, -1, 1), pc.labels, pc.category)
            return voxelize(pc, config.resolution, True, config.features)
        if i not in cached:
            cached[i] = voxelize(shapes[i], config.resolution, True, config.features)
        return cached[i]

    records, step, start = [], 0, time.perf_counter()
    for epoch in range(settings.epochs):
        order = rng.permutation(len(shapes))
        losses, mious = [], []
        for lo in range(0, len(order), settings.batch_size):
            idx = order[lo : lo + settings.batch_size]
            T.zero_grad(params)
            total = None
            for i in idx:
                v = vox(i)
                loss, probs = T.softmax_cross_entropy(net.forward(v.grid), v.site_labels)
                total = loss if total is None else total + loss
                losses.append(float(loss.data))
                mious.append(shape_miou(probs.argmax(1)[v.point_rows], shapes[i].labels, parts))
            (total * (1.0 / len(idx))).backward()
            T.adam_step(params, settings.lr)
            step += 1
            if settings.max_steps is not None and step >= settings.max_steps:
                break
        rec = {
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)),
            "train_miou": float(np.mean(mious)),
            "wall": time.perf_counter() - start,
        }
        records.append(rec)
        log.info("sparse %s", rec)
        if callback is not None:
            callback(rec, net)
        if settings.max_steps is not None and step >= settings.max_steps:
            break
    return net, records
