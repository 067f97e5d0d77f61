"""PointConv: learned K x K neighbor weighting followed by a plain convolution.

For each query, the K neighbor coordinates (centered on the query) go
through a small MLP ``s`` whose output is reshaped to a K x K matrix ``W``.
The gathered neighbor features ``F`` (K x C_in) become ``F_g = W @ F``, and
a kernel ``T`` of shape (K, C_in, C_out) convolves ``F_g`` to one output row.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import DatasetSplit, PointCloud, normalize_unit_ball
from .errors import ConfigError, PsfError
from .metrics import shape_miou
from .tensor import Param, Tensor

log = logging.getLogger(__name__)


class SamplingError(PsfError, ValueError):
    pass


@dataclass
class NeighborhoodBatch:
    queries: np.ndarray  # (Q, 3)
    index: np.ndarray  # (Q, K) rows of the source list
    local: np.ndarray  # (Q, K, 3) neighbor coordinates minus the query

    @property
    def k(self) -> int:
        return self.index.shape[1]


def knn_neighborhood(sources: np.ndarray, queries: np.ndarray, k: int) -> NeighborhoodBatch:
    """K nearest sources per query by L2 distance.

    Ties break by lexicographic source coordinates, then by source index.
    With fewer than K sources the distance-sorted list repeats cyclically.
    """
    sources = np.asarray(sources, dtype=np.float64).reshape(-1, 3)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    m = len(sources)
    if m < 1:
        raise SamplingError("knn needs at least one source point")
    lex = np.lexsort((np.arange(m), sources[:, 2], sources[:, 1], sources[:, 0]))
    d = ((queries[:, None, :] - sources[None, lex, :]) ** 2).sum(axis=2)
    take = min(k, m)
    order = np.argsort(d, axis=1, kind="stable")[:, :take]
    idx = lex[order]
    if take < k:
        idx = idx[:, np.arange(k) % take]
    return NeighborhoodBatch(queries, idx, sources[idx] - queries[:, None, :])


def fps_downsample(points: np.ndarray, target: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Farthest-point sampling from the lexicographically smallest point.

    Deterministic; ``rng`` is accepted for interface symmetry and unused.
    Returns indices in selection order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(points)
    if not 1 <= target <= m:
        raise SamplingError(f"cannot sample {target} of {m} points")
    first = np.lexsort((np.arange(m), points[:, 2], points[:, 1], points[:, 0]))[0]
    chosen = np.empty(target, dtype=np.int64)
    chosen[0] = first
    dist = ((points - points[first]) ** 2).sum(axis=1)
    for i in range(1, target):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, ((points - points[nxt]) ** 2).sum(axis=1))
    return chosen


@dataclass
class PointConvLayer:
    k: int
    c_in: int
    c_out: int
    mlp: list[tuple[Param, Param]]
    kernel: Param  # (K, C_in, C_out)
    bias: Param

    def params(self) -> list[Param]:
        ps = []
        for w, b in self.mlp:
            ps += [w, b]
        return ps + [self.kernel, self.bias]


def pointconv_layer(rng, k: int, c_in: int, c_out: int, hidden: int = 64, name: str = "pconv") -> PointConvLayer:
    """s-MLP 3K -> hidden -> K^2; its last bias starts at the flattened identity."""
    mlp = [
        (T.glorot(rng, (3 * k, hidden), f"{name}.s0.w"), T.zeros(hidden, f"{name}.s0.b")),
        (T.glorot(rng, (hidden, k * k), f"{name}.s1.w"), T.Param(np.eye(k).reshape(-1), f"{name}.s1.b")),
    ]
    kernel = T.glorot(rng, (k, c_in, c_out), f"{name}.T", fan_in=k * c_in, fan_out=c_out)
    return PointConvLayer(k, c_in, c_out, mlp, kernel, T.zeros(c_out, f"{name}.bias"))


def weighting(local: np.ndarray, layer: PointConvLayer) -> Tensor:
    """The learned (Q, K, K) weighting matrices for centered neighborhoods."""
    q, k, _ = local.shape
    h = Tensor(local.reshape(q, 3 * k))
    for i, (w, b) in enumerate(layer.mlp):
        if i:
            h = T.relu(h)
        h = T.linear(h, w, b)
    return T.reshape(h, (q, k, k))


def pointconv_forward(
    batch: NeighborhoodBatch,
    features: Tensor,
    layer: PointConvLayer,
    weights: Tensor | None = None,
) -> Tensor:
    """Q x C_out features; ``weights`` overrides ``s(P)`` when given."""
    features = T.as_tensor(features)
    q, k = batch.index.shape
    if k != layer.k:
        raise ConfigError(f"neighborhood has K={k}, layer expects K={layer.k}")
    if features.ndim != 2 or features.shape[1] != layer.c_in:
        raise ConfigError(f"features {features.shape} do not have {layer.c_in} channels")
    if batch.index.size and (batch.index.min() < 0 or batch.index.max() >= features.shape[0]):
        raise PsfError("neighbor index out of range of the feature rows")
    f = T.reshape(T.gather_rows(features, batch.index.reshape(-1)), (q, k, layer.c_in))
    w = weighting(batch.local, layer) if weights is None else T.as_tensor(weights)
    fg = T.matmul(w, f)
    flat = T.reshape(fg, (q, k * layer.c_in))
    return T.linear(flat, T.reshape(layer.kernel, (k * layer.c_in, layer.c_out)), layer.bias)


# -- Conv-DeConv segmentation --------------------------------------------

@dataclass
class PointCNNConfig:
    k: int = 8
    hidden: int = 64
    level_sizes: tuple[int, ...] = (256, 64)
    enc_channels: tuple[int, ...] = (32, 64)
    dec_channels: tuple[int, ...] = (32, 32)
    in_channels: int = 3

    def validate(self) -> None:
        if len(self.level_sizes) != len(self.enc_channels) or len(self.dec_channels) != len(self.enc_channels):
            raise ConfigError("pointcnn level sizes, encoder and decoder channel lists must have equal length")
        sizes = list(self.level_sizes)
        if any(a <= b for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"pointcnn level sizes must strictly decrease, got {sizes}")
        if self.k < 1:
            raise ConfigError("pointcnn.k must be >= 1")


@dataclass
class Hierarchy:
    """Per-shape sampling structure, computed once and reused across epochs."""

    points: list[np.ndarray]  # level 0 = input cloud, then each downsampling
    down: list[NeighborhoodBatch] = field(default_factory=list)  # level l -> l+1
    up: list[NeighborhoodBatch] = field(default_factory=list)  # level l+1 -> l


def build_hierarchy(points: np.ndarray, config: PointCNNConfig) -> Hierarchy:
    levels = [points]
    h = Hierarchy(levels)
    for size in config.level_sizes:
        src = levels[-1]
        q = src[fps_downsample(src, min(size, len(src)))]
        h.down.append(knn_neighborhood(src, q, config.k))
        levels.append(q)
    for lvl in range(len(config.level_sizes)):
        # decoder queries are the finer level, sources the coarser
        h.up.append(knn_neighborhood(levels[lvl + 1], levels[lvl], config.k))
    return h


class PointCNN:
    def __init__(self, config: PointCNNConfig, part_count: int, rng, prefix: str = "pointcnn"):
        config.validate()
        self.config = config
        self.part_count = part_count
        c = config
        self.enc = []
        prev = c.in_channels
        for i, ch in enumerate(c.enc_channels):
            self.enc.append(pointconv_layer(rng, c.k, prev, ch, c.hidden, f"{prefix}.enc{i}"))
            prev = ch
        self.dec, self.merge = [], []
        skip_widths = [c.in_channels] + list(c.enc_channels[:-1])
        for i in reversed(range(len(c.enc_channels))):
            out = c.dec_channels[i]
            self.dec.append(pointconv_layer(rng, c.k, prev, out, c.hidden, f"{prefix}.dec{i}"))
            sw = skip_widths[i]
            self.merge.append(
                (T.glorot(rng, (out + sw, out), f"{prefix}.merge{i}.w"), T.zeros(out, f"{prefix}.merge{i}.b"))
            )
            prev = out
        self.head_w = T.glorot(rng, (prev, part_count), f"{prefix}.head.w")
        self.head_b = T.zeros(part_count, f"{prefix}.head.b")

    def params(self) -> list[Param]:
        ps = []
        for layer in self.enc + self.dec:
            ps += layer.params()
        for w, b in self.merge:
            ps += [w, b]
        return ps + [self.head_w, self.head_b]

    def forward(self, hier: Hierarchy, features: np.ndarray | None = None) -> Tensor:
        """Per-point logits for the level-0 points of ``hier``."""
        x = Tensor(hier.points[0] if features is None else features)
        skips = [x]
        for layer, nb in zip(self.enc, hier.down):
            x = T.relu(pointconv_forward(nb, x, layer))
            skips.append(x)
        levels = len(self.enc)
        for j, (layer, (mw, mb)) in enumerate(zip(self.dec, self.merge)):
            lvl = levels - 1 - j
            x = T.relu(pointconv_forward(hier.up[lvl], x, layer))
            x = T.relu(T.linear(T.concat([x, skips[lvl]], axis=1), mw, mb))
        return T.linear(x, self.head_w, self.head_b)

    def posteriors(self, hier: Hierarchy) -> np.ndarray:
        with T.no_grad():
            return T.softmax(self.forward(hier).data)


def pointcnn_segnet_forward(pc: PointCloud, net: PointCNN) -> np.ndarray:
    """N x P posteriors for one (unnormalized) cloud."""
    pts = normalize_unit_ball(pc).points
    return net.posteriors(build_hierarchy(pts, net.config))


@dataclass
class PointCNNTrainSettings:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    max_steps: int | None = None


def train_pointcnn(
    split: DatasetSplit,
    config: PointCNNConfig,
    settings: PointCNNTrainSettings,
    rng: np.random.Generator,
    init_rng=None,
    callback=None,
    net: PointCNN | None = None,
) -> tuple[PointCNN, list[dict]]:
    (category,) = split.categories
    parts = split.part_count[category]
    if net is None:
        net = PointCNN(config, parts, init_rng if init_rng is not None else rng)
    params = net.params()
    shapes = [normalize_unit_ball(pc) for pc in split.shapes]
    hiers: dict[int, Hierarchy] = {}
    records, step, start = [], 0, time.perf_counter()
    for epoch in range(settings.epochs):
        order = rng.permutation(len(shapes))
        losses, mious = [], []
        for lo in range(0, len(order), settings.batch_size):
            idx = order[lo : lo + settings.batch_size]
            T.zero_grad(params)
            total = None
            for i in idx:
                if i not in hiers:
                    hiers[i] = build_hierarchy(shapes[i].points, config)
                loss, probs = T.softmax_cross_entropy(net.forward(hiers[i]), shapes[i].labels)
                total = loss if total is None else total + loss
                losses.append(float(loss.data))
                mious.append(shape_miou(probs.argmax(1), shapes[i].labels, parts))
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
        log.info("pointcnn %s", rec)
        if callback is not None:
            callback(rec, net)
        if settings.max_steps is not None and step >= settings.max_steps:
            break
    return net, records
