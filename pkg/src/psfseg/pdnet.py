"""Pd-network: U-net style segmentation over principal-direction trees.

Node features are combined bottom-up with

    v_parent = sum_k sum_d sum_s alpha[k, s, d] * (W[l, s, d] relu(v_k) + b[l, s, d]),
    alpha[k, s, d] = max(0, (-1)^s * n_k[d]),

where n_k is the split normal directed toward child k. The six (s, d) weight
matrices of a level are stored stacked as one (6, C_in, C_out) array, slot
``3 * (s - 1) + d``. The top-down pass mirrors the same gating with its own
weights and merges each level with the encoder features of the same nodes.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import DatasetSplit, PointCloud, augment, normalize_unit_ball
from .errors import ConfigError, PsfError
from .metrics import shape_miou
from .tensor import Param, Tensor
from .trees import BinaryPointTree, build_pd_randomized, pad_to_pow2

log = logging.getLogger(__name__)


class InvalidNormalError(PsfError, ValueError):
    pass


@dataclass
class PdNetConfig:
    widths: tuple[int, ...] = (128,) * 4 + (256,) * 4 + (512,) * 4
    bottleneck: int = 1024
    head: tuple[int, ...] = (256, 256)
    lift: int = 128
    cloud_size: int = 4096
    ensemble: int = 16
    subset_size: int = 32

    @classmethod
    def desk(cls) -> "PdNetConfig":
        return cls(
            widths=(32, 32, 32, 64, 64, 64, 128, 128),
            bottleneck=256,
            head=(64, 64),
            lift=32,
            cloud_size=256,
        )

    @property
    def levels(self) -> int:
        return len(self.widths)

    def validate(self) -> None:
        n = self.cloud_size
        if n < 2 or n & (n - 1):
            raise ConfigError(f"pdnet.cloud_size must be a power of two >= 2, got {n}")
        if self.levels != n.bit_length() - 1:
            raise ConfigError(
                f"pdnet.widths has {self.levels} levels but a {n}-leaf tree has {n.bit_length() - 1}"
            )
        if min(self.widths + self.head + (self.bottleneck, self.lift, self.ensemble)) < 1:
            raise ConfigError("pdnet widths and ensemble size must be positive")

    def width(self, level: int) -> int:
        """Feature width of nodes ``level`` merges above the leaves."""
        return self.lift if level == 0 else self.widths[level - 1]


def alpha(normals: np.ndarray) -> np.ndarray:
    """Gates (N, 6) from normals (N, 3): slots [max(0, -n), max(0, n)]."""
    return np.concatenate([np.maximum(0.0, -normals), np.maximum(0.0, normals)], axis=1)


def _check_unit(n: np.ndarray) -> None:
    err = np.abs(np.linalg.norm(np.atleast_2d(n), axis=1) - 1.0)
    if (err > 1e-6).any():
        raise InvalidNormalError(f"split normal off unit length by {err.max():.3g}")


def _gated_affine(h: Tensor, gates: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """sum_j gates[:, j] * (h @ w[j] + b[j]) for h (N, C_in), w (6, C_in, C_out)."""
    six, cin, cout = w.shape
    wr = T.reshape(T.transpose(w, (1, 0, 2)), (cin, six * cout))
    y = T.linear(h, wr, T.reshape(b, (six * cout,)))
    return T.weighted_sum(T.reshape(y, (h.shape[0], six, cout)), gates)


def pd_node_forward(v1, v2, n1, n2, w: Tensor, b: Tensor) -> Tensor:
    """Parent feature from two child features and their directed normals.

    Accepts single vectors or aligned batches of rows.
    """
    n1, n2 = np.atleast_2d(n1), np.atleast_2d(n2)
    _check_unit(n1)
    _check_unit(n2)
    v1, v2 = T.as_tensor(v1), T.as_tensor(v2)
    single = v1.ndim == 1
    if single:
        v1, v2 = T.reshape(v1, (1, -1)), T.reshape(v2, (1, -1))
    out = _gated_affine(T.relu(v1), alpha(n1), w, b) + _gated_affine(T.relu(v2), alpha(n2), w, b)
    return T.reshape(out, (-1,)) if single else out


def encode_level(v: Tensor, normals: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """One bottom-up step: rows 2j, 2j+1 of ``v`` are the children of parent j.

    ``normals`` are the stored parent normals (toward the second child).
    """
    gates = np.empty((v.shape[0], 6))
    gates[0::2] = alpha(-normals)
    gates[1::2] = alpha(normals)
    y = _gated_affine(T.relu(v), gates, w, b)
    return T.tsum(T.reshape(y, (normals.shape[0], 2, y.shape[1])), axis=1)


def decode_level(parent: Tensor, normals: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """One top-down step producing interleaved child rows from parent rows."""
    h = T.relu(parent)
    c1 = _gated_affine(h, alpha(-normals), w, b)
    c2 = _gated_affine(h, alpha(normals), w, b)
    both = T.stack([c1, c2], axis=1)
    return T.reshape(both, (2 * parent.shape[0], both.shape[2]))


@dataclass
class PdLevelParams:
    enc_w: Param
    enc_b: Param
    dec_w: Param
    dec_b: Param
    merge_w: Param
    merge_b: Param


@dataclass
class EncoderState:
    levels: list[Tensor]
    bottleneck: Tensor
    normals: list[np.ndarray]  # per merge step, parent normals in row order


class PdNet:
    def __init__(self, config: PdNetConfig, part_count: int, rng: np.random.Generator, prefix: str = "pdnet"):
        config.validate()
        self.config = config
        self.part_count = part_count
        c = config
        g = lambda shape, name, **kw: T.glorot(rng, shape, f"{prefix}.{name}", **kw)
        z = lambda shape, name: T.zeros(shape, f"{prefix}.{name}")
        self.lift_w, self.lift_b = g((3, c.lift), "lift.w"), z(c.lift, "lift.b")
        self.level: list[PdLevelParams] = []
        for t in range(1, c.levels + 1):
            cin, cout = c.width(t - 1), c.width(t)
            parent = c.bottleneck if t == c.levels else cout
            self.level.append(
                PdLevelParams(
                    g((6, cin, cout), f"enc{t}.w"),
                    z((6, cout), f"enc{t}.b"),
                    g((6, parent, cin), f"dec{t}.w"),
                    z((6, cin), f"dec{t}.b"),
                    g((2 * cin, cin), f"merge{t}.w"),
                    z(cin, f"merge{t}.b"),
                )
            )
        self.bottleneck_w = g((c.width(c.levels), c.bottleneck), "bottleneck.w")
        self.bottleneck_b = z(c.bottleneck, "bottleneck.b")
        self.head = []
        prev = c.lift
        for i, h in enumerate(c.head):
            self.head.append((g((prev, h), f"head{i}.w"), z(h, f"head{i}.b")))
            prev = h
        self.out_w, self.out_b = g((prev, part_count), "out.w"), z(part_count, "out.b")

    def params(self) -> list[Param]:
        ps = [self.lift_w, self.lift_b]
        for lv in self.level:
            ps += [lv.enc_w, lv.enc_b, lv.dec_w, lv.dec_b, lv.merge_w, lv.merge_b]
        ps += [self.bottleneck_w, self.bottleneck_b]
        for w, b in self.head:
            ps += [w, b]
        return ps + [self.out_w, self.out_b]

    # -- passes -----------------------------------------------------------

    def encode(self, trees: list[BinaryPointTree], leaf_inputs: np.ndarray | None = None) -> EncoderState:
        """Bottom-up pass over a batch of equal-depth trees."""
        depth = trees[0].depth
        if any(t.depth != depth for t in trees):
            raise ConfigError("all trees in a batch must share one depth")
        if depth - 1 != self.config.levels:
            raise ConfigError(f"tree depth {depth} needs {depth - 1} levels, config has {self.config.levels}")
        if leaf_inputs is None:
            leaf_inputs = np.concatenate([t.leaf_points() for t in trees])
        m = trees[0].leaf_count
        if leaf_inputs.shape != (m * len(trees), 3):
            raise ConfigError(f"leaf inputs {leaf_inputs.shape} do not match {len(trees)} trees of {m} leaves")
        v = T.linear(Tensor(leaf_inputs), self.lift_w, self.lift_b)
        levels, normals = [v], []
        for t, lv in enumerate(self.level, 1):
            nodes = np.arange(2 ** (depth - 1 - t), 2 ** (depth - t))
            nrm = np.concatenate([tr.normals[nodes] for tr in trees])
            v = encode_level(v, nrm, lv.enc_w, lv.enc_b)
            levels.append(v)
            normals.append(nrm)
        root = T.linear(T.relu(v), self.bottleneck_w, self.bottleneck_b)
        return EncoderState(levels, root, normals)

    def decode(self, state: EncoderState) -> Tensor:
        """Top-down pass; returns per-leaf features of width ``lift``."""
        if len(state.levels) != self.config.levels + 1:
            raise PsfError("encoder state is missing skip tensors")
        dec = state.bottleneck
        for t in range(self.config.levels, 0, -1):
            lv = self.level[t - 1]
            child = decode_level(dec, state.normals[t - 1], lv.dec_w, lv.dec_b)
            skip = state.levels[t - 1]
            if skip.shape[0] != child.shape[0]:
                raise PsfError(f"skip tensor at level {t - 1} has {skip.shape[0]} rows, expected {child.shape[0]}")
            dec = T.linear(T.concat([child, skip], axis=1), lv.merge_w, lv.merge_b)
        return dec

    def logits(self, leaf_features: Tensor) -> Tensor:
        h = leaf_features
        for w, b in self.head:
            h = T.linear(T.relu(h), w, b)
        return T.linear(T.relu(h), self.out_w, self.out_b)

    def forward(self, trees: list[BinaryPointTree]) -> Tensor:
        """Per-leaf logits for a batch of trees, rows grouped by tree."""
        return self.logits(self.decode(self.encode(trees)))

    def leaf_posteriors(self, trees: list[BinaryPointTree]) -> list[np.ndarray]:
        with T.no_grad():
            probs = T.softmax(self.forward(trees).data)
        return np.split(probs, len(trees))


def encoder_forward(tree, leaf_inputs, net: PdNet) -> EncoderState:
    return net.encode([tree], leaf_inputs)


def decoder_forward(state: EncoderState, net: PdNet) -> Tensor:
    return net.decode(state)


def scatter_posteriors(
    points: np.ndarray,
    tree: BinaryPointTree,
    leaf_post: np.ndarray,
) -> np.ndarray:
    """Posterior per point of the cloud the tree's origins refer to.

    Points held by one or more leaves average those leaves; any point the
    tree never saw is routed down the split planes to a single leaf.
    """
    n = len(points)
    post = np.zeros((n, leaf_post.shape[1]))
    count = np.zeros(n)
    org = tree.leaf_origins()
    np.add.at(post, org, leaf_post)
    np.add.at(count, org, 1.0)
    unseen = np.flatnonzero(count == 0)
    if unseen.size:
        post[unseen] = leaf_post[tree.route(points[unseen])]
        count[unseen] = 1.0
    return post / count[:, None]


def segment_cloud(pc: PointCloud, tree: BinaryPointTree, net: PdNet) -> np.ndarray:
    """N x P posteriors for ``pc`` from one tree built over (a sample of) it."""
    (leaf_post,) = net.leaf_posteriors([tree])
    return scatter_posteriors(pc.points, tree, leaf_post)


def ensemble_predict(pc: PointCloud, trees: list[BinaryPointTree], net: PdNet) -> np.ndarray:
    """Average the per-tree posteriors."""
    if not trees:
        raise ConfigError("ensemble_predict needs at least one tree")
    posts = net.leaf_posteriors(trees)
    return np.mean([scatter_posteriors(pc.points, t, p) for t, p in zip(trees, posts)], axis=0)


def sample_tree(
    pc: PointCloud,
    config: PdNetConfig,
    rng: np.random.Generator,
    train: bool = False,
) -> tuple[BinaryPointTree, PointCloud]:
    """Draw ``cloud_size`` points of ``pc`` and fit a pd-tree to them.

    Training draws also get the default jitter/scale/shift augmentation; the
    returned cloud is the augmented sample, with ``origin`` into ``pc``.
    """
    n = len(pc)
    if n >= config.cloud_size:
        sample = pc.subset(np.sort(rng.choice(n, config.cloud_size, replace=False)))
    else:
        base = pad_to_pow2(pc)
        reps = -(-config.cloud_size // len(base))
        sample = pc.subset(np.tile(base.origin, reps)[: config.cloud_size])
    if train:
        sample = augment(sample, rng)
    return build_pd_randomized(sample, rng, config.subset_size), sample


def predict_ensemble(pc: PointCloud, net: PdNet, rng: np.random.Generator) -> np.ndarray:
    """Test-time prediction: ``config.ensemble`` fresh trees, averaged."""
    pc = normalize_unit_ball(pc)
    trees = [sample_tree(pc, net.config, rng)[0] for _ in range(net.config.ensemble)]
    return ensemble_predict(pc, trees, net)


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int | None = None


def train_pdnet(
    split: DatasetSplit,
    config: PdNetConfig,
    settings: TrainSettings,
    rng: np.random.Generator,
    net: PdNet | None = None,
    init_rng: np.random.Generator | None = None,
    callback=None,
) -> tuple[PdNet, list[dict]]:
    """Adam training with a fresh pd-tree per shape per epoch.

    Returns the network and one metrics record per epoch (mean cross-entropy,
    mean training mIoU over leaves, step count, wall time). ``callback(record,
    net)`` runs after every epoch.
    """
    (category,) = split.categories
    parts = split.part_count[category]
    if net is None:
        net = PdNet(config, parts, init_rng if init_rng is not None else rng)
    params = net.params()
    shapes = [normalize_unit_ball(pc) for pc in split.shapes]
    records = []
    step = 0
    start = time.perf_counter()
    for epoch in range(settings.epochs):
        order = rng.permutation(len(shapes))
        losses, mious = [], []
        for lo in range(0, len(order), settings.batch_size):
            batch = [shapes[i] for i in order[lo : lo + settings.batch_size]]
            drawn = [sample_tree(pc, config, rng, train=True) for pc in batch]
            trees = [t for t, _ in drawn]
            labels = np.concatenate([pc.labels[t.leaf_origins()] for t, pc in zip(trees, batch)])
            T.zero_grad(params)
            loss, probs = T.softmax_cross_entropy(net.forward(trees), labels)
            loss.backward()
            T.adam_step(params, settings.lr, settings.beta1, settings.beta2, settings.eps)
            losses.append(float(loss.data))
            pred = probs.argmax(axis=1).reshape(len(trees), -1)
            for p, y in zip(pred, labels.reshape(len(trees), -1)):
                mious.append(shape_miou(p, y, parts))
            step += 1
            if settings.max_steps is not None and step >= settings.max_steps:
                break
        rec = {
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "train_miou": float(np.mean(mious)) if mious else float("nan"),
            "wall": time.perf_counter() - start,
        }
        records.append(rec)
        log.info("pdnet %s", rec)
        if callback is not None:
            callback(rec, net)
        if settings.max_steps is not None and step >= settings.max_steps:
            break
    return net, records
