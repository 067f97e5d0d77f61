"""Dense point blocks and adversarial loss formulas.

The losses are pure functions of network outputs. The discriminator,
encoder and generator networks themselves are not built here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, PsfError
from .tensor import Param, Tensor

CLAMP = 1e-7


class DomainError(PsfError, ValueError):
    pass


# -- dense block ----------------------------------------------------------

@dataclass
class DenseLayer:
    # no linear bias: batch norm's shift makes it redundant
    weight: Param
    gamma: Param
    beta: Param
    running: dict


@dataclass
class DenseBlockParams:
    layers: list[DenseLayer]

    @property
    def local_width(self) -> int:
        return sum(layer.weight.shape[1] for layer in self.layers)

    @property
    def out_width(self) -> int:
        return 3 * self.local_width

    def params(self) -> list[Param]:
        return [p for l in self.layers for p in (l.weight, l.gamma, l.beta)]


def dense_block_params(
    rng: np.random.Generator,
    c_in: int,
    widths: tuple[int, ...] = (64, 64, 64, 64, 64),
    name: str = "dense",
) -> DenseBlockParams:
    layers = []
    fan = c_in
    for i, w in enumerate(widths):
        layers.append(
            DenseLayer(
                T.glorot(rng, (fan, w), f"{name}.{i}.w"),
                T.Param(np.ones(w), f"{name}.{i}.gamma"),
                T.zeros(w, f"{name}.{i}.beta"),
                {"mean": np.zeros(w), "var": np.ones(w)},
            )
        )
        fan += w
    return DenseBlockParams(layers)


def dense_block_forward(features, params: DenseBlockParams, mode: str = "train") -> Tensor:
    """Per-point densely connected layers plus global max and average pooling.

    Layer ``l`` sees the block input concatenated with every earlier layer
    output. The block output concatenates the layer outputs (local), their
    max over points and their mean over points, both broadcast to every row.
    """
    x = T.as_tensor(features)
    if x.ndim != 2:
        raise DimensionError(f"dense block expects (N, C) features, got {x.shape}")
    inputs, outs = [x], []
    for layer in params.layers:
        h = T.linear(T.concat(inputs, axis=1), layer.weight)
        h = T.relu(T.batch_norm(h, layer.gamma, layer.beta, mode, running=layer.running))
        outs.append(h)
        inputs.append(h)
    local = T.concat(outs, axis=1)
    n, c = local.shape
    gmax = T.broadcast_to(T.tmax(local, axis=0, keepdims=True), (n, c))
    gavg = T.broadcast_to(T.tmean(local, axis=0, keepdims=True), (n, c))
    return T.concat([local, gmax, gavg], axis=1)


# -- losses ---------------------------------------------------------------

def _clamp(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64), CLAMP, 1.0 - CLAMP)


def _prob_scalar(name: str, d) -> float:
    d = np.asarray(d, dtype=np.float64)
    if d.shape != () or not np.isfinite(d) or d < 0 or d > 1:
        raise DomainError(f"{name} must be a probability scalar in [0, 1], got {d!r}")
    return float(_clamp(d))


def bce(d, target: float) -> float:
    """Binary cross-entropy of a discriminator output toward ``target``."""
    d = float(_clamp(d))
    return -(target * np.log(d) + (1.0 - target) * np.log(1.0 - d))


@dataclass
class AdvLossInputs:
    seg: np.ndarray  # (N, P) posteriors
    y_gt: np.ndarray  # (N, P) one-hot
    d_real: float
    d_fake: float
    lam: float = 1.0


def adv_seg_losses(inp: AdvLossInputs) -> tuple[float, float]:
    """(L_SEG, L_D) for adversarial segmentation training.

    L_SEG = CE(SEG, Y) + lam * BCE(D_fake, 1); L_D = BCE(D_fake, 0) + BCE(D_real, 1).
    CE is the mean over points of -sum_p Y log SEG.
    """
    seg = np.asarray(inp.seg, dtype=np.float64)
    y = np.asarray(inp.y_gt, dtype=np.float64)
    if seg.ndim != 2 or seg.shape != y.shape:
        raise DimensionError(f"posteriors {seg.shape} and ground truth {y.shape} must be equal (N, P)")
    if not np.all(np.isfinite(seg)) or seg.min() < 0 or seg.max() > 1:
        raise DomainError("posteriors must lie in [0, 1]")
    if np.abs(seg.sum(axis=1) - 1.0).max(initial=0.0) > 1e-9:
        raise DomainError("posterior rows must sum to 1")
    if not np.all((y == 0) | (y == 1)) or np.any(y.sum(axis=1) != 1):
        raise DomainError("ground truth rows must be one-hot")
    d_real = _prob_scalar("D_real", inp.d_real)
    d_fake = _prob_scalar("D_fake", inp.d_fake)
    ce = -(y * np.log(_clamp(seg))).sum(axis=1).mean()
    l_seg = ce + inp.lam * bce(d_fake, 1.0)
    l_d = bce(d_fake, 0.0) + bce(d_real, 1.0)
    return float(l_seg), float(l_d)


@dataclass
class AlphaGanBatch:
    x_real: np.ndarray
    x_recon: np.ndarray
    x_gen: np.ndarray
    d_real: float
    d_recon: float
    d_gen: float
    dl_enc: float  # latent discriminator on encoder codes
    dl_gen: float  # latent discriminator on prior samples


def alpha_gan_losses(b: AlphaGanBatch) -> tuple[float, float, float]:
    """(L_EG, L_D, L_DL) for one alpha-GAN update round.

    The voxelwise reconstruction BCE is averaged over voxels, with ``x_real``
    as unclamped targets and ``x_recon`` clamped away from 0 and 1. The latent
    discriminator's "reconstruction" slot takes the encoder codes.
    """
    grids = [np.asarray(g, dtype=np.float64) for g in (b.x_real, b.x_recon, b.x_gen)]
    if not grids[0].shape == grids[1].shape == grids[2].shape:
        raise DimensionError(f"grid shapes differ: {[g.shape for g in grids]}")
    for g in grids:
        if not np.all(np.isfinite(g)) or g.size and (g.min() < 0 or g.max() > 1):
            raise DomainError("grid occupancies must lie in [0, 1]")
    real, recon = grids[0], _clamp(grids[1])
    d_real = _prob_scalar("D(x_real)", b.d_real)
    d_recon = _prob_scalar("D(x_recon)", b.d_recon)
    d_gen = _prob_scalar("D(x_gen)", b.d_gen)
    dl_enc = _prob_scalar("D_L(z_enc)", b.dl_enc)
    dl_gen = _prob_scalar("D_L(z_gen)", b.dl_gen)
    rec = -(real * np.log(recon) + (1.0 - real) * np.log(1.0 - recon)).mean() if real.size else 0.0
    l_eg = rec - np.log(d_recon) - np.log(d_gen) - np.log(dl_enc)
    l_d = -np.log(d_real) - np.log(1.0 - d_recon) - np.log(1.0 - d_gen)
    l_dl = -np.log(dl_enc) - np.log(1.0 - dl_gen)
    return float(l_eg), float(l_d), float(l_dl)
