"""Dense float64 tensors with a reverse-mode tape, layers and Adam.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents and a backward closure. Nodes carry a monotone sequence number,
so sorting the reachable nodes by that number replays the tape in reverse.
"""
from __future__ import annotations

import contextlib
import hashlib
import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import CheckpointError, DimensionError, PsfError

_seq = itertools.count()
_grad_enabled = True


class DegenerateBatchError(PsfError):
    pass


class LabelError(PsfError):
    pass


class UninitializedGradientError(PsfError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        # interior grads are scratch; leaves keep accumulating across calls
        for t in nodes:
            if t._backward is not None:
                t.grad = None
        self._accum(np.broadcast_to(grad, self.shape))
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
                t.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self)


class Param(Tensor):
    """Trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: a._accum(-g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: x._accum(g * mask))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: x._accum(g / x.data))


# -- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)
    return _node(data, (x,), lambda g: x._accum(g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(data, (x,), lambda g: x._accum(np.transpose(g, inv)))


def getitem(x: Tensor, idx) -> Tensor:
    data = x.data[idx]

    basic = isinstance(idx, slice) or (
        isinstance(idx, tuple) and all(isinstance(i, (slice, int)) for i in idx)
    )

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        x._accum(full)

    return _node(np.array(data), (x,), backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by an integer array; index -1 yields a zero row."""
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    data = x.data[safe]
    if not valid.all():
        data = data * valid.reshape(valid.shape + (1,) * (x.ndim - 1))

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, safe[valid], g[valid])
        x._accum(full)

    return _node(data, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(
            f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _node(data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(np.take(g, i, axis=axis))

    return _node(data, tensors, backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    data = np.broadcast_to(x.data, shape).copy()
    return _node(data, (x,), lambda g: x._accum(_unbroadcast(g, x.shape)))


# -- reductions -----------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _node(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def tmax(x: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; ties share the gradient equally."""
    m = x.data.max(axis=axis, keepdims=True)
    mask = x.data == m
    mask = mask / mask.sum(axis=axis, keepdims=True)
    data = m if keepdims else np.squeeze(m, axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(g * mask)

    return _node(data, (x,), backward)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics for 2-D and batched 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for x of shape (N, Cin), w (Cin, Cout), b (Cout,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out_data = x.data @ w.data
    if b is not None:
        out_data = out_data + b.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def weighted_sum(y: Tensor, coeff: np.ndarray) -> Tensor:
    """Contract ``y`` (N, J, C) with constant coefficients (N, J) over J."""
    coeff = np.asarray(coeff, dtype=np.float64)
    data = np.einsum("nj,njc->nc", coeff, y.data)
    return _node(data, (y,), lambda g: y._accum(coeff[:, :, None] * g[:, None, :]))


# -- normalization and losses --------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str = "train",
    eps: float = 1e-5,
    running: dict | None = None,
    momentum: float = 0.9,
) -> Tensor:
    """Per-column normalization of an (N, C) tensor.

    ``running`` holds ``mean`` and ``var`` arrays. Train mode refreshes them as
    ``momentum * old + (1 - momentum) * batch``; eval mode normalizes with them.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs N >= 2, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if running is not None:
            running["mean"] = momentum * running["mean"] + (1 - momentum) * mu
            running["var"] = momentum * running["var"] + (1 - momentum) * var
    else:
        if running is None:
            raise ValueError("eval mode batch_norm needs running statistics")
        mu, var = running["mean"], running["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gamma.data + beta.data
    train = mode == "train"

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if train:
                gx = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv
            x._accum(gx)

    return _node(data, (x, gamma, beta), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of row-wise softmax against integer labels.

    Returns the scalar loss tensor and the probability matrix.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, p = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    bad = np.flatnonzero((labels < 0) | (labels >= p))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {p})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    # the max term is exactly 1; log1p over the rest keeps tiny losses accurate
    e = np.exp(z)
    e[np.arange(n), z.argmax(axis=1)] = 0.0
    logsum = np.log1p(e.sum(axis=1))
    logp = z - logsum[:, None]
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        logits._accum(g * d / n)

    return _node(np.asarray(loss), (logits,), backward), probs


# -- parameters and optimization -----------------------------------------

def glorot(rng: np.random.Generator, shape, name: str, fan_in=None, fan_out=None) -> Param:
    """Uniform(-a, a) init with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in = shape[-2] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Param(rng.uniform(-a, a, size=shape), name)


def zeros(shape, name: str) -> Param:
    return Param(np.zeros(shape), name)


def zero_grad(params: Iterable[Param]) -> None:
    for p in params:
        p.grad = None


def adam_step(
    params: Iterable[Param],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for p in params:
        if p.grad is None:
            raise UninitializedGradientError(f"parameter {p.name!r} has no gradient")
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad**2
        mhat = p.m / (1 - beta1**p.step)
        vhat = p.v / (1 - beta2**p.step)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# -- randomness -----------------------------------------------------------

def stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name & (2**64 - 1)
    return int.from_bytes(hashlib.blake2b(name.encode(), digest_size=8).digest(), "little")


def make_rng(seed: int, stream: str | int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream); platform independent."""
    key = (int(seed) & (2**64 - 1)) | (stream_id(stream) << 64)
    return np.random.Generator(np.random.Philox(key=key))


# -- checkpoints ----------------------------------------------------------

MAGIC = b"PSFC"
VERSION = 1


def save_params(path, params: Sequence[Param]) -> None:
    """Flat binary: magic, version, count, then (name, rank, dims, <f8 data) per param."""
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(params)))
        for p in params:
            name = p.name.encode()
            f.write(struct.pack("<I", len(name)) + name)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode()
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
            pos += 8 * size
            out[name] = arr.astype(np.float64)
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    return out


def assign_params(params: Sequence[Param], values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise CheckpointError(f"checkpoint lacks parameter {p.name!r}")
        if values[p.name].shape != p.shape:
            raise CheckpointError(
                f"parameter {p.name!r}: checkpoint shape {values[p.name].shape} != {p.shape}"
            )
        p.data = values[p.name].copy()


# -- gradient checking ----------------------------------------------------

def numeric_grad(f: Callable[[], float], t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to each entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-10) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(build: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients.

    ``build`` recomputes the forward pass and returns a tensor; the scalar
    under test is its inner product with a fixed random weighting, so
    outputs with constant sums (softmax rows) are still checked.
    """
    for t in tensors:
        t.grad = None
    out = build()
    weight = np.random.default_rng(12345).standard_normal(out.shape)
    (out * weight).sum().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def f():
        with no_grad():
            return float((build().data * weight).sum())

    worst = 0.0
    for t, a in zip(tensors, analytic):
        worst = max(worst, rel_error(a, numeric_grad(f, t, h)))
    return worst
