"""Dense float32 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it covers exactly the operations needed by
the MLP / two-layer shortcut network / small CNN families used in this
package (dense layers, 3x3 same-padding convolution, ReLU, 2x2 max pooling,
softmax and fused softmax cross-entropy, plus a handful of elementwise ops).

Every op records its parents and a closure that pushes the output gradient
back to them.  ``backward`` walks the recorded graph once in reverse
topological order.  All data is float32; a non-finite value produced by any
op raises :class:`NonFiniteError` immediately.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by '{op}'")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, op: str) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                 _parents=parents, op=op)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(DTYPE, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# --------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    out = _make(a.data + b.data, (a, b), "add")

    def _bw(g):
        _accum(a, g)
        _accum(b, g)
    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    out = _make(a.data * b.data, (a, b), "mul")

    def _bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = DTYPE(c)
    out = _make(a.data * c, (a,), "scale")
    out._backward = lambda g: _accum(a, g * c)
    return out


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = _make(np.clip(a.data, lo, hi), (a,), "clamp")
    inside = (a.data >= lo) & (a.data <= hi)
    out._backward = lambda g: _accum(a, g * inside)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = _make(a.data * mask, (a,), "relu")
    out._backward = lambda g: _accum(a, g * mask)
    return out


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,), "reshape")
    out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def sum_all(a: Tensor) -> Tensor:
    out = _make(np.asarray(a.data.sum(dtype=DTYPE)), (a,), "sum")
    out._backward = lambda g: _accum(a, np.broadcast_to(g, a.shape))
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# --------------------------------------------------------------------------
# layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b), "matmul")

    def _bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    out._backward = _bw
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D NCHW input) bias."""
    if b.data.ndim != 1:
        raise ShapeError("bias must be 1-D")
    if x.data.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"add_bias: {x.shape} vs bias {b.shape}")
        out = _make(x.data + b.data, (x, b), "add_bias")
        axes = (0,)
    elif x.data.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"add_bias: {x.shape} vs bias {b.shape}")
        out = _make(x.data + b.data[None, :, None, None], (x, b), "add_bias")
        axes = (0, 2, 3)
    else:
        raise ShapeError("add_bias expects a 2-D or 4-D input")

    def _bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=axes))
    out._backward = _bw
    return out


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    # xp: (N, C, H+2, W+2) -> (N*H*W, C*9)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1.  ``w`` has shape (O, C, 3, 3)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: bad shapes {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {w.shape[1]}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, wd)
    wmat = w.data.reshape(o, c * 9).T
    res = (cols @ wmat).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    out = _make(np.ascontiguousarray(res), (x, w), "conv2d")

    def _bw(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        if w.requires_grad:
            _accum(w, (cols.T @ gf).T.reshape(w.shape))
        if x.requires_grad:
            dcols = (gf @ wmat.T).reshape(n, h, wd, c, 3, 3)
            dxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
            _accum(x, dxp[:, :, 1:-1, 1:-1])
    out._backward = _bw
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    res = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    out = _make(res, (x,), "maxpool2")

    def _bw(g):
        gb = np.zeros(blocks.shape, dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        _accum(x, gb.reshape(n, c, h, w))
    out._backward = _bw
    return out


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    p = _softmax_np(z.data)
    out = _make(p, (z,), "softmax")

    def _bw(g):
        _accum(z, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    out._backward = _bw
    return out


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Fused softmax + cross-entropy on raw logits with integer (0-based) labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape}, labels {labels.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    per = logsum - shifted[rows, labels]
    if reduction == "mean":
        val, k = per.mean(dtype=DTYPE), DTYPE(1.0 / z.shape[0])
    elif reduction == "sum":
        val, k = per.sum(dtype=DTYPE), DTYPE(1.0)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = _make(np.asarray(val), (logits,), "cross_entropy")

    def _bw(g):
        grad = _softmax_np(z)
        grad[rows, labels] -= 1.0
        _accum(logits, grad * (k * g))
    out._backward = _bw
    return out


# --------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf requiring grad.

    Interior nodes are visited exactly once, in reverse topological order, and
    their gradient buffers are released afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        _check_finite(node.grad, f"backward:{node.op}")
        node._backward(node.grad)
        node.grad = None


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Return gradients of ``loss`` w.r.t. ``wrt`` (zeros where unreachable)."""
    for t in wrt:
        t.grad = None
    backward(loss)
    res = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
    for t in wrt:
        t.grad = None
    return res


# --------------------------------------------------------------------------
# optimizer


class SGD:
    """Classical momentum SGD with weight decay folded into the gradient.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        mu, wd, lr = DTYPE(self.momentum), DTYPE(self.weight_decay), DTYPE(self.lr)
        for p, v in zip(self.params, self.buffers):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError("gradient/parameter shape mismatch")
            v *= mu
            v += g
            if wd:
                v += wd * p.data
            if lr:
                p.data -= lr * v
            _check_finite(p.data, "sgd_step")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             buffers: Sequence[np.ndarray], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Functional form of one :class:`SGD` update, in place on arrays."""
    for p, g, v in zip(params, grads, buffers):
        if not (p.shape == g.shape == v.shape):
            raise ShapeError("sgd_step: shapes disagree")
        v *= DTYPE(momentum)
        v += g + DTYPE(weight_decay) * p
        p -= DTYPE(lr) * v


# --------------------------------------------------------------------------
# randomness


def _key_int(k) -> int:
    if isinstance(k, (int, np.integer)):
        return int(k) & 0xFFFFFFFF
    return zlib.crc32(str(k).encode())


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator for the named stream ``(seed, *keys)``."""
    ss = np.random.SeedSequence([_key_int(seed)] + [_key_int(k) for k in keys])
    return np.random.Generator(np.random.Philox(ss))


def f32_floor(x: float) -> np.float32:
    """Largest float32 not exceeding ``x`` (so float32 budgets never exceed x)."""
    y = np.float32(x)
    if float(y) > x:
        y = np.nextafter(y, np.float32(-np.inf))
    return y


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"PLAB"
VERSION = 1


def save_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    arrays = [np.asarray(a, dtype=DTYPE) for a in arrays]
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(arrays)))
        for a in arrays:
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.astype("<f4").tobytes())


def load_tensors(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    try:
        return _parse_tensors(raw, path)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated header ({exc})") from exc


def _parse_tensors(raw: bytes, path) -> list[np.ndarray]:
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off, out = 12, []
    for _ in range(count):
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if off + size > len(raw):
            raise ValueError(f"{path}: truncated tensor payload")
        out.append(np.frombuffer(raw, dtype="<f4", count=size // 4, offset=off)
                   .reshape(dims).astype(DTYPE))
        off += size
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    return out
