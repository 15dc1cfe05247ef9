"""Network families: width/depth MLPs, the two-layer shortcut net, a small CNN.

A :class:`Network` is an ordered list of layers over float32 parameters.
Calling it yields softmax probabilities; :meth:`Network.logits` exposes the
pre-softmax scores that the training losses consume.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, make_rng

KINDS = ("mlp", "f2_binary", "small_cnn", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str = "mlp"
    width: int = 32
    depth: int = 1
    input_dims: tuple = (1, 8, 8)
    classes: int = 2
    channels: int = 64          # f2_binary conv channels; small_cnn first block

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "f2_binary" and self.classes != 2:
            raise ValueError("f2_binary is a two-class network")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be (C, H, W), got {self.input_dims}")

    @property
    def n_inputs(self) -> int:
        c, h, w = self.input_dims
        return c * h * w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


@dataclass
class Network:
    spec: NetworkSpec
    layers: list = field(default_factory=list)   # (name, *param tensors)
    softmax_head: bool = True

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer[1:]]

    def n_params(self) -> int:
        return int(sum(p.data.size for p in self.params))

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        expected = self.spec.input_dims
        if tuple(x.shape[1:]) != expected:
            raise T.ShapeError(f"input shape {x.shape[1:]} does not match {expected}")
        h = x
        for name, *ps in self.layers:
            if name == "flatten":
                h = T.flatten(h)
            elif name == "dense":
                if h.data.ndim != 2:
                    h = T.flatten(h)
                h = T.add_bias(T.matmul(h, ps[0]), ps[1])
            elif name == "conv":
                h = T.add_bias(T.conv2d(h, ps[0]), ps[1])
            elif name == "relu":
                h = T.relu(h)
            elif name == "maxpool":
                h = T.maxpool2(h)
            else:
                raise ValueError(f"unknown layer {name!r}")
        return h

    def __call__(self, x) -> Tensor:
        z = self.logits(x)
        return T.softmax(z) if self.softmax_head else z

    forward = __call__

    def predict_proba(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=T.DTYPE)
        outs = [self(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.classes), T.DTYPE)

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        ps = self.params
        if len(arrays) != len(ps):
            raise ValueError(f"expected {len(ps)} tensors, got {len(arrays)}")
        for p, a in zip(ps, arrays):
            if p.data.shape != tuple(a.shape):
                raise T.ShapeError(f"parameter shape {p.data.shape} vs {a.shape}")
            p.data = np.array(a, dtype=T.DTYPE)

    def clone(self) -> "Network":
        layers = [(name, *[Tensor(p.data.copy(), requires_grad=True) for p in ps])
                  for name, *ps in self.layers]
        return Network(self.spec, layers, self.softmax_head)

    def save(self, path) -> None:
        T.save_tensors(path, self.state())


def _dense(rng, fan_in: int, fan_out: int) -> tuple:
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return ("dense", Tensor(w, requires_grad=True),
            Tensor(np.zeros(fan_out), requires_grad=True))


def _conv(rng, c_in: int, c_out: int) -> tuple:
    w = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3))
    return ("conv", Tensor(w, requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True))


def build_mlp(spec: NetworkSpec, seed: int) -> Network:
    """``depth`` hidden ReLU layers of ``width`` units, then a linear head.

    Weights are He-normal (std sqrt(2 / fan_in)), biases zero.
    """
    if spec.kind != "mlp":
        raise ValueError("build_mlp needs kind='mlp'")
    rng = make_rng(seed, "build_mlp")
    layers: list = [("flatten",)]
    fan_in = spec.n_inputs
    for _ in range(spec.depth):
        layers += [_dense(rng, fan_in, spec.width), ("relu",)]
        fan_in = spec.width
    layers.append(_dense(rng, fan_in, spec.classes))
    return Network(spec, layers)


def build_linear(spec: NetworkSpec, seed: int) -> Network:
    """Single affine layer (logistic/softmax regression)."""
    rng = make_rng(seed, "build_linear")
    return Network(spec, [("flatten",), _dense(rng, spec.n_inputs, spec.classes)])


def build_f2_binary(input_dims: Sequence[int] = (3, 32, 32), seed: int = 0,
                    channels: int = 64) -> Network:
    """conv(channels, 3x3, pad 1) -> ReLU -> maxpool 2x2 -> flatten -> FC(2).

    (3, 32, 32) and (1, 28, 28) are the reference shapes; any input with even
    height and width is accepted for desk-scale data.
    """
    c, h, w = (int(d) for d in input_dims)
    if h % 2 or w % 2 or h < 2 or w < 2:
        raise ValueError(f"f2_binary needs even spatial dims, got {tuple(input_dims)}")
    spec = NetworkSpec(kind="f2_binary", input_dims=(c, h, w), classes=2,
                       channels=channels)
    rng = make_rng(seed, "build_f2_binary")
    layers = [_conv(rng, c, channels), ("relu",), ("maxpool",), ("flatten",),
              _dense(rng, flatten_dim(spec), 2)]
    return Network(spec, layers)


def flatten_dim(spec: NetworkSpec) -> int:
    """Feature count entering the dense head of an f2_binary network."""
    c, h, w = spec.input_dims
    return spec.channels * (h // 2) * (w // 2)


def build_small_cnn(spec: NetworkSpec, seed: int) -> Network:
    """Two conv blocks (conv-ReLU-pool) and one dense layer."""
    c, h, w = spec.input_dims
    if h % 4 or w % 4:
        raise ValueError(f"small_cnn needs spatial dims divisible by 4, got {spec.input_dims}")
    rng = make_rng(seed, "build_small_cnn")
    c1, c2 = spec.channels, 2 * spec.channels
    layers = [_conv(rng, c, c1), ("relu",), ("maxpool",),
              _conv(rng, c1, c2), ("relu",), ("maxpool",), ("flatten",),
              _dense(rng, c2 * (h // 4) * (w // 4), spec.classes)]
    return Network(spec, layers)


def build(spec: NetworkSpec, seed: int) -> Network:
    if spec.kind == "mlp":
        return build_mlp(spec, seed)
    if spec.kind == "f2_binary":
        return build_f2_binary(spec.input_dims, seed, spec.channels)
    if spec.kind == "small_cnn":
        return build_small_cnn(spec, seed)
    return build_linear(spec, seed)


def identity_network(n: int) -> Network:
    """Layer-free network whose logits are its (flattened) input."""
    return Network(NetworkSpec(kind="linear", input_dims=(1, 1, n), classes=max(n, 2)),
                   [("flatten",)], softmax_head=False)


def classify(net: Network, x: np.ndarray) -> np.ndarray:
    """0-based argmax labels; ties go to the lowest index."""
    return np.argmax(net.predict_proba(x), axis=1)


def argmax_label(probs) -> int:
    return int(np.argmax(np.asarray(probs)))


def report_label(internal: int) -> int:
    """Internal labels are 0-based; reports use 1..m."""
    return int(internal) + 1


def internal_label(reported: int) -> int:
    return int(reported) - 1
