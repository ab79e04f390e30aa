"""Layers, parameter registry, initialization and plain SGD.

Modules are thin containers: any ``Tensor`` attribute with
``requires_grad`` is a trainable parameter, any ``np.ndarray`` attribute
is a persistent buffer (batchnorm running statistics), and nested
modules or lists of modules are walked recursively. Names are dotted
attribute paths, which keeps checkpoints stable across runs of the same
configuration.

Initialization draws from a caller-supplied ``numpy.random.Generator``
in construction order, so one seed pins every weight in the model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .tensor import (
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    conv_transpose2d,
    dense,
    per_channel_dense,
    relu,
)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Kaiming fan-in normal draw: std = sqrt(2 / fan_in)."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class Module:
    """Base container; subclasses assign parameters/buffers/submodules as attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, child, kind in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if kind == "param":
                yield path, child
            elif kind == "module":
                yield from child.named_parameters(path)

    def named_buffers(self, prefix: str = ""):
        for name, child, kind in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if kind == "buffer":
                yield path, child
            elif kind == "module":
                yield from child.named_buffers(path)

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val, "param"
            elif isinstance(val, np.ndarray):
                yield name, val, "buffer"
            elif isinstance(val, Module):
                yield name, val, "module"
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item, "module"

    def param_set(self) -> "ParamSet":
        return ParamSet(self.named_parameters())


class ParamSet:
    """Ordered name -> Tensor registry with the bulk operations SGD needs."""

    def __init__(self, named):
        self._items = list(named)
        names = [n for n, _ in self._items]
        if len(set(names)) != len(names):
            raise ShapeError("duplicate parameter names in ParamSet")
        self._by_name = dict(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def __getitem__(self, name: str) -> Tensor:
        return self._by_name[name]

    def names(self):
        return [n for n, _ in self._items]

    def tensors(self):
        return [t for _, t in self._items]

    def zero_grad(self) -> None:
        for _, t in self._items:
            t.zero_grad()

    def total_size(self) -> int:
        return int(sum(t.size for _, t in self._items))


def count_params(params: ParamSet, selector: str = "") -> int:
    """Count trainable elements under a dotted-name prefix.

    An empty selector counts everything; an unknown selector raises
    KeyError rather than quietly returning 0.
    """
    if not selector:
        return params.total_size()
    hits = [t.size for n, t in params if n == selector or n.startswith(selector + ".")]
    if not hits:
        raise KeyError(f"selector {selector!r} matches no parameter")
    return int(sum(hits))


# ---------------------------------------------------------------------
# primitive layers
# ---------------------------------------------------------------------


class Conv2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, kernel: int = 2, stride: int = 2, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.w = Tensor(he_normal(rng, (in_ch, out_ch, kernel, kernel), fan_in, dtype), requires_grad=True)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w, self.stride)


class Dense(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, dtype=np.float32):
        self.w = Tensor(he_normal(rng, (in_dim, out_dim), in_dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w, self.b)


class PerChannelDense(Module):
    """C independent one-neuron affine maps over L inputs each."""

    def __init__(self, rng, channels: int, in_dim: int, dtype=np.float32):
        self.w = Tensor(he_normal(rng, (channels, in_dim), in_dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return per_channel_dense(x, self.w, self.b)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training, self.momentum, self.eps,
        )


# ---------------------------------------------------------------------
# residual stack
# ---------------------------------------------------------------------


class BasicBlock(Module):
    """Two 3x3 convs with batchnorm, plus a shortcut (1x1 projection when shapes change)."""

    def __init__(self, rng, in_ch: int, out_ch: int, stride: int, dtype=np.float32):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, in_ch, out_ch, 1, stride=stride, padding=0, dtype=dtype)
        else:
            self.proj = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        out = relu(self.bn1(self.conv1(x), training))
        out = self.bn2(self.conv2(out), training)
        shortcut = self.proj(x) if self.proj is not None else x
        return relu(add(out, shortcut))


class ResidualStack(Module):
    """Two basic blocks: 64 -> 256 with stride 2, then 256 -> 256 identity.

    Takes [N,64,32,32] to [N,256,16,16]; the second block's shortcut is
    a pure identity so zeroing its conv branch reduces the block to ReLU.
    """

    def __init__(self, rng, in_ch: int = 64, out_ch: int = 256, dtype=np.float32):
        self.block1 = BasicBlock(rng, in_ch, out_ch, stride=2, dtype=dtype)
        self.block2 = BasicBlock(rng, out_ch, out_ch, stride=1, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.block2(self.block1(x, training), training)


# ---------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Plain SGD with L2 weight decay and a step learning-rate schedule."""

    lr: float = 0.0005
    decay_factor: float = 0.1
    decay_period: int = 30
    weight_decay: float = 0.0001
    batch_size: int = 32


def lr_at(config: SgdConfig, epoch: int) -> float:
    """Learning rate in force during 0-indexed `epoch`."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.decay_factor ** (epoch // config.decay_period)


def sgd_step(params: ParamSet, config: SgdConfig, epoch: int) -> None:
    """In-place update p -= lr(epoch) * (p.grad + weight_decay * p)."""
    lr = lr_at(config, epoch)
    for name, p in params:
        if p.grad is None:
            raise GraphError(f"parameter {name!r} has no gradient; run backward first")
        g = p.grad
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        p.data -= (lr * g).astype(p.dtype, copy=False)
