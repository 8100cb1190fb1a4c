"""Parameterized layers, DCGAN-style initialization and the SGD optimizer."""
from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Iterable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DTYPE, Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    """Trainable tensor; ``requires_grad`` is on unless frozen."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container tracking parameters, buffers and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray):
        arr = np.ascontiguousarray(value, dtype=DTYPE)
        self._buffers[name] = arr
        object.__setattr__(self, name, arr)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters(prefix))
        state.update(self.named_buffers(prefix))
        return state

    def load_state_dict(self, state: dict, prefix: str = ""):
        own = self.state_dict(prefix)
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing entries: {missing}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {arr.shape}")
            arr[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = Parameter(np.zeros((out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, output_padding: int = 0):
        super().__init__()
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Parameter(np.zeros((in_channels, out_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    """Spatial batch normalization.

    ``frozen`` keeps batch statistics in training mode but stops the running
    moments from moving, so a network whose weights are held fixed for a step
    is left bitwise untouched.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        object.__setattr__(self, "frozen", False)

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training=self.training, update_running=not self.frozen)


class LookupTable(Module):
    """One learned row per class id."""

    def __init__(self, num_labels: int, dim: int):
        super().__init__()
        self.table = Parameter(np.zeros((num_labels, dim)))

    @property
    def num_labels(self) -> int:
        return self.table.shape[0]

    def forward(self, ids) -> Tensor:
        return ad.embedding(self.table, ids)


def lookup_forward(table: LookupTable, label: int) -> Tensor:
    """Embedding row of a single class id, shape ``(dim,)``."""
    if not 0 <= int(label) < table.num_labels:
        raise IndexError(f"label id {label} out of range [0, {table.num_labels})")
    return ad.embedding(table.table, np.asarray(int(label)))


def init_parameters(module: Module, seed: int) -> Module:
    """Reset every parameter deterministically from ``seed``.

    Conv, linear and lookup weights ~ N(0, 0.02^2); biases 0; BN gamma 1 and
    beta 0 with running moments reset.
    """
    rng = np.random.default_rng(seed)
    for m in module.modules():
        if isinstance(m, (Linear, Conv2d, ConvTranspose2d)):
            m.weight.data[...] = rng.normal(0.0, INIT_STD, size=m.weight.shape)
            if m.bias is not None:
                m.bias.data[...] = 0.0
        elif isinstance(m, LookupTable):
            m.table.data[...] = rng.normal(0.0, INIT_STD, size=m.table.shape)
        elif isinstance(m, BatchNorm2d):
            m.gamma.data[...] = 1.0
            m.beta.data[...] = 0.0
            m.running_mean[...] = 0.0
            m.running_var[...] = 1.0
    return module


@contextlib.contextmanager
def frozen(*modules: Module):
    """Hold the weights and BN running moments of ``modules`` fixed.

    Gradients still flow *through* the modules to their inputs.
    """
    params = [p for m in modules for p in m.parameters()]
    bns = [b for m in modules for b in m.modules() if isinstance(b, BatchNorm2d)]
    prev_req = [p.requires_grad for p in params]
    prev_bn = [b.frozen for b in bns]
    for p in params:
        p.requires_grad = False
    for b in bns:
        object.__setattr__(b, "frozen", True)
    try:
        yield
    finally:
        for p, r in zip(params, prev_req):
            p.requires_grad = r
        for b, f in zip(bns, prev_bn):
            object.__setattr__(b, "frozen", f)


class SGD:
    """Stochastic gradient descent, optionally with heavy-ball momentum."""

    def __init__(self, params: Iterable[tuple[str, Parameter]] | Iterable[Parameter],
                 lr: float = 0.01, momentum: float = 0.0):
        items = list(params)
        if items and not isinstance(items[0], tuple):
            items = [(p.name or f"param{i}", p) for i, p in enumerate(items)]
        self.params: list[tuple[str, Parameter]] = items
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in items} if momentum else {}

    def step(self, allow_missing: bool = False):
        sgd_step(self.params, self.lr, self.momentum, self.velocity, allow_missing=allow_missing)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


def sgd_step(params, learning_rate: float, momentum: float = 0.0, velocity: dict | None = None,
             allow_missing: bool = False):
    """``value -= lr * grad`` for each parameter, then clear the gradients.

    Raises ``ValueError`` naming the first parameter without a gradient unless
    ``allow_missing`` (parameters frozen out of the step are then left alone).
    """
    items = list(params)
    if items and not isinstance(items[0], tuple):
        items = [(p.name or f"param{i}", p) for i, p in enumerate(items)]
    if not allow_missing:
        for name, p in items:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
    for name, p in items:
        if p.grad is None:
            continue
        if momentum:
            v = velocity[name]
            v *= momentum
            v += p.grad
            p.data -= learning_rate * v
        else:
            p.data -= learning_rate * p.grad
        p.grad.fill(0.0)
