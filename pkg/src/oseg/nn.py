"""Parameter containers with hierarchical names.

A :class:`Module` owns :class:`Tensor` attributes (learnable when
``requires_grad``; buffers otherwise) and child modules. Names are built from
attribute paths, e.g. ``level0.res.r1.unit1.conv.kernel``.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Module:
    training: bool = True

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.named_tensors() if t.requires_grad]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, t in self.named_tensors():
            if name in out:
                raise KeyError(f"duplicate tensor name {name!r}")
            out[name] = t.data.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != expected {t.shape}")
            t.data[...] = arr


def he_uniform(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ConvWeights(Module):
    """Kernel (out_ch, in_ch, kh, kw) plus bias (out_ch,)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator | None = None,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        init = he_uniform(rng, (out_ch, in_ch, k, k)) if rng is not None else np.zeros((out_ch, in_ch, k, k))
        self.kernel = Tensor(init, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class BatchNormState(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = Tensor(np.zeros(channels))
        self.running_var = Tensor(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean.data,
                              self.running_var.data, self.training, self.momentum, self.eps)


class ReluConvBN(Module):
    """ReLU -> Conv -> BN, the basic unit of the refinement blocks."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator | None):
        self.conv = ConvWeights(in_ch, out_ch, k, rng)
        self.bn = BatchNormState(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(ops.relu(x)))
