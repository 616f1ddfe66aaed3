"""In-place first-order optimizers over named parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class OptimConfig:
    kind: str = "adam"  # "adam" | "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0


class Optimizer:
    def __init__(self, named_params: list[tuple[str, Tensor]], config: OptimConfig):
        self.named_params = list(named_params)
        self.config = config
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def _grads(self) -> list[np.ndarray]:
        grads = []
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}", where=name)
            grads.append(g)
        return grads

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, named_params, config: OptimConfig):
        super().__init__(named_params, config)
        self.velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        lr, mom = self.config.lr, self.config.momentum
        for (_, p), g, v in zip(self.named_params, grads, self.velocity):
            if mom:
                v *= mom
                v += g
                g = v
            p.data -= lr * g


class Adam(Optimizer):
    def __init__(self, named_params, config: OptimConfig):
        super().__init__(named_params, config)
        self.m = [np.zeros_like(p.data) for _, p in self.named_params]
        self.v = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        grads = self._grads()
        self.t += 1
        c = self.config
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for (_, p), g, m, v in zip(self.named_params, grads, self.m, self.v):
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


def make_optimizer(named_params, config: OptimConfig | None = None) -> Optimizer:
    config = config or OptimConfig()
    if config.kind == "adam":
        return Adam(named_params, config)
    if config.kind == "sgd":
        return SGD(named_params, config)
    raise ValueError(f"unknown optimizer {config.kind!r}")


def optimizer_step(named_params, grads, config: OptimConfig) -> None:
    """One stateless descent step (plain SGD) with explicit gradients."""
    for (name, p), g in zip(named_params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", where=name)
    for (_, p), g in zip(named_params, grads):
        p.data -= config.lr * np.asarray(g, dtype=np.float64)
