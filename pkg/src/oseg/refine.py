"""Multi-level refinement decoder on a pluggable backbone.

Each level runs a residual block pair, an upscaler and chained residual
pooling, doubling (by ``scale``) the resolution; after ``levels`` of them the
features are back at input resolution and a 1x1 conv emits class logits.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .nn import BatchNormState, ConvWeights, Module, ReluConvBN
from .tensor import ShapeError, Tensor


class UpsampleMode(str, enum.Enum):
    ZERO_PAD = "zero_pad"
    DIRECT_COPY = "direct_copy"


def upsample(x: Tensor, n: int, mode: UpsampleMode | str) -> Tensor:
    mode = UpsampleMode(mode)
    if mode is UpsampleMode.ZERO_PAD:
        return ops.upsample_zero_pad(x, n)
    return ops.upsample_direct_copy(x, n)


@dataclass
class RefineConfig:
    levels: int = 4
    filters: int = 256
    upsample_mode: UpsampleMode = UpsampleMode.DIRECT_COPY
    scale: int = 2
    pool_kernel: int = 5
    num_classes: int = 6
    fuse_skips: bool = False
    steps: int = 10000
    batch_size: int = 4
    lr: float = 1e-3
    backbone_widths: tuple[int, ...] = (32, 64, 128)
    in_channels: int = 3

    def __post_init__(self):
        self.upsample_mode = UpsampleMode(self.upsample_mode)
        self.backbone_widths = tuple(int(w) for w in self.backbone_widths)

    @property
    def output_stride(self) -> int:
        return self.scale ** self.levels

    def stage_widths(self) -> list[int]:
        """Backbone stage widths; the last stage always emits ``filters``."""
        inner = list(self.backbone_widths[: self.levels - 1])
        while len(inner) < self.levels - 1:
            inner.append(inner[-1] if inner else self.filters)
        return inner + [self.filters]

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.scale < 1:
            raise ValueError("upsample scale n must be >= 1")
        if self.filters <= 0:
            raise ValueError("filters must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be a positive odd number")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels, "filters": self.filters,
            "upsample_mode": self.upsample_mode.value, "scale": self.scale,
            "pool_kernel": self.pool_kernel, "num_classes": self.num_classes,
            "fuse_skips": self.fuse_skips, "steps": self.steps,
            "batch_size": self.batch_size, "lr": self.lr,
            "backbone_widths": list(self.backbone_widths), "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefineConfig":
        return cls(**d)


@dataclass
class BackboneFeatures:
    main: Tensor
    skips: list[Tensor] = field(default_factory=list)  # coarse to fine


# ---------------------------------------------------------------------------
# blocks


class Residual(Module):
    """R(x): ReLU-Conv1x1-BN, ReLU-Conv3x3-BN, ReLU-Conv1x1-BN."""

    def __init__(self, ch: int, rng):
        self.unit0 = ReluConvBN(ch, ch, 1, rng)
        self.unit1 = ReluConvBN(ch, ch, 3, rng)
        self.unit2 = ReluConvBN(ch, ch, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.unit2(self.unit1(self.unit0(x)))


class ResidualBlock(Module):
    def __init__(self, ch: int, rng):
        self.r1 = Residual(ch, rng)
        self.r2 = Residual(ch, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return residual_block_forward(x, self)


class Upscaler(Module):
    def __init__(self, ch: int, rng):
        self.unit0 = ReluConvBN(ch, ch, 3, rng)
        self.unit1 = ReluConvBN(ch, ch, 3, rng)


class PoolChain(Module):
    """maxpool -> Conv3x3 -> BN."""

    def __init__(self, ch: int, rng):
        self.conv = ConvWeights(ch, ch, 3, rng)
        self.bn = BatchNormState(ch)


class ChainedResidualPool(Module):
    def __init__(self, ch: int, rng):
        self.chain0 = PoolChain(ch, rng)
        self.chain1 = PoolChain(ch, rng)
        self.res = ResidualBlock(ch, rng)


class RefineLevel(Module):
    def __init__(self, ch: int, rng, skip_ch: int | None = None):
        if skip_ch is not None:
            self.skip = ConvWeights(skip_ch, ch, 1, rng)
        self.res = ResidualBlock(ch, rng)
        self.upscaler = Upscaler(ch, rng)
        self.pool = ChainedResidualPool(ch, rng)


def _check_channels(x: Tensor, ch: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != ch:
        raise ShapeError(f"{what}: expected {ch} channels, got input {x.shape}",
                         expected=ch, got=x.shape)


def residual_block_forward(x: Tensor, p: ResidualBlock) -> Tensor:
    """y1 = R2(x + R1(x)) + x + R1(x)."""
    _check_channels(x, p.r1.unit0.conv.kernel.shape[1], "residual block")
    h = ops.add(x, p.r1(x))
    return ops.add(p.r2(h), h)


def upscaler_forward(y1: Tensor, p: Upscaler, mode: UpsampleMode | str, n: int) -> Tensor:
    if n < 1:
        raise ValueError(f"upscaler factor must be >= 1, got {n}")
    _check_channels(y1, p.unit0.conv.kernel.shape[1], "upscaler")
    return p.unit1(upsample(p.unit0(y1), n, mode))


def chained_residual_pool_forward(y2: Tensor, p: ChainedResidualPool, pool_kernel: int = 5) -> Tensor:
    _check_channels(y2, p.chain0.conv.kernel.shape[1], "chained residual pool")
    pad = pool_kernel // 2
    c1 = p.chain0.bn(p.chain0.conv(ops.max_pool(y2, pool_kernel, 1, pad)))
    c2 = p.chain1.bn(p.chain1.conv(ops.max_pool(c1, pool_kernel, 1, pad)))
    s = ops.add(ops.add(y2, c1), c2)
    return residual_block_forward(s, p.res)


# ---------------------------------------------------------------------------
# backbone + full network


class ToyBackbone(Module):
    """Stack of stride-``scale`` Conv3x3-BN-ReLU stages."""

    def __init__(self, config: RefineConfig, rng):
        self.scale = config.scale
        widths = config.stage_widths()
        ins = [config.in_channels] + widths[:-1]
        self.stages = [_BackboneStage(i, o, config.scale, rng) for i, o in zip(ins, widths)]


class _BackboneStage(Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int, rng):
        k = 3 if stride <= 2 else 2 * stride - 1
        self.conv = ConvWeights(in_ch, out_ch, k, rng, stride=stride, padding=k // 2)
        self.bn = BatchNormState(out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


def toy_backbone_forward(image: Tensor, p: ToyBackbone) -> BackboneFeatures:
    if image.ndim != 4:
        raise ShapeError(f"backbone expects (N, C, H, W), got {image.shape}", got=image.shape)
    stride = p.scale ** len(p.stages)
    _, c, h, w = image.shape
    expected_c = p.stages[0].conv.kernel.shape[1]
    if c != expected_c:
        raise ShapeError(f"backbone expects {expected_c} input channels, got {image.shape}",
                         expected=expected_c, got=image.shape)
    if h % stride or w % stride:
        raise ShapeError(f"image dims {(h, w)} not divisible by output stride {stride}",
                         expected=stride, got=(h, w))
    outs = []
    x = image
    for stage in p.stages:
        x = stage(x)
        outs.append(x)
    return BackboneFeatures(main=outs[-1], skips=outs[:-1][::-1])


class RefineNet(Module):
    """Backbone, ``levels`` refinement levels, and the 1x1 classifier."""

    def __init__(self, config: RefineConfig, seed: int = 0, zero_residuals: bool = False):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = ToyBackbone(config, rng)
        skip_widths = config.stage_widths()[:-1][::-1]
        self.levels = []
        for lvl in range(config.levels):
            skip_ch = skip_widths[lvl - 1] if (config.fuse_skips and lvl > 0) else None
            self.levels.append(RefineLevel(config.filters, rng, skip_ch))
        self.classifier = ConvWeights(config.filters, config.num_classes, 1, rng)
        if zero_residuals:
            zero_refinement_residuals(self)

    def __call__(self, image: Tensor) -> Tensor:
        return refine_stack_forward(toy_backbone_forward(image, self.backbone), self, self.config)


def zero_refinement_residuals(net: RefineNet) -> None:
    """Zero every residual-branch and pool-chain kernel (gamma=1, beta=0)."""
    for level in net.levels:
        for block in (level.res, level.pool.res):
            for r in (block.r1, block.r2):
                for unit in (r.unit0, r.unit1, r.unit2):
                    unit.conv.kernel.data[...] = 0.0
                    unit.conv.bias.data[...] = 0.0
                    unit.bn.gamma.data[...] = 1.0
                    unit.bn.beta.data[...] = 0.0
        for chain in (level.pool.chain0, level.pool.chain1):
            chain.conv.kernel.data[...] = 0.0
            chain.conv.bias.data[...] = 0.0
            chain.bn.gamma.data[...] = 1.0
            chain.bn.beta.data[...] = 0.0


def refine_stack_forward(features: BackboneFeatures, p: RefineNet, config: RefineConfig) -> Tensor:
    x = features.main
    if config.fuse_skips and len(features.skips) < config.levels - 1:
        raise ShapeError(f"fuse_skips needs {config.levels - 1} skip tensors, got {len(features.skips)}",
                         expected=config.levels - 1, got=len(features.skips))
    for i, level in enumerate(p.levels):
        if config.fuse_skips and i > 0:
            skip = level.skip(features.skips[i - 1])
            if skip.shape != x.shape:
                raise ShapeError(f"level {i}: skip {skip.shape} does not match stream {x.shape}",
                                 expected=x.shape, got=skip.shape)
            x = ops.add(x, skip)
        y1 = residual_block_forward(x, level.res)
        y2 = upscaler_forward(y1, level.upscaler, config.upsample_mode, config.scale)
        x = chained_residual_pool_forward(y2, level.pool, config.pool_kernel)
    return p.classifier(x)
