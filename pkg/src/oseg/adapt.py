"""Cycle-consistent sensor translator: loss kernels, networks and trainer.

The generator objective is

    alpha * adv + lambda * (beta * cycle + (1 - beta) * fm)

where ``adv`` is the saturating GAN term mean(log(1 - D(G(z)))), ``cycle``
is the two-way L1 reconstruction error and ``fm`` compares features of
translated and real images under a frozen extractor. Both directions
(G: source -> target, F: target -> source) are trained together.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .data import image_to_tensor_data, tensor_data_to_image
from .nn import ConvWeights, Module
from .optim import OptimConfig, make_optimizer
from .tensor import NonFiniteError, ShapeError, Tensor, backward, no_grad
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)

PROB_EPS = 1e-7
GENERATOR_STRIDE = 4


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# loss kernels


@dataclass(frozen=True)
class GanLossWeights:
    alpha: float = 1.0
    lam: float = 10.0
    beta: float = 0.9

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def _clamped(d: Tensor) -> Tensor:
    if d.size == 0:
        raise ShapeError("discriminator output is empty", got=d.shape)
    return ops.clamp(d, PROB_EPS, 1.0 - PROB_EPS)


def _one_minus(d: Tensor) -> Tensor:
    return ops.add_scalar(ops.scale(d, -1.0), 1.0)


def adversarial_loss_generator(d_fake) -> Tensor:
    """mean(log(1 - d_fake)) over every patch, probabilities clamped to [1e-7, 1 - 1e-7]."""
    return ops.mean(ops.log(_one_minus(_clamped(_t(d_fake)))))


def adversarial_loss_nonsaturating(d_fake) -> Tensor:
    """-mean(log d_fake): same fixed point as the saturating term, stronger early gradient."""
    return ops.scale(ops.mean(ops.log(_clamped(_t(d_fake)))), -1.0)


ADVERSARIAL_FORMS = {
    "saturating": adversarial_loss_generator,
    "nonsaturating": adversarial_loss_nonsaturating,
}


def adversarial_loss_discriminator(d_real, d_fake) -> Tensor:
    """-mean(log d_real) - mean(log(1 - d_fake))."""
    real = ops.mean(ops.log(_clamped(_t(d_real))))
    fake = ops.mean(ops.log(_one_minus(_clamped(_t(d_fake)))))
    return ops.scale(ops.add(real, fake), -1.0)


def cycle_loss(z, fgz, x, gfx) -> Tensor:
    """mean|F(G(z)) - z| + mean|G(F(x)) - x|."""
    z, fgz, x, gfx = _t(z), _t(fgz), _t(x), _t(gfx)
    return ops.add(ops.mean(ops.abs_(ops.sub(fgz, z))), ops.mean(ops.abs_(ops.sub(gfx, x))))


def feature_match_loss(extractor: Callable[[Tensor], Tensor], target, generated) -> Tensor:
    """Mean absolute difference between extractor features of two image batches."""
    target, generated = _t(target), _t(generated)
    if target.shape != generated.shape:
        raise ShapeError(f"feature_match_loss: {target.shape} vs {generated.shape}",
                         expected=target.shape, got=generated.shape)
    ft, fg = extractor(target), extractor(generated)
    if not isinstance(ft, Tensor) or not isinstance(fg, Tensor):
        raise TypeError("feature extractor must return Tensor features")
    if not (np.all(np.isfinite(ft.data)) and np.all(np.isfinite(fg.data))):
        raise NonFiniteError("feature extractor produced non-finite features", where="extractor")
    return ops.mean(ops.abs_(ops.sub(ft, fg)))


def combined_objective(w: GanLossWeights, adv, cycle, fm):
    """alpha * adv + lambda * (beta * cycle + (1 - beta) * fm).

    Works on plain floats or on scalar Tensors (then differentiable).
    """
    if not any(isinstance(v, Tensor) for v in (adv, cycle, fm)):
        return w.alpha * adv + w.lam * (w.beta * cycle + (1.0 - w.beta) * fm)
    adv, cycle, fm = _t(adv), _t(cycle), _t(fm)
    inner = ops.add(ops.scale(cycle, w.beta), ops.scale(fm, 1.0 - w.beta))
    return ops.add(ops.scale(adv, w.alpha), ops.scale(inner, w.lam))


# ---------------------------------------------------------------------------
# networks


class _ResBlock(Module):
    def __init__(self, ch: int, rng):
        self.conv0 = ConvWeights(ch, ch, 3, rng)
        self.conv1 = ConvWeights(ch, ch, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv1(ops.relu(self.conv0(x))))


class Generator(Module):
    """Two stride-2 encoder convs, two residual blocks, two upsample+conv decoder stages.

    The decoder output is added to a learnable 1x1 colour mix of the input
    (initialised to the identity), which gives the network a full-resolution
    per-pixel path. Zeroing the last decoder conv (``identity_init``) makes
    the untrained generator exactly the identity.
    """

    def __init__(self, base_filters: int, rng: np.random.Generator, identity_init: bool = False):
        f = base_filters
        self.enc0 = ConvWeights(3, f, 3, rng, stride=2)
        self.enc1 = ConvWeights(f, 2 * f, 3, rng, stride=2)
        self.res = [_ResBlock(2 * f, rng) for _ in range(2)]
        self.dec0 = ConvWeights(2 * f, f, 3, rng)
        self.dec1 = ConvWeights(f, 3, 3, None if identity_init else rng)
        self.mix = ConvWeights(3, 3, 1)
        self.mix.kernel.data[:, :, 0, 0] = np.eye(3)

    def __call__(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        if h % GENERATOR_STRIDE or w % GENERATOR_STRIDE:
            raise ShapeError(f"generator input {h}x{w} is not divisible by {GENERATOR_STRIDE}",
                             got=x.shape)
        y = ops.relu(self.enc0(x))
        y = ops.relu(self.enc1(y))
        for block in self.res:
            y = block(y)
        y = ops.relu(self.dec0(ops.upsample_direct_copy(y, 2)))
        y = self.dec1(ops.upsample_direct_copy(y, 2))
        return ops.add(self.mix(x), y)


class Discriminator(Module):
    """Patch discriminator: three stride-2 convs and a 1x1 logistic head."""

    def __init__(self, base_filters: int, rng: np.random.Generator):
        f = base_filters
        self.convs = [ConvWeights(3, f, 3, rng, stride=2),
                      ConvWeights(f, 2 * f, 3, rng, stride=2),
                      ConvWeights(2 * f, 4 * f, 3, rng, stride=2)]
        self.head = ConvWeights(4 * f, 1, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.leaky_relu(conv(x))
        return ops.sigmoid(self.head(x))


class FeatureExtractor(Module):
    """Frozen three-layer conv stack with global average pooling.

    Weights come from a fixed seed, or from ``load_state_dict`` for an
    external extractor of the same shape.
    """

    def __init__(self, seed: int = 1234, widths: tuple[int, int, int] = (16, 32, 32)):
        rng = np.random.default_rng(seed)
        chans = (3,) + tuple(widths)
        self.convs = [ConvWeights(chans[i], chans[i + 1], 3, rng, stride=1 if i == 0 else 2)
                      for i in range(3)]
        for p in self.parameters():
            p.requires_grad = False

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return ops.global_avg_pool(x)


class Direction(str, enum.Enum):
    SOURCE_TO_TARGET = "source_to_target"
    TARGET_TO_SOURCE = "target_to_source"


@dataclass
class TranslatorConfig:
    base_filters: int = 64
    identity_init: bool = False

    def validate(self) -> None:
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")


class TranslatorParams(Module):
    """G (source -> target), F (target -> source) and one discriminator per domain."""

    def __init__(self, config: TranslatorConfig | None = None, seed: int = 0):
        self.config = config or TranslatorConfig()
        self.config.validate()
        seeds = np.random.SeedSequence(seed).generate_state(4)
        f = self.config.base_filters
        self.G = Generator(f, np.random.default_rng(int(seeds[0])), self.config.identity_init)
        self.F = Generator(f, np.random.default_rng(int(seeds[1])), self.config.identity_init)
        self.D_target = Discriminator(f, np.random.default_rng(int(seeds[2])))
        self.D_source = Discriminator(f, np.random.default_rng(int(seeds[3])))

    @property
    def base_filters(self) -> int:
        return self.config.base_filters

    def generator(self, direction: Direction | str) -> Generator:
        return self.G if Direction(direction) is Direction.SOURCE_TO_TARGET else self.F


def save_translator(path: str | Path, params: TranslatorParams) -> None:
    save_weights(path, params.state_dict())
    Path(str(path) + ".json").write_text(json.dumps(asdict(params.config), sort_keys=True, indent=2) + "\n")


def load_translator(path: str | Path) -> TranslatorParams:
    config = TranslatorConfig(**json.loads(Path(str(path) + ".json").read_text()))
    params = TranslatorParams(config)
    params.load_state_dict(load_weights(path))
    return params


def translate(img: np.ndarray, params: TranslatorParams,
              direction: Direction | str = Direction.SOURCE_TO_TARGET) -> np.ndarray:
    """Run one generator on an (H, W, 3) uint8 image; output is rounded and clamped to [0, 255]."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"translate wants an (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    gen = params.generator(direction)
    with no_grad():
        out = gen(Tensor(image_to_tensor_data([img])))
    return tensor_data_to_image(out.data[0])


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLosses:
    epoch: int
    loss_g: float
    loss_d: float
    loss_cycle: float
    loss_fm: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check_set(images: Sequence[np.ndarray], what: str) -> tuple[int, ...]:
    if len(images) == 0:
        raise ValueError(f"{what} image set is empty")
    shapes = {np.asarray(im).shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"{what} images differ in size: {sorted(shapes)}")
    return shapes.pop()


def train_translator(source: Sequence[np.ndarray], target: Sequence[np.ndarray],
                     weights: GanLossWeights | None = None, epochs: int = 100, seed: int = 0,
                     config: TranslatorConfig | None = None, batch_size: int = 4,
                     lr: float = 2e-4, extractor: FeatureExtractor | None = None,
                     adversarial: str = "saturating", disc_lr: float | None = None,
                     on_epoch: Callable[[EpochLosses], None] | None = None,
                     ) -> tuple[TranslatorParams, list[EpochLosses]]:
    """Alternate generator and discriminator updates for ``epochs`` passes over ``source``.

    Each step draws ``batch_size`` source chips (reshuffled every epoch)
    and as many target chips (independently reshuffled). Returns the
    parameters and one :class:`EpochLosses` per epoch.
    """
    weights = weights or GanLossWeights()
    weights.validate()
    if adversarial not in ADVERSARIAL_FORMS:
        raise ValueError(f"adversarial must be one of {sorted(ADVERSARIAL_FORMS)}, got {adversarial!r}")
    adv_loss = ADVERSARIAL_FORMS[adversarial]
    s_shape, t_shape = _check_set(source, "source"), _check_set(target, "target")
    if s_shape != t_shape:
        raise ValueError(f"source chips {s_shape} and target chips {t_shape} differ")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    init_seed, data_seed = np.random.SeedSequence(seed).generate_state(2)
    params = TranslatorParams(config or TranslatorConfig(), seed=int(init_seed))
    extractor = extractor or FeatureExtractor()
    rng = np.random.default_rng(int(data_seed))
    opt_cfg = OptimConfig(lr=lr, beta1=0.5)
    gen_opt = make_optimizer(params.G.named_parameters() + params.F.named_parameters(), opt_cfg)
    disc_params = params.D_target.named_parameters() + params.D_source.named_parameters()
    disc_opt = make_optimizer(disc_params, OptimConfig(lr=lr if disc_lr is None else disc_lr, beta1=0.5))
    src = image_to_tensor_data(source)
    tgt = image_to_tensor_data(target)
    steps = -(-len(src) // batch_size)
    history: list[EpochLosses] = []
    t_order: list[int] = []

    for epoch in range(epochs):
        s_order = list(rng.permutation(len(src)))
        sums = np.zeros(4)
        for step in range(steps):
            s_idx = s_order[step * batch_size:(step + 1) * batch_size]
            t_idx = []
            while len(t_idx) < len(s_idx):
                if not t_order:
                    t_order = list(rng.permutation(len(tgt)))
                t_idx.append(t_order.pop())
            z, x = Tensor(src[s_idx]), Tensor(tgt[t_idx])

            fake_t = params.G(z)
            fake_s = params.F(x)
            adv = ops.add(adv_loss(params.D_target(fake_t)), adv_loss(params.D_source(fake_s)))
            cyc = cycle_loss(z, params.F(fake_t), x, params.G(fake_s))
            fm = ops.add(feature_match_loss(extractor, x, fake_t),
                         feature_match_loss(extractor, z, fake_s))
            loss_g = combined_objective(weights, adv, cyc, fm)

            d_loss = ops.add(
                adversarial_loss_discriminator(params.D_target(x), params.D_target(fake_t.detach())),
                adversarial_loss_discriminator(params.D_source(z), params.D_source(fake_s.detach())))

            values = np.array([loss_g.item(), d_loss.item(), cyc.item(), fm.item()])
            if not np.all(np.isfinite(values)):
                raise NonFiniteError(f"non-finite translator loss in epoch {epoch}", where=epoch)
            try:
                gen_opt.zero_grad()
                backward(loss_g)
                gen_opt.step()
                disc_opt.zero_grad()
                backward(d_loss)
                disc_opt.step()
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}: {exc}", where=epoch) from exc
            sums += values
        record = EpochLosses(epoch, *(float(v) for v in sums / steps))
        history.append(record)
        log.debug("translator %s", record.to_json())
        if on_epoch is not None:
            on_epoch(record)
    params.eval()
    return params, history


def write_loss_log(path: str | Path, history: Sequence[EpochLosses]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in history))
