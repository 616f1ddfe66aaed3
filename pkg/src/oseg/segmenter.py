"""Training and inference for the refinement segmenter."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .data import IGNORE_INDEX, DatasetManifest, Chip, image_to_tensor_data, stitch_predictions, tile_image
from .optim import OptimConfig, make_optimizer
from .refine import RefineConfig, RefineNet
from .tensor import NonFiniteError, Tensor, backward, no_grad
from .weights import load_weights, save_weights

log = logging.getLogger(__name__)


def _augment(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    k = int(rng.integers(4))
    img, mask = np.rot90(img, k), np.rot90(mask, k)
    if rng.random() < 0.5:
        img, mask = img[:, ::-1], mask[:, ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


def fit_segmenter(images: Sequence[np.ndarray], masks: Sequence[np.ndarray], config: RefineConfig,
                  seed: int = 0, augment: bool = True,
                  on_step: Callable[[int, float], None] | None = None) -> tuple[RefineNet, list[float]]:
    """Train a fresh :class:`RefineNet` with softmax cross-entropy and Adam.

    Batches are drawn by reshuffling the training set every pass. The whole
    run is a deterministic function of ``seed``.
    """
    if len(images) == 0:
        raise ValueError("training split is empty")
    if len(images) != len(masks):
        raise ValueError(f"{len(images)} images but {len(masks)} masks")
    config.validate()
    init_seed, data_seed = np.random.SeedSequence(seed).generate_state(2)
    net = RefineNet(config, seed=int(init_seed))
    net.train()
    opt = make_optimizer(net.named_parameters(), OptimConfig(lr=config.lr))
    rng = np.random.default_rng(int(data_seed))
    order: list[int] = []
    losses: list[float] = []
    for step in range(config.steps):
        batch_idx = []
        while len(batch_idx) < config.batch_size:
            if not order:
                order = list(rng.permutation(len(images)))
            batch_idx.append(order.pop())
        pairs = [(images[i], masks[i]) for i in batch_idx]
        if augment:
            pairs = [_augment(im, m, rng) for im, m in pairs]
        x = Tensor(image_to_tensor_data([p[0] for p in pairs]))
        y = np.stack([p[1] for p in pairs]).astype(np.int64)
        loss = ops.softmax_cross_entropy(net(x), y, IGNORE_INDEX)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"non-finite loss at step {step}", where=step)
        opt.zero_grad()
        backward(loss)
        opt.step()
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
    net.eval()
    return net, losses


def train_segmenter(manifest: DatasetManifest, config: RefineConfig, seed: int = 0,
                    **kwargs) -> tuple[RefineNet, list[float]]:
    pairs = [manifest.load_pair(it) for it in manifest.split("train")]
    if config.num_classes != manifest.num_classes:
        raise ValueError(f"config has {config.num_classes} classes, manifest {manifest.num_classes}")
    return fit_segmenter([p[0] for p in pairs], [p[1] for p in pairs], config, seed, **kwargs)


def predict_logits(images: Sequence[np.ndarray], net: RefineNet) -> np.ndarray:
    """(N, K, H, W) logits with batch norm in inference mode."""
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            return net(Tensor(image_to_tensor_data(images))).data
    finally:
        net.train(was_training)


def predict(image: np.ndarray, net: RefineNet) -> np.ndarray:
    """Per-pixel argmax class mask; ties go to the lowest class index."""
    return np.argmax(predict_logits([image], net)[0], axis=0).astype(np.uint8)


def predict_batch(images: Sequence[np.ndarray], net: RefineNet, batch_size: int = 4) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch_size):
        logits = predict_logits(images[i:i + batch_size], net)
        out.extend(np.argmax(logits, axis=1).astype(np.uint8))
    return out


def segment_large(image: np.ndarray, net: RefineNet, chip_size: int = 64, overlap: int = 0) -> np.ndarray:
    """Chip an arbitrary-size image, predict each chip, stitch logits, argmax."""
    h, w = image.shape[:2]
    chips = tile_image(image, chip_size, overlap)
    logit_chips = []
    for i in range(0, len(chips), 4):
        group = chips[i:i + 4]
        logits = predict_logits([c.pixels for c in group], net)
        logit_chips.extend(Chip(lg, c.origin, c.size) for lg, c in zip(logits, group))
    full = stitch_predictions(logit_chips, (h, w))
    return np.argmax(full, axis=0).astype(np.uint8)


def save_segmenter(path: str | Path, net: RefineNet) -> None:
    save_weights(path, net.state_dict())
    Path(str(path) + ".json").write_text(json.dumps(net.config.to_dict(), sort_keys=True, indent=2) + "\n")


def load_segmenter(path: str | Path) -> RefineNet:
    config = RefineConfig.from_dict(json.loads(Path(str(path) + ".json").read_text()))
    net = RefineNet(config, seed=0)
    net.load_state_dict(load_weights(path))
    net.eval()
    return net
