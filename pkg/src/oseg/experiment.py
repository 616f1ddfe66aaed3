"""With/without sensor-adaptation comparison on simulated target sensors.

For each sensor the segmenter trained on source imagery is scored on
sensor-simulated test imagery (no adaptation). With adaptation, a
translator is trained on unpaired source and target chips and then either

* ``forward``: source training images are translated towards the target
  sensor and a segmenter is retrained on them, or
* ``backward``: target test images are translated back to the source
  style and scored with the source segmenter.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .adapt import Direction, GanLossWeights, TranslatorConfig, train_translator, translate
from .data import DatasetManifest, tile_image
from .metrics import accumulate_confusion, building_count_report, evaluation_report
from .refine import RefineConfig
from .segmenter import fit_segmenter, predict_batch
from .sensors import SensorModel, apply_sensor
from .synthetic import BUILDING, make_scenes

log = logging.getLogger(__name__)


@dataclass
class SAExperimentConfig:
    seed: int = 0
    sensors: tuple[str, ...] = ("grayscale", "brg1", "brg2")
    mode: str = "forward"  # "forward" | "backward"
    binary: bool = True  # building vs everything else
    train_scenes: int = 16
    target_scenes: int = 16
    test_scenes: int = 8
    scene_size: int = 64
    seg_filters: int = 16
    seg_steps: int = 300
    seg_lr: float = 1e-3
    translator_filters: int = 16
    translator_epochs: int = 10
    translator_chip: int = 32
    translator_lr: float = 2e-4
    adversarial: str = "saturating"
    identity_init: bool = False
    alpha: float = 1.0
    lam: float = 10.0
    beta: float = 0.9

    def validate(self) -> None:
        if self.mode not in ("forward", "backward"):
            raise ValueError(f"mode must be 'forward' or 'backward', got {self.mode!r}")
        for s in self.sensors:
            SensorModel(s)
        if min(self.train_scenes, self.target_scenes, self.test_scenes) < 1:
            raise ValueError("every scene set needs at least one scene")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sensors"] = list(self.sensors)
        return d


@dataclass
class SAData:
    train: list[tuple[np.ndarray, np.ndarray]]
    target_pool: list[np.ndarray]  # unlabelled images, before sensor simulation
    test: list[tuple[np.ndarray, np.ndarray]]
    class_names: list[str] = field(default_factory=list)


def synthetic_data(config: SAExperimentConfig) -> SAData:
    """Three disjoint synthetic scene sets drawn from the experiment seed."""
    s_train, s_target, s_test = (int(v) for v in np.random.SeedSequence([config.seed, 7]).generate_state(3))
    size = config.scene_size
    return SAData(make_scenes(s_train, config.train_scenes, size),
                  [im for im, _ in make_scenes(s_target, config.target_scenes, size)],
                  make_scenes(s_test, config.test_scenes, size))


def manifest_data(manifest: DatasetManifest) -> SAData:
    """Train split as labelled source; test split as both target pool (labels unused) and test set."""
    train = [manifest.load_pair(it) for it in manifest.split("train")]
    test = [manifest.load_pair(it) for it in manifest.split("test")]
    names = [c.name for c in sorted(manifest.classes, key=lambda c: c.index)]
    return SAData(train, [im for im, _ in test], test, names)


def _labels(mask: np.ndarray, binary: bool) -> np.ndarray:
    if not binary:
        return mask
    out = (mask == BUILDING).astype(np.uint8)
    out[mask == 255] = 255
    return out


def _chips(images: Sequence[np.ndarray], size: int) -> list[np.ndarray]:
    return [c.pixels for im in images for c in tile_image(im, size)]


def _score(net, images, masks, k: int, names: list[str], building_class: int) -> dict:
    preds = predict_batch(images, net)
    cm = None
    pred_count = truth_count = 0
    for p, m in zip(preds, masks):
        part = accumulate_confusion(p, m, k)
        cm = part if cm is None else cm + part
        counts = building_count_report(p, m, building_class=building_class)
        pred_count += counts["pred_count"]
        truth_count += counts["truth_count"]
    report = evaluation_report(cm, names)
    return {"miou": report["miou"], "f1": report["macro_f1"],
            "building_counts": {"pred": pred_count, "truth": truth_count},
            "difference": pred_count - truth_count}


def run_sa_experiment(config: SAExperimentConfig, data: SAData | None = None) -> dict:
    """Return ``{"config": ..., "rows": [...]}`` with one row per sensor and adaptation setting."""
    config.validate()
    data = data or synthetic_data(config)
    k = 2 if config.binary else 6
    if data.class_names and not config.binary:
        k = len(data.class_names)
    names = ["other", "building"] if config.binary else (data.class_names or
                                                         ["clutter", "building", "road", "vehicle",
                                                          "low_vegetation", "high_vegetation"])
    building_class = 1 if config.binary else BUILDING
    seg_seed, tr_seed = (int(v) for v in np.random.SeedSequence([config.seed, 11]).generate_state(2))
    seg_cfg = RefineConfig(filters=config.seg_filters, steps=config.seg_steps, lr=config.seg_lr,
                           num_classes=k, fuse_skips=True)
    train_imgs = [im for im, _ in data.train]
    train_masks = [_labels(m, config.binary) for _, m in data.train]
    test_masks = [_labels(m, config.binary) for _, m in data.test]

    log.info("training source segmenter")
    source_net, _ = fit_segmenter(train_imgs, train_masks, seg_cfg, seed=seg_seed)
    weights = GanLossWeights(config.alpha, config.lam, config.beta)
    tr_cfg = TranslatorConfig(config.translator_filters, config.identity_init)

    rows = []
    for sensor in config.sensors:
        target_test = [apply_sensor(im, sensor) for im, _ in data.test]
        rows.append({"sensor": sensor, "adaptation": False,
                     **_score(source_net, target_test, test_masks, k, names, building_class)})

        log.info("training translator for %s", sensor)
        target_pool = [apply_sensor(im, sensor) for im in data.target_pool]
        params, _ = train_translator(_chips(train_imgs, config.translator_chip),
                                     _chips(target_pool, config.translator_chip),
                                     weights, config.translator_epochs, tr_seed, tr_cfg,
                                     lr=config.translator_lr, adversarial=config.adversarial)
        if config.mode == "forward":
            adapted = [translate(im, params, Direction.SOURCE_TO_TARGET) for im in train_imgs]
            net, _ = fit_segmenter(adapted, train_masks, seg_cfg, seed=seg_seed)
            scored = _score(net, target_test, test_masks, k, names, building_class)
        else:
            back = [translate(im, params, Direction.TARGET_TO_SOURCE) for im in target_test]
            scored = _score(source_net, back, test_masks, k, names, building_class)
        rows.append({"sensor": sensor, "adaptation": True, **scored})
    return {"config": config.to_dict(), "rows": rows}
