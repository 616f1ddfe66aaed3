"""Procedural overhead scenes with exact ground-truth masks.

Layers are painted in a fixed order (clutter, low vegetation, high
vegetation, roads, buildings, vehicles) and every paint writes the same
pixels into the image and the mask, so the mask is exact by construction.
Buildings never touch roads or each other (not even diagonally), so the
building component count equals the number placed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import DatasetManifest, ManifestItem, default_classes, save_image, save_mask

CLUTTER, BUILDING, ROAD, VEHICLE, LOW_VEG, HIGH_VEG = range(6)

_BASE_COLORS = {
    CLUTTER: (168, 150, 118),
    LOW_VEG: (132, 178, 92),
    HIGH_VEG: (44, 92, 46),
    ROAD: (108, 108, 112),
    BUILDING: (186, 84, 64),
}
_VEHICLE_COLORS = [(236, 236, 240), (40, 70, 200), (230, 200, 40)]


@dataclass
class SceneSpec:
    seed: int = 0
    size: int = 64
    buildings: int = 3
    vehicles: int = 3
    road_width: int = 6
    vegetation: float = 0.2  # target fraction of the scene under vegetation
    noise: float = 6.0  # std of per-pixel Gaussian noise, in 8-bit units

    def validate(self) -> None:
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"scene size must be a positive multiple of 16, got {self.size}")
        if self.buildings < 0 or self.vehicles < 0 or self.road_width < 0:
            raise ValueError("object counts and road width must be >= 0")
        if not 0.0 <= self.vegetation <= 1.0 or self.noise < 0:
            raise ValueError("vegetation must lie in [0, 1] and noise be >= 0")


def _paint(img, mask, region, cls, color, rng, jitter=10.0):
    shade = np.asarray(color, dtype=np.float64) + rng.normal(0.0, jitter, size=3)
    img[region] = shade
    mask[region] = cls


def _blob(rng, size, cy, cx, radius, lobes=4):
    yy, xx = np.mgrid[:size, :size]
    region = np.zeros((size, size), dtype=bool)
    for _ in range(lobes):
        oy, ox = rng.normal(0.0, radius * 0.6, size=2)
        r = radius * rng.uniform(0.5, 1.0)
        region |= (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= r * r
    return region


def _dilate(region: np.ndarray) -> np.ndarray:
    out = region.copy()
    out[1:, :] |= region[:-1, :]
    out[:-1, :] |= region[1:, :]
    grown = out.copy()
    grown[:, 1:] |= out[:, :-1]
    grown[:, :-1] |= out[:, 1:]
    return grown


def generate_synthetic_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return an (H, W, 3) uint8 image and its (H, W) uint8 class mask."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    img = np.empty((s, s, 3), dtype=np.float64)
    mask = np.zeros((s, s), dtype=np.uint8)

    # clutter: soil with low-frequency brightness variation
    img[...] = _BASE_COLORS[CLUTTER]
    coarse = rng.normal(0.0, 8.0, size=(s // 16 + 1, s // 16 + 1))
    img += np.kron(coarse, np.ones((16, 16)))[:s, :s, None]

    veg_budget = spec.vegetation * s * s
    covered = 0
    attempts = 0
    while covered < veg_budget and attempts < 50:
        attempts += 1
        cls = LOW_VEG if rng.random() < 0.5 else HIGH_VEG
        cy, cx = rng.uniform(0, s, size=2)
        region = _blob(rng, s, cy, cx, radius=rng.uniform(s / 16, s / 7))
        _paint(img, mask, region, cls, _BASE_COLORS[cls], rng)
        covered = int(np.isin(mask, (LOW_VEG, HIGH_VEG)).sum())
    if spec.vegetation > 0:
        speckle = (mask == HIGH_VEG) & (rng.random((s, s)) < 0.3)
        img[speckle] -= 18.0

    road = np.zeros((s, s), dtype=bool)
    if spec.road_width > 0:
        for axis in rng.permutation(2)[: rng.integers(1, 3)]:
            pos = int(rng.integers(s // 8, s - s // 8 - spec.road_width))
            if axis == 0:
                road[pos:pos + spec.road_width, :] = True
            else:
                road[:, pos:pos + spec.road_width] = True
        _paint(img, mask, road, ROAD, _BASE_COLORS[ROAD], rng, jitter=4.0)

    blocked = _dilate(road)
    placed = 0
    for _ in range(400):
        if placed >= spec.buildings:
            break
        bh, bw = rng.integers(s // 8, s // 3, size=2)
        y, x = rng.integers(1, s - bh), rng.integers(1, s - bw)
        region = np.zeros((s, s), dtype=bool)
        region[y:y + bh, x:x + bw] = True
        if (region & blocked).any():
            continue
        _paint(img, mask, region, BUILDING, _BASE_COLORS[BUILDING], rng, jitter=14.0)
        # roof ridge
        if bw >= bh:
            img[y + bh // 2, x:x + bw] -= 25.0
        else:
            img[y:y + bh, x + bw // 2] -= 25.0
        blocked |= _dilate(_dilate(region))
        placed += 1

    if road.any():
        ys, xs = np.nonzero(road)
        for _ in range(spec.vehicles):
            for _ in range(50):
                i = rng.integers(len(ys))
                vh, vw = (3, 5) if rng.random() < 0.5 else (5, 3)
                y, x = ys[i], xs[i]
                region = np.zeros((s, s), dtype=bool)
                region[y:y + vh, x:x + vw] = True
                if region.sum() == vh * vw and not (region & ~road).any() \
                        and not (mask[region] == VEHICLE).any():
                    color = _VEHICLE_COLORS[rng.integers(len(_VEHICLE_COLORS))]
                    _paint(img, mask, region, VEHICLE, color, rng, jitter=6.0)
                    break

    if spec.noise > 0:
        img += rng.normal(0.0, spec.noise, size=img.shape)
    return np.floor(np.clip(img, 0, 255) + 0.5).astype(np.uint8), mask


def generate_dataset(out_dir: str | Path, seed: int, count: int, size: int = 64,
                     test_count: int = 0, **spec_kwargs) -> DatasetManifest:
    """Write ``count`` train and ``test_count`` test scenes plus ``manifest.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    items = []
    for i in range(count + test_count):
        spec = SceneSpec(seed=scene_seed(seed, i), size=size, **spec_kwargs)
        img, mask = generate_synthetic_scene(spec)
        name = f"scene_{i:04d}.png"
        save_image(out / "images" / name, img)
        save_mask(out / "masks" / name, mask)
        items.append(ManifestItem(f"images/{name}", f"masks/{name}", "train" if i < count else "test"))
    manifest = DatasetManifest(default_classes(), items, 1, out)
    manifest.save(out / "manifest.json")
    (out / "scene_spec.json").write_text(
        json.dumps(asdict(SceneSpec(seed=seed, size=size, **spec_kwargs)), sort_keys=True, indent=2) + "\n")
    return manifest


def scene_seed(seed: int, index: int) -> int:
    """Per-scene seed derived from a dataset seed; stable across platforms."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_scenes(seed: int, count: int, size: int = 64, offset: int = 0, **spec_kwargs):
    """In-memory list of (image, mask) pairs."""
    return [generate_synthetic_scene(SceneSpec(seed=scene_seed(seed, offset + i), size=size, **spec_kwargs))
            for i in range(count)]
