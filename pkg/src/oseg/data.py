"""Dataset manifests, PNG image/mask I/O, and chip tiling/stitching."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_INDEX = 255

# index, name, display colour
DEFAULT_PALETTE = [
    (0, "clutter", (255, 0, 0)),
    (1, "building", (0, 0, 255)),
    (2, "road", (255, 255, 255)),
    (3, "vehicle", (255, 255, 0)),
    (4, "low_vegetation", (0, 255, 255)),
    (5, "high_vegetation", (0, 255, 0)),
]


# ---------------------------------------------------------------------------
# images and masks


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode != "RGB":
                raise ValueError(f"{path}: expected an 8-bit RGB image, got mode {mode!r}")
            return np.asarray(im, dtype=np.uint8).copy()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_image(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"save_image wants (H, W, 3) uint8, got {img.shape} {img.dtype}")
    Image.fromarray(img).save(path, format="PNG")


def load_mask(path: str | Path, num_classes: int | None = None) -> np.ndarray:
    """Read a single-channel 8-bit class-index PNG; 255 marks ignored pixels."""
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected a single-channel 8-bit mask, got mode {im.mode!r}")
        mask = np.asarray(im, dtype=np.uint8).copy()
    if num_classes is not None:
        validate_mask(mask, num_classes, str(path))
    return mask


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min(initial=0) < 0 or mask.max(initial=0) > 255:
        raise ValueError(f"save_mask wants a 2-D array of values in [0, 255], got {mask.shape}")
    Image.fromarray(mask.astype(np.uint8)).save(path, format="PNG")


def validate_mask(mask: np.ndarray, num_classes: int, where: str = "mask") -> None:
    bad = (mask >= num_classes) & (mask != IGNORE_INDEX)
    if bad.any():
        vals = sorted(set(int(v) for v in np.unique(mask[bad])))
        raise ValueError(f"{where}: class values {vals} out of range for {num_classes} classes")


def image_to_tensor_data(images) -> np.ndarray:
    """Stack (H, W, 3) uint8 images into a float64 (N, 3, H, W) batch in [-1, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float64)
    return arr.transpose(0, 3, 1, 2) / 127.5 - 1.0


def tensor_data_to_image(data: np.ndarray) -> np.ndarray:
    """Inverse of :func:`image_to_tensor_data` for one (3, H, W) array; clamps and rounds."""
    vals = (np.asarray(data).transpose(1, 2, 0) + 1.0) * 127.5
    return np.floor(np.clip(vals, 0.0, 255.0) + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ClassInfo:
    name: str
    index: int
    color: tuple[int, int, int]


@dataclass(frozen=True)
class ManifestItem:
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    classes: list[ClassInfo]
    items: list[ManifestItem]
    version: int = 1
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def palette(self) -> list[tuple[int, int, int]]:
        return [c.color for c in sorted(self.classes, key=lambda c: c.index)]

    def split(self, name: str) -> list[ManifestItem]:
        items = [it for it in self.items if it.split == name]
        if not items:
            raise ValueError(f"manifest has no items in split {name!r}")
        return items

    def load_pair(self, item: ManifestItem) -> tuple[np.ndarray, np.ndarray]:
        img = load_image(self.root / item.image)
        mask = load_mask(self.root / item.mask, self.num_classes)
        if img.shape[:2] != mask.shape:
            raise ValueError(f"{item.image}: image {img.shape[:2]} and mask {mask.shape} differ")
        return img, mask

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "classes": [{"name": c.name, "index": c.index, "color": list(c.color)} for c in self.classes],
            "items": [{"image": it.image, "mask": it.mask, "split": it.split} for it in self.items],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def default_classes() -> list[ClassInfo]:
    return [ClassInfo(name, idx, color) for idx, name, color in DEFAULT_PALETTE]


def load_manifest(path: str | Path, check_masks: bool = True) -> DatasetManifest:
    path = Path(path)
    raw = json.loads(path.read_text())
    classes = [ClassInfo(c["name"], int(c["index"]), tuple(c["color"])) for c in raw["classes"]]
    if sorted(c.index for c in classes) != list(range(len(classes))):
        raise ValueError(f"{path}: class indices must be dense from 0")
    items = [ManifestItem(it["image"], it["mask"], it["split"]) for it in raw["items"]]
    for it in items:
        if it.split not in ("train", "test"):
            raise ValueError(f"{path}: unknown split {it.split!r}")
    manifest = DatasetManifest(classes, items, int(raw.get("version", 1)), path.parent)
    for it in items:
        for rel in (it.image, it.mask):
            if not (manifest.root / rel).exists():
                raise FileNotFoundError(f"{path}: missing file {rel}")
        if check_masks:
            load_mask(manifest.root / it.mask, manifest.num_classes)
    return manifest


# ---------------------------------------------------------------------------
# tiling


@dataclass
class Chip:
    pixels: np.ndarray
    origin: tuple[int, int]  # (row, col) in the padded parent
    size: int


def _axis_count(extent: int, chip: int, step: int) -> int:
    return max(1, math.ceil(max(extent - chip, 0) / step) + 1)


def tile_image(img: np.ndarray, chip_size: int, overlap: int = 0) -> list[Chip]:
    """Cut ``img`` (H, W[, C]) into square chips in row-major order.

    Chips advance by ``chip_size - overlap``; the right/bottom edges are
    reflection-padded so every chip is full size.
    """
    if chip_size <= 0 or chip_size % 16:
        raise ValueError(f"chip_size must be a positive multiple of 16, got {chip_size}")
    if not 0 <= overlap < chip_size:
        raise ValueError(f"overlap must satisfy 0 <= overlap < chip_size, got {overlap}")
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot tile an empty image")
    step = chip_size - overlap
    ny, nx = _axis_count(h, chip_size, step), _axis_count(w, chip_size, step)
    ph, pw = (ny - 1) * step + chip_size, (nx - 1) * step + chip_size
    pad = [(0, ph - h), (0, pw - w)] + [(0, 0)] * (img.ndim - 2)
    mode = "reflect" if min(h, w) > 1 else "edge"
    padded = np.pad(img, pad, mode=mode)
    chips = []
    for r in range(ny):
        for c in range(nx):
            y, x = r * step, c * step
            chips.append(Chip(padded[y:y + chip_size, x:x + chip_size].copy(), (y, x), chip_size))
    return chips


def stitch_predictions(chips: list[Chip], shape: tuple[int, int]) -> np.ndarray:
    """Average overlapping (K, s, s) logit chips into a (K, H, W) map.

    Padding beyond ``shape`` is cropped. Raises if any pixel is uncovered.
    """
    if not chips:
        raise ValueError("no chips to stitch")
    h, w = shape
    k = chips[0].pixels.shape[0]
    ext_h = max(h, max(ch.origin[0] + ch.size for ch in chips))
    ext_w = max(w, max(ch.origin[1] + ch.size for ch in chips))
    acc = np.zeros((k, ext_h, ext_w))
    hits = np.zeros((ext_h, ext_w))
    for ch in chips:
        y, x = ch.origin
        acc[:, y:y + ch.size, x:x + ch.size] += ch.pixels
        hits[y:y + ch.size, x:x + ch.size] += 1
    hits = hits[:h, :w]
    if (hits == 0).any():
        rows, cols = np.nonzero(hits == 0)
        raise ValueError(f"chips leave pixel ({rows[0]}, {cols[0]}) uncovered")
    return acc[:, :h, :w] / hits
