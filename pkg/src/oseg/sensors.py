"""Simulated target sensors: grayscale and two channel-swapped, decimated RGB variants.

All transforms work on (H, W, 3) uint8 arrays and are exact integer
arithmetic, so outputs are bit-identical everywhere.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

# BT.601 luma weights, in thousandths so rounding stays in integers
LUMA_WEIGHTS_MILLI = (299, 587, 114)

# output channel order after the swap: source B, R, G
BRG_ORDER = (2, 0, 1)


class SensorModel(str, enum.Enum):
    GRAYSCALE = "grayscale"
    BRG_TYPE1 = "brg1"
    BRG_TYPE2 = "brg2"


@dataclass(frozen=True)
class SensorParams:
    luma: tuple[float, float, float] = (0.299, 0.587, 0.114)
    # per-axis keep-stride for source (R, G, B)
    strides: tuple[int, int, int] = (1, 1, 1)


SENSOR_PARAMS = {
    SensorModel.GRAYSCALE: SensorParams(),
    SensorModel.BRG_TYPE1: SensorParams(strides=(2, 2, 2)),
    SensorModel.BRG_TYPE2: SensorParams(strides=(2, 4, 8)),
}


def _check(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) uint8 image, got {img.shape} {img.dtype}")
    return img


def simulate_grayscale(img: np.ndarray) -> np.ndarray:
    """round-half-up(0.299 R + 0.587 G + 0.114 B), copied into all three channels."""
    img = _check(img).astype(np.int64)
    wr, wg, wb = LUMA_WEIGHTS_MILLI
    luma = (wr * img[..., 0] + wg * img[..., 1] + wb * img[..., 2] + 500) // 1000
    return np.repeat(luma[..., None], 3, axis=2).astype(np.uint8)


def decimate_nearest(channel: np.ndarray, stride: int) -> np.ndarray:
    """Keep every ``stride``-th sample per axis (index 0 first) and block-fill back."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = channel.shape
    rows = (np.arange(h) // stride) * stride
    cols = (np.arange(w) // stride) * stride
    return channel[rows[:, None], cols[None, :]]


def _swap_and_decimate(img: np.ndarray, strides_rgb: tuple[int, int, int]) -> np.ndarray:
    img = _check(img)
    out = np.empty_like(img)
    for dst, src in enumerate(BRG_ORDER):
        out[..., dst] = decimate_nearest(img[..., src], strides_rgb[src])
    return out


def simulate_brg_type1(img: np.ndarray) -> np.ndarray:
    """RGB -> BRG, then every other sample per axis in each channel."""
    return _swap_and_decimate(img, SENSOR_PARAMS[SensorModel.BRG_TYPE1].strides)


def simulate_brg_type2(img: np.ndarray) -> np.ndarray:
    """RGB -> BRG with per-axis strides red 2, green 4, blue 8."""
    return _swap_and_decimate(img, SENSOR_PARAMS[SensorModel.BRG_TYPE2].strides)


_DISPATCH = {
    SensorModel.GRAYSCALE: simulate_grayscale,
    SensorModel.BRG_TYPE1: simulate_brg_type1,
    SensorModel.BRG_TYPE2: simulate_brg_type2,
}


def apply_sensor(img: np.ndarray, model: SensorModel | str) -> np.ndarray:
    try:
        model = SensorModel(model)
    except ValueError:
        names = ", ".join(m.value for m in SensorModel)
        raise ValueError(f"unknown sensor model {model!r}; choose one of {names}") from None
    return _DISPATCH[model](img)
