"""Trimap handling: one-hot encoding, token-level region maps, trimap
synthesis from alpha and the compositing equation.

Pixel file encoding follows the de-facto matting standard: 0 = background,
128 = unknown, 255 = foreground in 8-bit grayscale.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from PIL import Image
from scipy import ndimage

from .tensor import ShapeError


class Region(IntEnum):
    BG = 0
    UK = 1
    FG = 2


@dataclass
class Trimap:
    labels: np.ndarray  # [H,W] uint8 of Region values

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]


@dataclass
class RegionMap:
    labels: np.ndarray  # [rows,cols] uint8 of Region values

    @property
    def rows(self):
        return self.labels.shape[0]

    @property
    def cols(self):
        return self.labels.shape[1]


@dataclass
class AlphaMatte:
    values: np.ndarray  # [H,W] float in [0,1]

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class RgbImage:
    planes: np.ndarray  # [3,H,W] float in [0,1]

    def __post_init__(self):
        if self.planes.shape[0] != 3:
            raise ShapeError(
                f"RgbImage needs 3 channel planes, got {self.planes.shape}")

    @property
    def height(self):
        return self.planes.shape[1]

    @property
    def width(self):
        return self.planes.shape[2]


def one_hot_trimap(t: Trimap) -> np.ndarray:
    """Trimap as 3 planes in channel order (BG, UK, FG)."""
    h, w = t.labels.shape
    out = np.zeros((3, h, w), dtype=np.float32)
    for c in (Region.BG, Region.UK, Region.FG):
        out[int(c)] = t.labels == c
    return out


def region_downsample(t: Trimap, factor: int) -> RegionMap:
    """Label each factor x factor footprint by its dominant region.

    Ties break UK > FG > BG so uncertain patches stay uncertain.
    """
    h, w = t.labels.shape
    if h % factor or w % factor:
        raise ShapeError(
            f"trimap {h}x{w} not divisible by downsample factor {factor}")
    blocks = t.labels.reshape(h // factor, factor, w // factor, factor)
    counts = np.stack([(blocks == c).sum(axis=(1, 3))
                       for c in (Region.UK, Region.FG, Region.BG)])
    priority = np.array([Region.UK, Region.FG, Region.BG], dtype=np.uint8)
    winner = priority[np.argmax(counts, axis=0)]
    return RegionMap(winner)


def trimap_from_alpha(a: AlphaMatte, lo=0.0, hi=1.0,
                      dilate_radius=0) -> Trimap:
    """Threshold alpha into three regions, then widen the unknown band.

    The unknown band is the thresholded in-between pixels dilated by
    `dilate_radius` (square structuring element), plus the band of pixels
    within `dilate_radius` of both the FG and BG regions, which covers
    binary alphas whose boundary has zero width.
    """
    if not (0.0 <= lo < hi <= 1.0):
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    alpha = a.values
    bg = alpha <= lo
    fg = alpha >= hi
    uk = ~bg & ~fg
    if dilate_radius > 0:
        footprint = np.ones((2 * dilate_radius + 1,) * 2, dtype=bool)
        uk = (ndimage.binary_dilation(uk, footprint)
              | (ndimage.binary_dilation(fg, footprint)
                 & ndimage.binary_dilation(bg, footprint)))
    labels = np.full(alpha.shape, Region.BG, dtype=np.uint8)
    labels[fg] = Region.FG
    labels[uk] = Region.UK
    return Trimap(labels)


def composite(f: RgbImage, b: RgbImage, a: AlphaMatte) -> RgbImage:
    """I = alpha * F + (1 - alpha) * B, per pixel per channel."""
    if f.planes.shape != b.planes.shape or \
            f.planes.shape[1:] != a.values.shape:
        raise ShapeError(
            f"composite size mismatch: F {f.planes.shape}, "
            f"B {b.planes.shape}, alpha {a.values.shape}")
    alpha = a.values[None]
    return RgbImage(alpha * f.planes + (1.0 - alpha) * b.planes)


# -- 8-bit PNG I/O -----------------------------------------------------------

_TRIMAP_VALUES = np.array([0, 128, 255], dtype=np.uint8)


def read_image(path) -> RgbImage:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return RgbImage(arr.transpose(2, 0, 1))


def write_image(img: RgbImage, path):
    arr = np.clip(img.planes * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)


def read_alpha(path) -> AlphaMatte:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    return AlphaMatte(arr)


def write_alpha(a: AlphaMatte, path):
    arr = np.clip(a.values * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_trimap(path) -> Trimap:
    arr = np.asarray(Image.open(path).convert("L"))
    labels = np.full(arr.shape, Region.UK, dtype=np.uint8)
    labels[arr < 64] = Region.BG
    labels[arr >= 192] = Region.FG
    return Trimap(labels)


def write_trimap(t: Trimap, path):
    Image.fromarray(_TRIMAP_VALUES[t.labels]).save(path)
