"""Two-scale retina: a fine g x g crop plus a 2g x 2g context crop average-pooled to g x g."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, DimensionError


@dataclass(frozen=True)
class GlimpseConfig:
    g: int = 12
    scale: int = 2
    pad_value: float = 0.0

    def __post_init__(self):
        if self.g < 2:
            raise ConfigError(f"glimpse size must be >= 2, got {self.g}")
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")


@dataclass(frozen=True)
class Location:
    x: float
    y: float

    def clamped(self) -> "Location":
        return Location(min(max(self.x, -1.0), 1.0), min(max(self.y, -1.0), 1.0))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass
class Glimpse:
    fine: np.ndarray  # [1, g, g]
    coarse: np.ndarray  # [1, g, g]
    center: Location


def loc_to_pixel(loc, side: int) -> tuple[float, float]:
    """Map normalized (x, y) to (row, col); (-1,-1) and (1,1) are the corner pixel centers."""
    x, y = (loc.x, loc.y) if isinstance(loc, Location) else loc
    half = (side - 1) / 2.0
    return (y + 1.0) * half, (x + 1.0) * half


def pixel_to_loc(row: float, col: float, side: int) -> Location:
    half = (side - 1) / 2.0
    return Location(col / half - 1.0, row / half - 1.0)


def anchor_pixels(locs: np.ndarray, side: int) -> np.ndarray:
    """Integer (row, col) window centers for locations [..., 2], rounding half up."""
    locs = np.clip(np.asarray(locs, dtype=np.float64), -1.0, 1.0)
    half = (side - 1) / 2.0
    rows = np.floor((locs[..., 1] + 1.0) * half + 0.5)
    cols = np.floor((locs[..., 0] + 1.0) * half + 0.5)
    return np.stack([rows, cols], axis=-1).astype(np.int64)


def _check_images(images: np.ndarray, cfg: GlimpseConfig) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise DimensionError(f"expected single-channel images, got {images.shape}")
        images = images[:, 0]
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise DimensionError(f"expected square grayscale images [B,S,S], got {images.shape}")
    if images.shape[1] < cfg.g * cfg.scale:
        raise DimensionError(f"image side {images.shape[1]} smaller than context window {cfg.g * cfg.scale}")
    return images


def _crop(padded: np.ndarray, starts: np.ndarray, size: int) -> np.ndarray:
    offs = np.arange(size)
    rows = starts[:, 0, None] + offs  # [B, size]
    cols = starts[:, 1, None] + offs
    b = np.arange(padded.shape[0])[:, None, None]
    return padded[b, rows[:, :, None], cols[:, None, :]]


def _pool(window: np.ndarray, s: int) -> np.ndarray:
    # fixed row-major accumulation order, then one division
    acc = window[:, 0::s, 0::s].copy()
    for di in range(s):
        for dj in range(s):
            if di == 0 and dj == 0:
                continue
            acc = acc + window[:, di::s, dj::s]
    return acc / float(s * s)


def extract_batch(images: np.ndarray, locs: np.ndarray, cfg: GlimpseConfig) -> tuple[np.ndarray, np.ndarray]:
    """Glimpses for a batch: images [B,S,S], locs [B,2] -> (fine, coarse), each [B,g,g]."""
    images = _check_images(images, cfg)
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 2)
    if locs.shape[0] != images.shape[0]:
        raise DimensionError("one location per image required")
    g, s = cfg.g, cfg.scale
    big = g * s
    margin = big // 2 + 1
    padded = np.pad(images, ((0, 0), (margin, margin), (margin, margin)), constant_values=cfg.pad_value)
    centers = anchor_pixels(locs, images.shape[1]) + margin
    fine = _crop(padded, centers - g // 2, g)
    coarse = _pool(_crop(padded, centers - big // 2, big), s)
    return fine, coarse


def extract_glimpse(image, loc: Location, cfg: GlimpseConfig) -> Glimpse:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise DimensionError(f"expected one channel, got {img.shape[0]}")
        img = img[0]
    if img.ndim != 2:
        raise DimensionError(f"expected [1,S,S] image, got {np.shape(image)}")
    loc = loc.clamped()
    fine, coarse = extract_batch(img[None], loc.as_array()[None], cfg)
    return Glimpse(fine=fine, coarse=coarse, center=loc)
