"""Synthetic chest-radiograph proxy tasks and a PGM-based dataset format.

Two binary tasks stand in for the clinical ones:

* ``cardio``: a thorax ellipse containing a brighter heart ellipse; the image
  is abnormal when heart width / thorax width exceeds ``ctr_threshold``.
* ``device``: thorax plus clutter blobs; half the images carry a small, very
  bright rounded-rectangle implant inside an upper-chest band.

On-disk layout of a dataset directory::

    index.csv          header "filename,label,meta_x,meta_y", one row per image;
                       meta_x/meta_y are the target center (column, row) in
                       pixels, or empty when there is no target
    img_00000.pgm ...  binary graymap: b"P5\\n<W> <H>\\n255\\n" then W*H bytes,
                       row-major, pixel = round(value * 255)
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ConfigError

INDEX_NAME = "index.csv"
INDEX_HEADER = ["filename", "label", "meta_x", "meta_y"]


class DatasetFormatError(ValueError):
    pass


class DatasetConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    side: int = 64
    task: str = "cardio"
    noise: float = 0.03
    clutter: int = 3
    ctr_threshold: float = 0.5
    # ratio is drawn from threshold +/- [ctr_margin, ctr_margin + ctr_spread]
    ctr_margin: float = 0.03
    ctr_spread: float = 0.2
    # thorax width as a fraction of the side; a wide range keeps heart width alone from deciding the label
    thorax_width: tuple[float, float] = (0.58, 0.94)
    # implant band as fractions of the side: rows, then columns
    band_rows: tuple[float, float] = (0.08, 0.35)
    band_cols: tuple[float, float] = (0.25, 0.75)
    decoys: int = 0
    implant_half: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("cardio", "device"):
            raise ConfigError(f"unknown task {self.task!r}")
        if not 0.0 < self.ctr_threshold < 1.0:
            raise ConfigError("ctr_threshold must lie in (0, 1)")
        if self.side < 16:
            raise ConfigError("image side too small")
        if self.noise < 0 or self.clutter < 0:
            raise ConfigError("noise and clutter must be non-negative")


@dataclass
class LabeledImage:
    image: np.ndarray  # [1, S, S] in [0, 1]
    label: int
    meta: tuple[float, float] | None = None  # (x=col, y=row) pixels

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


BACKGROUND = 0.05
THORAX = 0.32
HEART = 0.62
CLUTTER_MAX = 0.55
IMPLANT = 0.97
DECOY = 0.6


def _grid(side: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:side, 0:side].astype(np.float64)


def _ellipse(rows, cols, cy, cx, ry, rx) -> np.ndarray:
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _thorax(side: int, rng: np.random.Generator, widths: tuple[float, float]):
    rows, cols = _grid(side)
    width = side * rng.uniform(*widths)
    cy = side * 0.5 + rng.uniform(-1.5, 1.5)
    cx = (side - 1) / 2.0 + rng.uniform(-1.5, 1.5)
    img = np.full((side, side), BACKGROUND)
    img[_ellipse(rows, cols, cy, cx, side * 0.44, width / 2.0)] = THORAX
    return img, rows, cols, width, cx, cy


def _finish(img: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    if noise > 0:
        img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def render_cardio(side: int, thorax_width: float, ratio: float, heart_cx: float, heart_cy: float,
                  thorax_cx: float | None = None, thorax_cy: float | None = None) -> np.ndarray:
    """Noise-free cardio image with explicit geometry (used by tests and the generator)."""
    rows, cols = _grid(side)
    tcx = (side - 1) / 2.0 if thorax_cx is None else thorax_cx
    tcy = side * 0.5 if thorax_cy is None else thorax_cy
    img = np.full((side, side), BACKGROUND)
    img[_ellipse(rows, cols, tcy, tcx, side * 0.44, thorax_width / 2.0)] = THORAX
    heart_w = ratio * thorax_width
    img[_ellipse(rows, cols, heart_cy, heart_cx, 0.36 * heart_w, heart_w / 2.0)] = HEART
    return img


def gen_cardio(cfg: SynthConfig, rng: np.random.Generator, ratio: float | None = None) -> LabeledImage:
    if cfg.task != "cardio":
        raise ConfigError("gen_cardio needs task=cardio")
    s = cfg.side
    _, _, _, width, tcx, tcy = _thorax(s, rng, cfg.thorax_width)
    if ratio is None:
        offset = cfg.ctr_margin + cfg.ctr_spread * rng.random()
        ratio = cfg.ctr_threshold + offset if rng.random() < 0.5 else cfg.ctr_threshold - offset
    hcx = tcx + rng.uniform(-0.1, 0.1) * s
    hcy = s * 0.6 + rng.uniform(-0.06, 0.06) * s
    img = render_cardio(s, width, ratio, hcx, hcy, tcx, tcy)
    label = int(ratio > cfg.ctr_threshold)
    return LabeledImage(_finish(img, cfg.noise, rng), label, (float(hcx), float(hcy)))


def _band_point(cfg: SynthConfig, rng: np.random.Generator) -> tuple[float, float]:
    s = cfg.side
    return rng.uniform(*cfg.band_rows) * (s - 1), rng.uniform(*cfg.band_cols) * (s - 1)


def _patch_mask(rows, cols, cy, cx, half: float) -> np.ndarray:
    return (np.abs(rows - cy) <= half) & (np.abs(cols - cx) <= half)


def _rounded_mask(rows, cols, cy, cx, half: float) -> np.ndarray:
    """Square of half-width ``half`` with its four corner pixels cut off."""
    dr, dc = np.abs(rows - cy), np.abs(cols - cx)
    return (dr <= half) & (dc <= half) & ~((dr > half - 1) & (dc > half - 1))


def gen_device(cfg: SynthConfig, rng: np.random.Generator, present: bool | None = None) -> LabeledImage:
    """Thorax plus clutter blobs; positives carry a bright rounded-rectangle implant.

    Implant centers are drawn uniformly from the configured band. ``decoys``
    optional flat squares of mid intensity (below any implant pixel) are placed
    in the same band in both classes.
    """
    if cfg.task != "device":
        raise ConfigError("gen_device needs task=device")
    s = cfg.side
    img, rows, cols, *_ = _thorax(s, rng, cfg.thorax_width)
    for _ in range(cfg.clutter):
        cy, cx = rng.uniform(0.1, 0.9, size=2) * s
        radius = rng.uniform(0.03, 0.08) * s
        amp = rng.uniform(0.05, CLUTTER_MAX - THORAX)
        img = img + amp * np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * radius**2))
    img = np.minimum(img, CLUTTER_MAX)
    if present is None:
        present = bool(rng.random() < 0.5)
    half = cfg.implant_half
    for _ in range(cfg.decoys):
        cy, cx = _band_point(cfg, rng)
        img[_patch_mask(rows, cols, cy, cx, half)] = DECOY
    meta = None
    if present:
        cy, cx = _band_point(cfg, rng)
        img[_rounded_mask(rows, cols, cy, cx, half)] = IMPLANT
        meta = (float(cx), float(cy))
    return LabeledImage(_finish(img, cfg.noise, rng), int(present), meta)


def generate(cfg: SynthConfig, count: int, seed: int | None = None) -> list[LabeledImage]:
    """count samples, each from its own child stream of the seed."""
    seed = cfg.seed if seed is None else seed
    gen = gen_cardio if cfg.task == "cardio" else gen_device
    children = np.random.SeedSequence(seed).spawn(count)
    return [gen(cfg, np.random.default_rng(child)) for child in children]


def stack_images(data: list[LabeledImage]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([d.image[0] for d in data]) if data else np.zeros((0, 0, 0))
    labels = np.array([d.label for d in data], dtype=np.int64)
    return images, labels


# ------------------------------------------------------------------ resampling


def _box_weights(src: int, dst: int) -> np.ndarray:
    """[dst, src] matrix of source-pixel overlap fractions per target pixel."""
    ratio = src / dst
    w = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * ratio, (i + 1) * ratio
        first, last = int(np.floor(lo)), int(np.ceil(hi))
        for r in range(first, min(last, src)):
            w[i, r] = min(hi, r + 1) - max(lo, r)
        w[i] /= w[i].sum()
    return w


def downscale_to(image: np.ndarray, side: int) -> np.ndarray:
    """Area-average resample [1,H,W] (or [H,W]) down to [1,side,side]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    h, w = img.shape
    if side > min(h, w):
        raise ValueError(f"cannot upscale {h}x{w} to {side}")
    if (h, w) == (side, side):
        return img.copy()[None]
    out = _box_weights(h, side) @ img @ _box_weights(w, side).T
    return np.clip(out, img.min(), img.max())[None]


# ------------------------------------------------------------------------ I/O


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[0]
    q = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def _pgm_tokens(buf: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(buf)
    if magic != b"P5":
        raise DatasetFormatError(f"{path}: not a binary graymap (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise DatasetFormatError(f"{path}: only maxval 255 is supported")
    if len(buf) - offset < w * h:
        raise DatasetFormatError(f"{path}: pixel data truncated")
    raw = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset)
    return (raw.reshape(h, w).astype(np.float64) / 255.0)[None]


def _fmt(v: float) -> str:
    # shortest text that parses back to the same double
    return repr(float(v))


def dataset_save(data: list[LabeledImage], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / INDEX_NAME, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INDEX_HEADER)
        for i, item in enumerate(data):
            name = f"img_{i:05d}.pgm"
            write_pgm(directory / name, item.image)
            mx, my = ("", "") if item.meta is None else (_fmt(item.meta[0]), _fmt(item.meta[1]))
            writer.writerow([name, item.label, mx, my])


def parse_index_row(row: list[str]) -> tuple[str, int, tuple[float, float] | None]:
    if len(row) != 4:
        raise DatasetFormatError(f"index row needs 4 fields, got {row!r}")
    name, label, mx, my = row
    if (mx == "") != (my == ""):
        raise DatasetFormatError(f"half-specified meta in row {row!r}")
    try:
        meta = None if mx == "" else (float(mx), float(my))
        label = int(label)
    except ValueError:
        raise DatasetFormatError(f"unparsable index row {row!r}") from None
    if label not in (0, 1):
        raise DatasetFormatError(f"label must be 0 or 1 in row {row!r}")
    return name, label, meta


def dataset_load(directory) -> list[LabeledImage]:
    directory = Path(directory)
    index = directory / INDEX_NAME
    if not index.is_file():
        raise DatasetFormatError(f"missing {index}")
    with open(index, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != INDEX_HEADER:
        raise DatasetFormatError(f"{index}: bad header {rows[:1]!r}")
    out = []
    listed = set()
    for row in rows[1:]:
        name, label, meta = parse_index_row(row)
        path = directory / name
        if not path.is_file():
            raise DatasetConsistencyError(f"index lists {name} but the file is missing")
        listed.add(name)
        out.append(LabeledImage(read_pgm(path), label, meta))
    stray = {f for f in os.listdir(directory) if f.endswith(".pgm")} - listed
    if stray:
        raise DatasetConsistencyError(f"image files not in index: {sorted(stray)[:3]}")
    return out
