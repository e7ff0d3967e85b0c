"""Grayscale PGM I/O, block extraction/assembly and synthetic block datasets."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from .errors import DimensionError, FormatError, RangeError


@dataclass
class BlockDataset:
    """A stack of ``b x b`` blocks in [0, 1], optionally labelled."""

    b: int
    blocks: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float32).reshape(-1, self.b, self.b)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.blocks),):
                raise DimensionError(f"{len(self.labels)} labels for {len(self.blocks)} blocks")

    def __len__(self):
        return len(self.blocks)

    def subset(self, idx, split=None) -> "BlockDataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return BlockDataset(self.b, self.blocks[idx], labels, split or self.split)


@dataclass(frozen=True)
class BlockLayout:
    """Where the blocks of one image came from, for reassembly."""

    height: int
    width: int
    padded_height: int
    padded_width: int
    b: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.padded_height // self.b, self.padded_width // self.b


# ---------------------------------------------------------------- PGM


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM as float64 pixels in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {buf[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise FormatError(f"{path}: bad header field {tok!r}") from exc
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad size {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (8-bit only)")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError(f"{path}: missing whitespace after header")
    pos += 1
    payload = buf[pos:pos + width * height]
    if len(payload) < width * height:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / maxval


def to_bytes(image) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_pgm(image, path):
    """Write pixels in [0, 1] as an 8-bit P5 PGM."""
    pixels = to_bytes(image)
    if pixels.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D image, got {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_pgm_dir(directory) -> list[np.ndarray]:
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(".pgm"))
    return [load_pgm(os.path.join(directory, f)) for f in names]


# ---------------------------------------------------------------- blocks


def _reflect_pad(image, ph, pw):
    # numpy's reflect is undefined on a length-1 axis
    mode_h = "reflect" if image.shape[0] > 1 else "edge"
    mode_w = "reflect" if image.shape[1] > 1 else "edge"
    out = np.pad(image, ((0, ph), (0, 0)), mode=mode_h)
    return np.pad(out, ((0, 0), (0, pw)), mode=mode_w)


def extract_blocks(image, b: int, stride: int | None = None) -> tuple[BlockDataset, BlockLayout]:
    """Cut an image into ``b x b`` blocks in row-major order.

    The image is reflect-padded up to a multiple of ``b``. A ``stride``
    smaller than ``b`` gives overlapping blocks (training only; such blocks
    cannot be reassembled).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 1:
        raise DimensionError(f"expected a non-empty 2-D image, got {image.shape}")
    if b < 1:
        raise RangeError(f"block side must be >= 1, got {b}")
    stride = stride or b
    h, w = image.shape
    padded = _reflect_pad(image, (-h) % b, (-w) % b)
    ph, pw = padded.shape
    blocks = [padded[i:i + b, j:j + b] for i in range(0, ph - b + 1, stride) for j in range(0, pw - b + 1, stride)]
    ds = BlockDataset(b, np.stack(blocks))
    return ds, BlockLayout(h, w, ph, pw, b)


def assemble_image(blocks, layout: BlockLayout) -> np.ndarray:
    """Inverse of :func:`extract_blocks` with the default stride; crops the padding."""
    blocks = np.asarray(blocks)
    rows, cols = layout.grid
    b = layout.b
    if blocks.shape != (rows * cols, b, b):
        raise DimensionError(f"expected {(rows * cols, b, b)} blocks, got {blocks.shape}")
    full = blocks.reshape(rows, cols, b, b).transpose(0, 2, 1, 3).reshape(rows * b, cols * b)
    return full[: layout.height, : layout.width]


# ---------------------------------------------------------------- synthetic data

SHAPE_CLASSES = ("horizontal-bar", "vertical-bar", "disc", "ring")


def _dct_lowpass_block(rng, b):
    band = max(1, b // 4)
    i, j = np.meshgrid(np.arange(b), np.arange(b), indexing="ij")
    coef = rng.standard_normal((b, b)) * 0.01  # faint broadband texture
    low = rng.standard_normal((band, band)) / (1.0 + i[:band, :band] + j[:band, :band])
    coef[:band, :band] = low
    coef[0, 0] = 0.0
    z = idctn(coef, norm="ortho")
    span = z.max() - z.min()
    z = (z - z.min()) / span if span > 0 else np.zeros_like(z)
    contrast = rng.uniform(0.3, 0.9)
    offset = rng.uniform(0.0, 1.0 - contrast)
    return offset + contrast * z


def _shape_block(rng, b, label):
    yy, xx = np.mgrid[0:b, 0:b] + 0.5
    bg = rng.uniform(0.0, 0.3)
    fg = rng.uniform(0.6, 1.0)
    if label in (0, 1):
        long_side = rng.uniform(0.5 * b, 0.85 * b)
        short_side = rng.uniform(0.12 * b, 0.25 * b)
        hh, ww = (short_side, long_side) if label == 0 else (long_side, short_side)
        cy = rng.uniform(hh / 2, b - hh / 2)
        cx = rng.uniform(ww / 2, b - ww / 2)
        mask = (np.abs(yy - cy) <= hh / 2) & (np.abs(xx - cx) <= ww / 2)
    else:
        radius = rng.uniform(0.22 * b, 0.4 * b)
        cy, cx = rng.uniform(radius, b - radius, size=2)
        dist = np.hypot(yy - cy, xx - cx)
        mask = dist <= radius
        if label == 3:
            mask &= dist >= radius - rng.uniform(0.08 * b, 0.13 * b)
    img = np.where(mask, fg, bg) + rng.normal(0.0, 0.05, size=(b, b))
    return np.clip(img, 0.0, 1.0)


def synth_dataset(kind: str, count: int, b: int, seed=None) -> BlockDataset:
    """Deterministic synthetic blocks.

    ``dct-lowpass``: smooth random textures whose energy sits in the lowest
    ``b/4 x b/4`` DCT frequencies. ``shapes``: bars, discs and rings with
    labels 0..3 (see ``SHAPE_CLASSES``).
    """
    rng = np.random.default_rng(seed)
    if kind == "dct-lowpass":
        blocks = [_dct_lowpass_block(rng, b) for _ in range(count)]
        labels = None
    elif kind == "shapes":
        labels = rng.integers(0, len(SHAPE_CLASSES), size=count)
        blocks = [_shape_block(rng, b, int(c)) for c in labels]
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    arr = np.stack(blocks) if count else np.zeros((0, b, b))
    return BlockDataset(b, arr, labels)


def lowpass_energy_fraction(block) -> float:
    """Share of DCT energy in the lowest ``b/4 x b/4`` frequencies."""
    c = dctn(np.asarray(block, dtype=np.float64), norm="ortho")
    band = max(1, c.shape[0] // 4)
    total = float(np.sum(c * c))
    return float(np.sum(c[:band, :band] ** 2)) / total if total > 0 else 1.0


def split(dataset: BlockDataset, fractions=(0.8, 0.1, 0.1), seed=None):
    """Seeded shuffle into train/val/test; sizes are floor, floor, remainder."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(fractions[0] * n))
    n_val = int(np.floor(fractions[1] * n))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(dataset.subset(idx, tag) for idx, tag in zip(parts, ("train", "val", "test")))
