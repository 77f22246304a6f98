"""Datasets: IDX files, a seeded synthetic generator, augmentation, batching."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

IDX_UBYTE = 0x08
IMAGES_MAGIC_3D = 0x00000803
IMAGES_MAGIC_4D = 0x00000804
LABELS_MAGIC = 0x00000801

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed IDX payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N×C×H×W float64 in [0, 1]
    labels: np.ndarray  # N int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.images.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        h.update(str(self.class_count).encode())
        return h.hexdigest()

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.class_count)


# IDX -------------------------------------------------------------------------


def _read_idx(raw: bytes, expected_magic: tuple) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("file too short for IDX magic", len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected one of "
                          + ", ".join(f"0x{m:08x}" for m in expected_magic), 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"truncated header: need {header} bytes", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + count:
        raise FormatError(f"truncated payload: expected {count} bytes after header", len(raw))
    if len(raw) > header + count:
        raise FormatError("trailing bytes after payload", header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: PathLike, labels_path: PathLike, class_count: Optional[int] = None) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled from uint8 to [0, 1].

    3-d image files (N×H×W) load as single-channel; 4-d files are N×C×H×W.
    """
    pixels = _read_idx(Path(images_path).read_bytes(), (IMAGES_MAGIC_3D, IMAGES_MAGIC_4D))
    labels = _read_idx(Path(labels_path).read_bytes(), (LABELS_MAGIC,))
    if pixels.shape[0] != labels.shape[0]:
        raise FormatError(f"{pixels.shape[0]} images but {labels.shape[0]} labels", 4)
    if pixels.ndim == 3:
        pixels = pixels[:, None, :, :]
    if pixels.shape[0] == 0:
        raise FormatError("IDX files contain no samples", 4)
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1
    return Dataset(pixels.astype(np.float64) / 255.0, labels, class_count)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write ``dataset`` as IDX; pixels are quantized to uint8."""
    n, c, h, w = dataset.images.shape
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        header = struct.pack(">IIII", IMAGES_MAGIC_3D, n, h, w)
    else:
        header = struct.pack(">IIIII", IMAGES_MAGIC_4D, n, c, h, w)
    Path(images_path).write_bytes(header + pixels.tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


# synthetic -------------------------------------------------------------------

DEFAULT_NOISE = 0.25
DEFAULT_CONTRAST = 0.2


def class_templates(classes: int, channels: int, image_size: int, seed: int,
                    contrast: float = DEFAULT_CONTRAST) -> np.ndarray:
    """One smooth pattern per class built from random low-frequency cosines.

    Patterns are mirror-symmetric left to right, so the horizontal-flip
    augmentation preserves the class as it does for natural images.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
    coords = np.arange(image_size) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    templates = np.zeros((classes, channels, image_size, image_size))
    for cls in range(classes):
        for ch in range(channels):
            pattern = np.zeros((image_size, image_size))
            for fy in range(3):
                for fx in range(3):
                    amp = rng.standard_normal()
                    phase = rng.uniform(0, 2 * np.pi)
                    pattern += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
            pattern = 0.5 * (pattern + pattern[:, ::-1])
            pattern -= pattern.mean()
            pattern /= np.abs(pattern).max()
            templates[cls, ch] = 0.5 + contrast * pattern
    return templates


def gen_synthetic(
    classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    noise: float = DEFAULT_NOISE,
    channels: int = 3,
    contrast: float = DEFAULT_CONTRAST,
    template_seed: Optional[int] = None,
) -> Dataset:
    """Template-plus-Gaussian-noise classification data, clipped to [0, 1].

    ``template_seed`` (default ``seed``) fixes the class patterns so that
    train and eval splits drawn with different ``seed`` share classes.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    templates = class_templates(classes, channels, image_size,
                                seed if template_seed is None else template_seed, contrast)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A]))
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(labels.size)]
    images = templates[labels] + noise * rng.standard_normal((labels.size, channels, image_size, image_size))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), classes)


def nearest_template_accuracy(dataset: Dataset, templates: np.ndarray) -> float:
    flat = dataset.images.reshape(len(dataset), -1)
    tmpl = templates.reshape(templates.shape[0], -1)
    d2 = (flat**2).sum(1)[:, None] - 2 * flat @ tmpl.T + (tmpl**2).sum(1)[None, :]
    return float(np.mean(np.argmin(d2, axis=1) == dataset.labels))


# augmentation / batching ----------------------------------------------------------


def augment(images: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5,
            pad_fraction: float = 0.1) -> np.ndarray:
    """Random horizontal flip and zero-padded random crop, shape preserving."""
    n, _, h, w = images.shape
    out = images.copy()
    flips = rng.random(n) < flip_prob
    out[flips] = out[flips, :, :, ::-1]
    pad = int(round(pad_fraction * max(h, w)))
    if pad == 0:
        return out
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    for i, (dy, dx) in enumerate(offsets):
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, stream]))


def batches(dataset_or_size, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Yield index arrays covering a (seed, epoch)-dependent permutation."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = dataset_or_size if isinstance(dataset_or_size, int) else len(dataset_or_size)
    order = epoch_rng(seed, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]
