"""Synthetic multi-domain image generation and augmentation.

Each domain kind renders 32x32 RGB images procedurally; every sample is a
pure function of (spec seed, global sample index), so splits built from
non-overlapping index ranges are disjoint by construction and generation can
be parallelized by index without affecting the result.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import Rng

__all__ = ["DomainSpec", "Dataset", "generate_domain", "augment",
           "concat_datasets", "DOMAIN_KINDS"]

DOMAIN_KINDS = ("shapes", "textures", "glyphs", "noisy-digits")

_SAMPLE_TAG = 0x5A3C9D01
_AUG_TAG = 0x41554731

_MAX_CLASSES = {"shapes": 6, "textures": 8, "glyphs": 8, "noisy-digits": 10}

# Mirroring flips texture orientations onto other classes and breaks digit
# and stroke glyphs, so it defaults off for those kinds.
_MIRROR_DEFAULT = {"shapes": True, "textures": False, "glyphs": False,
                   "noisy-digits": False}

# 5x7 digit bitmaps for the noisy-digits domain.
_DIGITS = [
    "01110 10001 10011 10101 11001 10001 01110",
    "00100 01100 00100 00100 00100 00100 01110",
    "01110 10001 00001 00110 01000 10000 11111",
    "11110 00001 00001 01110 00001 00001 11110",
    "00010 00110 01010 10010 11111 00010 00010",
    "11111 10000 11110 00001 00001 10001 01110",
    "01110 10000 11110 10001 10001 10001 01110",
    "11111 00001 00010 00100 01000 01000 01000",
    "01110 10001 10001 01110 10001 10001 01110",
    "01110 10001 10001 01111 00001 00001 01110",
]


@dataclass
class DomainSpec:
    """Recipe for one synthetic visual domain."""

    kind: str
    classes: int
    train_count: int = 256
    val_count: int = 64
    test_count: int = 128
    noise: float = 0.08
    deformation: float = 0.5
    seed: int = 0
    mirror: Optional[bool] = None  # None: kind-dependent default
    crop: bool = True
    image_size: int = 32

    def __post_init__(self):
        if self.mirror is None and self.kind in _MIRROR_DEFAULT:
            self.mirror = _MIRROR_DEFAULT[self.kind]

    def validate(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if self.classes < 2:
            raise ValueError(f"class count must be >= 2, got {self.classes}")
        if self.classes > _MAX_CLASSES[self.kind]:
            raise ValueError(
                f"{self.kind} supports at most {_MAX_CLASSES[self.kind]} classes")
        if min(self.train_count, self.val_count, self.test_count) < 1:
            raise ValueError("all split counts must be >= 1")
        if self.image_size < 16 or self.image_size % 4:
            raise ValueError("image_size must be >= 16 and divisible by 4")
        return self

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "classes": self.classes,
            "train_count": self.train_count, "val_count": self.val_count,
            "test_count": self.test_count, "noise": self.noise,
            "deformation": self.deformation, "seed": self.seed,
            "mirror": self.mirror, "crop": self.crop,
            "image_size": self.image_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d).validate()


@dataclass
class Dataset:
    images: np.ndarray          # (n, 3, s, s) float32 in [0, 1]
    labels: np.ndarray          # (n,) int64
    split: str
    indices: np.ndarray         # global sample ids within the domain
    classes: int
    mirror: bool = True
    crop: bool = True

    def __len__(self):
        return len(self.labels)


def _grid(size: int):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return xx, yy


def _background(rng: Rng, size: int, noise: float) -> np.ndarray:
    base = rng.uniform(0.15, 0.45, (3, 1, 1))
    img = np.broadcast_to(base, (3, size, size)).copy()
    img += noise * rng.normals((3, size, size))
    return img


def _palette_color(rng: Rng) -> np.ndarray:
    c = rng.uniform(0.0, 1.0, (3,))
    # push toward saturated colors so the foreground stands out
    c = 0.25 + 0.75 * c / max(1e-6, c.max())
    return c


def _render_shape(rng: Rng, label: int, size: int, noise: float,
                  deformation: float) -> np.ndarray:
    xx, yy = _grid(size)
    cx = size / 2 + deformation * rng.uniform(-5, 5, ())
    cy = size / 2 + deformation * rng.uniform(-5, 5, ())
    r = rng.uniform(0.22 * size, 0.34 * size, ())
    # small jitter only: a quarter-turn would alias square onto diamond
    phi = deformation * rng.uniform(-0.3, 0.3, ())
    dx, dy = xx - cx, yy - cy
    xr = np.cos(phi) * dx + np.sin(phi) * dy
    yr = -np.sin(phi) * dx + np.cos(phi) * dy
    dist = np.sqrt(dx * dx + dy * dy)
    if label == 0:    # disc
        mask = dist < r
    elif label == 1:  # square
        mask = np.maximum(np.abs(xr), np.abs(yr)) < 0.8 * r
    elif label == 2:  # triangle
        mask = (yr > -0.6 * r) & (np.abs(xr) < 0.7 * (r - yr) * 0.8) & (yr < r)
    elif label == 3:  # diamond
        mask = (np.abs(xr) + np.abs(yr)) < 1.1 * r
    elif label == 4:  # plus
        mask = ((np.abs(xr) < 0.35 * r) & (np.abs(yr) < r)) | \
               ((np.abs(yr) < 0.35 * r) & (np.abs(xr) < r))
    else:             # ring
        mask = (dist < r) & (dist > 0.55 * r)
    img = _background(rng, size, noise)
    color = _palette_color(rng)
    img[:, mask] = color[:, None]
    img += noise * 0.5 * rng.normals((3, size, size))
    return img


def _render_texture(rng: Rng, label: int, size: int, noise: float,
                    deformation: float, classes: int) -> np.ndarray:
    xx, yy = _grid(size)
    theta = np.pi * label / classes + deformation * rng.uniform(-0.12, 0.12, ())
    freq = rng.uniform(3.0, 4.0, ())
    phase = rng.uniform(0, 2 * np.pi, ())
    wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                  / size + phase)
    g = 0.5 + 0.5 * wave
    # same hue at two luminances keeps the grating contrast in every channel
    ca = _palette_color(rng)
    cb = 0.2 * ca
    img = ca[:, None, None] * g + cb[:, None, None] * (1 - g)
    img += noise * rng.normals((3, size, size))
    return img


_GLYPH_STROKES = [
    [(0.15, 0.5, 0.85, 0.5)],                              # horizontal bar
    [(0.5, 0.15, 0.5, 0.85)],                              # vertical bar
    [(0.15, 0.5, 0.85, 0.5), (0.5, 0.15, 0.5, 0.85)],      # plus
    [(0.2, 0.2, 0.8, 0.8)],                                # main diagonal
    [(0.2, 0.8, 0.8, 0.2)],                                # anti diagonal
    [(0.2, 0.2, 0.8, 0.8), (0.2, 0.8, 0.8, 0.2)],          # X
    [(0.25, 0.15, 0.25, 0.85), (0.25, 0.85, 0.8, 0.85)],   # L
    [(0.15, 0.2, 0.85, 0.2), (0.5, 0.2, 0.5, 0.85)],       # T
]


def _render_glyph(rng: Rng, label: int, size: int, noise: float,
                  deformation: float) -> np.ndarray:
    xx, yy = _grid(size)
    img = _background(rng, size, noise)
    color = _palette_color(rng)
    thickness = rng.uniform(1.2, 2.2, ())
    jitter = 0.06 * deformation
    for (x0, y0, x1, y1) in _GLYPH_STROKES[label]:
        x0 = (x0 + rng.uniform(-jitter, jitter, ())) * size
        y0 = (y0 + rng.uniform(-jitter, jitter, ())) * size
        x1 = (x1 + rng.uniform(-jitter, jitter, ())) * size
        y1 = (y1 + rng.uniform(-jitter, jitter, ())) * size
        vx, vy = x1 - x0, y1 - y0
        ll = vx * vx + vy * vy
        t = np.clip(((xx - x0) * vx + (yy - y0) * vy) / max(ll, 1e-9), 0, 1)
        dist = np.sqrt((xx - (x0 + t * vx)) ** 2 + (yy - (y0 + t * vy)) ** 2)
        img[:, dist < thickness] = color[:, None]
    img += noise * 0.5 * rng.normals((3, size, size))
    return img


def _render_digit(rng: Rng, label: int, size: int, noise: float,
                  deformation: float) -> np.ndarray:
    rows = _DIGITS[label].split()
    bitmap = np.array([[c == "1" for c in row] for row in rows], dtype=np.float64)
    scale = size // 8
    glyph = np.kron(bitmap, np.ones((scale, scale)))  # (7s, 5s)
    img = _background(rng, size, noise)
    color = _palette_color(rng)
    max_jit = max(1, int(3 * deformation))
    oy = (size - glyph.shape[0]) // 2 + int(rng.integers(1, 2 * max_jit + 1)[0]) - max_jit
    ox = (size - glyph.shape[1]) // 2 + int(rng.integers(1, 2 * max_jit + 1)[0]) - max_jit
    oy = int(np.clip(oy, 0, size - glyph.shape[0]))
    ox = int(np.clip(ox, 0, size - glyph.shape[1]))
    region = img[:, oy:oy + glyph.shape[0], ox:ox + glyph.shape[1]]
    region[:] = region * (1 - glyph) + color[:, None, None] * glyph
    img += noise * rng.normals((3, size, size))
    return img


def render_sample(spec: DomainSpec, index: int) -> tuple[np.ndarray, int]:
    """One (image, label) pair; pure in (spec.seed, index)."""
    label = index % spec.classes
    rng = Rng(spec.seed, _SAMPLE_TAG, index)
    if spec.kind == "shapes":
        img = _render_shape(rng, label, spec.image_size, spec.noise, spec.deformation)
    elif spec.kind == "textures":
        img = _render_texture(rng, label, spec.image_size, spec.noise,
                              spec.deformation, spec.classes)
    elif spec.kind == "glyphs":
        img = _render_glyph(rng, label, spec.image_size, spec.noise, spec.deformation)
    else:
        img = _render_digit(rng, label, spec.image_size, spec.noise, spec.deformation)
    return np.clip(img, 0.0, 1.0).astype(np.float32), label


def _worker_count() -> int:
    raw = os.environ.get("MDLPRUNE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _render_range(spec: DomainSpec, start: int, count: int, split: str) -> Dataset:
    images = np.empty((count, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    indices = np.arange(start, start + count, dtype=np.int64)

    def fill(i):
        images[i], labels[i] = render_sample(spec, start + i)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill, range(count)))
    else:
        for i in range(count):
            fill(i)
    return Dataset(images, labels, split, indices, spec.classes,
                   mirror=spec.mirror, crop=spec.crop)


def generate_domain(spec: DomainSpec) -> dict[str, Dataset]:
    """Render the train/val/test splits from non-overlapping index ranges."""
    spec.validate()
    out = {}
    start = 0
    for split, count in (("train", spec.train_count), ("val", spec.val_count),
                         ("test", spec.test_count)):
        out[split] = _render_range(spec, start, count, split)
        start += count
    return out


def concat_datasets(datasets: list[Dataset], split: str = "train") -> Dataset:
    """Stack datasets into one labeled pool with offset label spaces; used to
    build a diverse backbone-pretraining corpus out of domain generators."""
    images = np.concatenate([ds.images for ds in datasets])
    labels = []
    offset = 0
    for ds in datasets:
        labels.append(ds.labels + offset)
        offset += ds.classes
    indices = np.arange(len(images), dtype=np.int64)
    return Dataset(images, np.concatenate(labels), split, indices,
                   classes=offset, mirror=False, crop=False)


def augment(images: np.ndarray, mirror: bool, crop: bool, seed: int,
            pad: int = 4) -> np.ndarray:
    """Seeded horizontal mirroring (p=0.5) and random crop with zero padding.

    With both switches off the input is returned unchanged. All decisions come
    from the seed, so the same seed replays the same augmentation.
    """
    if not mirror and not crop:
        return images
    rng = Rng(seed, _AUG_TAG)
    n = images.shape[0]
    out = images
    if mirror:
        flips = rng.floats(n) < 0.5
        out = out.copy()
        out[flips] = out[flips, :, :, ::-1]
    if crop:
        size = images.shape[-1]
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(2 * n, 2 * pad + 1).reshape(n, 2)
        cropped = np.empty_like(images)
        for i in range(n):
            oy, ox = int(offs[i, 0]), int(offs[i, 1])
            cropped[i] = padded[i, :, oy:oy + size, ox:ox + size]
        out = cropped
    return out
