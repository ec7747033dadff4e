"""Synthetic glyph datasets, the CRAT binary format and replicated batches.

Each class is an oriented glyph built from thick strokes and discs in unit
coordinates (x right, y down).  Samples jitter position, scale and
brightness, then add Gaussian noise.  Templates are rejected at generation
time if a quarter turn changes fewer than 5% of their pixels, or any pair of
VS16/HS16 classes differs in fewer than 3%, so the labels stay learnable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ArgumentError, FormatError, SplitViolationError
from .transforms import CompositeClass, TransformFamily, all_classes, apply, sample_classes

SPLITS = ("base", "val", "novel")
SPLIT_CODES = {name: i for i, name in enumerate(SPLITS)}

MAGIC = b"CRAT"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

MIN_DIFF_FRAC = 0.05
MIN_COMPOSITE_FRAC = 0.03
STROKE = 0.055

# (kind, params) primitives in unit coordinates
Glyph = list[tuple[str, tuple]]

TEMPLATES: dict[str, Glyph] = {
    "ell": [("seg", (0.33, 0.15, 0.33, 0.8)), ("seg", (0.33, 0.8, 0.82, 0.8))],
    "arrow": [
        ("seg", (0.18, 0.55, 0.8, 0.55)),
        ("seg", (0.8, 0.55, 0.6, 0.33)),
        ("seg", (0.8, 0.55, 0.64, 0.72)),
        ("seg", (0.3, 0.55, 0.22, 0.3)),
    ],
    "wedge": [("seg", (0.18, 0.8, 0.45, 0.2)), ("seg", (0.45, 0.2, 0.82, 0.62))],
    "bar_dot": [("box", (0.12, 0.15, 0.4, 0.42)), ("disc", (0.7, 0.68, 0.09))],
    "triangle": [("tri", (0.2, 0.2, 0.82, 0.38, 0.35, 0.82))],
    "blob_tail": [("disc", (0.3, 0.3, 0.15)), ("seg", (0.38, 0.38, 0.78, 0.75))],
    "eff": [("seg", (0.3, 0.18, 0.3, 0.82)), ("seg", (0.3, 0.18, 0.76, 0.18)), ("seg", (0.3, 0.5, 0.62, 0.5))],
    "hook": [("seg", (0.62, 0.18, 0.62, 0.7)), ("seg", (0.62, 0.7, 0.45, 0.82)), ("seg", (0.45, 0.82, 0.28, 0.7))],
    "seven": [("seg", (0.22, 0.2, 0.78, 0.2)), ("seg", (0.78, 0.2, 0.4, 0.82))],
    "pee": [
        ("seg", (0.3, 0.18, 0.3, 0.82)),
        ("seg", (0.3, 0.18, 0.68, 0.18)),
        ("seg", (0.68, 0.18, 0.68, 0.5)),
        ("seg", (0.68, 0.5, 0.3, 0.5)),
    ],
    "tee": [("seg", (0.18, 0.15, 0.82, 0.15)), ("seg", (0.64, 0.15, 0.64, 0.85))],
    "dots_bar": [("disc", (0.27, 0.7, 0.11)), ("disc", (0.72, 0.7, 0.06)), ("seg", (0.15, 0.15, 0.6, 0.15))],
}


# ----------------------------------------------------------------------
# rendering
# ----------------------------------------------------------------------


def _seg_dist(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = np.clip(((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))


def _coverage(glyph: Glyph, px: np.ndarray, py: np.ndarray, pixel: float) -> np.ndarray:
    """Anti-aliased occupancy in [0, 1]; ``pixel`` is one pixel's width in glyph units."""
    cov = np.zeros_like(px)
    for kind, p in glyph:
        if kind == "seg":
            sd = _seg_dist(px, py, *p) - STROKE
        elif kind == "disc":
            sd = np.hypot(px - p[0], py - p[1]) - p[2]
        elif kind == "box":
            x0, y0, x1, y1 = p
            sd = np.maximum(np.maximum(x0 - px, px - x1), np.maximum(y0 - py, py - y1))
        elif kind == "tri":
            pts = np.asarray(p).reshape(3, 2)
            edges = [_seg_dist(px, py, *pts[i], *pts[(i + 1) % 3]) for i in range(3)]
            inside = _in_triangle(px, py, pts)
            sd = np.where(inside, -np.minimum.reduce(edges), np.minimum.reduce(edges))
        else:
            raise ArgumentError(f"unknown glyph primitive {kind!r}")
        cov = np.maximum(cov, np.clip(0.5 - sd / pixel, 0.0, 1.0))
    return cov


def _in_triangle(px, py, pts):
    def cross(a, b):
        return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])

    d = [cross(pts[i], pts[(i + 1) % 3]) for i in range(3)]
    return ((d[0] >= 0) & (d[1] >= 0) & (d[2] >= 0)) | ((d[0] <= 0) & (d[1] <= 0) & (d[2] <= 0))


def render(glyph: Glyph, size: int, dx: float = 0.0, dy: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Occupancy map (size x size) of a glyph shifted by (dx, dy) and scaled about the centre."""
    c = (np.arange(size) + 0.5) / size
    py, px = np.meshgrid(c, c, indexing="ij")
    gx = (px - 0.5 - dx) / scale + 0.5
    gy = (py - 0.5 - dy) / scale + 0.5
    return _coverage(glyph, gx, gy, 1.0 / (size * scale))


def _random_glyph(rng: np.random.Generator) -> Glyph:
    pts = rng.uniform(0.18, 0.82, size=(int(rng.integers(3, 5)), 2))
    glyph: Glyph = [("seg", (*pts[i], *pts[i + 1])) for i in range(len(pts) - 1)]
    glyph.append(("disc", (*rng.uniform(0.2, 0.8, size=2), float(rng.uniform(0.05, 0.1)))))
    return glyph


def asymmetry_report(template: np.ndarray) -> dict:
    """Smallest fraction of pixels changed by a quarter turn and by any VS16/HS16 class pair."""
    mask = (template > 0.5)[None]
    n = mask.size
    rot = min(float(np.mean(np.rot90(mask, k, axes=(1, 2)) != mask)) for k in (1, 2, 3))
    pair = 1.0
    for fam in (TransformFamily.VS16, TransformFamily.HS16):
        outs = np.stack([apply(c, mask).reshape(-1) for c in all_classes(fam)])
        diff = (outs[:, None, :] != outs[None, :, :]).sum(-1) / n
        np.fill_diagonal(diff, 1.0)
        pair = min(pair, float(diff.min()))
    return {"rotation": rot, "composite": pair}


def _passes(template: np.ndarray) -> bool:
    rep = asymmetry_report(template)
    return rep["rotation"] >= MIN_DIFF_FRAC and rep["composite"] >= MIN_COMPOSITE_FRAC


# ----------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: dict[int, str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ArgumentError(f"images {self.images.shape} and labels {self.labels.shape} do not line up")
        present = set(int(c) for c in np.unique(self.labels))
        if present != set(self.split):
            raise ArgumentError(f"split covers classes {sorted(self.split)} but labels use {sorted(present)}")
        for c, s in self.split.items():
            if s not in SPLIT_CODES:
                raise ArgumentError(f"class {c} has unknown split {s!r}")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LabeledDataset)
            and self.split == other.split
            and np.array_equal(self.labels, other.labels)
            and self.images.shape == other.images.shape
            and self.images.tobytes() == other.images.tobytes()
        )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def classes(self, split: str) -> list[int]:
        return sorted(c for c, s in self.split.items() if s == split)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(np.isin(self.labels, self.classes(split)))

    def indices_of(self, cls: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cls)

    def image_splits(self) -> np.ndarray:
        codes = np.zeros(max(self.split) + 1, dtype=np.uint8)
        for c, s in self.split.items():
            codes[c] = SPLIT_CODES[s]
        return codes[self.labels]

    def base_label_map(self) -> dict[int, int]:
        """Dataset class id -> supervised-head index (base classes, ascending)."""
        return {c: i for i, c in enumerate(self.classes("base"))}


def split_map(num_classes: int, base: int, val: int = 0) -> dict[int, str]:
    """First ``base`` ids are base, next ``val`` are val, the rest novel."""
    if base < 1 or val < 0 or base + val > num_classes:
        raise ArgumentError(f"split base={base} val={val} does not fit {num_classes} classes")
    return {c: "base" if c < base else "val" if c < base + val else "novel" for c in range(num_classes)}


def generate_synthetic(
    num_classes: int,
    images_per_class: int,
    H: int,
    rng: np.random.Generator,
    splits: Optional[dict[int, str]] = None,
    channels: int = 3,
) -> LabeledDataset:
    """Procedural glyph classes; the default split is 7 base classes, the rest novel."""
    if H < 16 or H % 2:
        raise ArgumentError(f"H must be even and at least 16, got {H}")
    if num_classes < 6:
        raise ArgumentError(f"num_classes must be at least 6, got {num_classes}")
    if images_per_class < 1:
        raise ArgumentError(f"images_per_class must be positive, got {images_per_class}")
    if splits is None:
        splits = split_map(num_classes, min(7, num_classes - 5))

    glyphs: list[Glyph] = []
    named = list(TEMPLATES.items())
    for c in range(num_classes):
        if c < len(named):
            name, glyph = named[c]
            if not _passes(render(glyph, H)):
                raise ArgumentError(f"template {name!r} is too symmetric at H={H}")
        else:
            for _ in range(200):
                glyph = _random_glyph(rng)
                if _passes(render(glyph, H)):
                    break
            else:
                raise ArgumentError(f"could not draw an asymmetric glyph for class {c}")
        glyphs.append(glyph)

    n = num_classes * images_per_class
    images = np.empty((n, channels, H, H), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), images_per_class)
    for i, c in enumerate(labels):
        dx, dy = rng.uniform(-0.125, 0.125, size=2)
        scale = rng.uniform(0.8, 1.2)
        level = 0.8 + rng.uniform(-0.2, 0.2)
        img = level * render(glyphs[c], H, dx, dy, scale) + rng.normal(0.0, 0.02, size=(H, H))
        images[i] = np.clip(img, 0.0, 1.0)[None]
    return LabeledDataset(images, labels, dict(splits))


# ----------------------------------------------------------------------
# binary format
# ----------------------------------------------------------------------


def _record_dtype(c: int, h: int, w: int) -> np.dtype:
    return np.dtype([("label", "<u4"), ("split", "u1"), ("pixels", "<f4", (c, h, w))])


def to_bytes(ds: LabeledDataset) -> bytes:
    n, c, h, w = ds.images.shape
    rec = np.empty(n, dtype=_record_dtype(c, h, w))
    rec["label"] = ds.labels
    rec["split"] = ds.image_splits()
    rec["pixels"] = ds.images
    return _HEADER.pack(MAGIC, VERSION, n, c, h, w) + rec.tobytes()


def from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for the {_HEADER.size}-byte header", len(buf))
    magic, version, n, c, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    dt = _record_dtype(c, h, w)
    body = len(buf) - _HEADER.size
    if body < n * dt.itemsize:
        whole = body // dt.itemsize
        raise FormatError(f"truncated inside image {whole} of {n}", _HEADER.size + whole * dt.itemsize)
    if body > n * dt.itemsize:
        raise FormatError("trailing bytes after the last image", _HEADER.size + n * dt.itemsize)
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size)

    split: dict[int, str] = {}
    for i, (label, code) in enumerate(zip(rec["label"].tolist(), rec["split"].tolist())):
        at = _HEADER.size + i * dt.itemsize
        if code >= len(SPLITS):
            raise FormatError(f"image {i} has split code {code}", at + 4)
        if split.setdefault(label, SPLITS[code]) != SPLITS[code]:
            raise FormatError(f"class {label} is assigned to two splits", at + 4)
    images = rec["pixels"].astype(np.float32)
    return LabeledDataset(images, rec["label"].astype(np.int64), split)


def save(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> LabeledDataset:
    return from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------------------
# replicated batches
# ----------------------------------------------------------------------


@dataclass
class ReplicatedBatch:
    images: np.ndarray  # (B*m, C, H, W)
    sup_labels: np.ndarray  # base-relative, each repeated m times
    rot_labels: np.ndarray
    source: np.ndarray  # dataset index of each entry

    def __len__(self) -> int:
        return len(self.sup_labels)


def default_m(family) -> int:
    if family is None:
        return 1
    family = TransformFamily.parse(family)
    if family in (TransformFamily.ROT256, TransformFamily.ROT1024):
        return 1
    return min(5, family.cardinality)


def make_replicated_batch(
    ds: LabeledDataset,
    indices: Sequence[int],
    family,
    m: int,
    rng: np.random.Generator,
    forced: Optional[Sequence[int]] = None,
) -> ReplicatedBatch:
    """Stack ``m`` transformed copies of every source image.

    ``family=None`` means no auxiliary task: ``m`` must be 1 and every
    rotation label is 0.  ``forced`` fixes the class indices for every image
    instead of sampling them.
    """
    indices = np.asarray(indices, dtype=np.int64)
    base = ds.base_label_map()
    bad = [int(i) for i in indices if int(ds.labels[i]) not in base]
    if bad:
        raise SplitViolationError(f"indices {bad[:5]} are not base-split images and cannot enter a training batch")
    fam = None if family is None else TransformFamily.parse(family)
    if fam is None and m != 1:
        raise ArgumentError(f"m must be 1 without a transform family, got {m}")

    imgs, sup, rot, src = [], [], [], []
    for i in indices:
        img = ds.images[i]
        if fam is None:
            classes = [None]
        elif forced is not None:
            if len(forced) != m:
                raise ArgumentError(f"forced classes {list(forced)} do not have length m={m}")
            classes = [CompositeClass(fam, int(k)) for k in forced]
        else:
            classes = sample_classes(fam, m, rng)
        for cls in classes:
            imgs.append(img if cls is None else apply(cls, img))
            rot.append(0 if cls is None else cls.index)
            sup.append(base[int(ds.labels[i])])
            src.append(int(i))
    return ReplicatedBatch(
        np.stack(imgs).astype(np.float32),
        np.asarray(sup, dtype=np.int64),
        np.asarray(rot, dtype=np.int64),
        np.asarray(src, dtype=np.int64),
    )
