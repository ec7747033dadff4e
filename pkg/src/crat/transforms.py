"""Composite-rotation transform families as exact pixel permutations.

Every transform is built from two primitives on square, even-sized images:
whole-image rotation by k*90 degrees counter-clockwise and in-place 180
degree rotation of one half (or k*90 rotation of one quarter).  Class
indices are packed outer-major:

* Rot4:          index = outer
* HS4 / VS4:     index = first_half * 2 + second_half
* HS16 / VS16:   index = outer * 4 + first_half * 2 + second_half
* Rot32:         0-15 are VS16 classes, 16-31 are HS16 classes
* Rot256:        index = sum(k_q * 4**q) over quarters q = TL, TR, BL, BR
* Rot1024:       index = outer * 256 + Rot256 index

The outer rotation is applied first, then the inner rotations.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ClassIndexError, ShapeError


class TransformFamily(enum.Enum):
    ROT4 = "Rot4"
    HS4 = "HS4"
    VS4 = "VS4"
    HS16 = "HS16"
    VS16 = "VS16"
    ROT32 = "Rot32"
    ROT256 = "Rot256"
    ROT1024 = "Rot1024"

    @property
    def cardinality(self) -> int:
        return _CARDINALITY[self]

    @property
    def tag(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name) -> "TransformFamily":
        if isinstance(name, cls):
            return name
        for fam in cls:
            if fam.value.lower() == str(name).lower():
                return fam
        raise ArgumentError(f"unknown transform family {name!r}; expected one of {[f.value for f in cls]}")


_CARDINALITY = {
    TransformFamily.ROT4: 4,
    TransformFamily.HS4: 4,
    TransformFamily.VS4: 4,
    TransformFamily.HS16: 16,
    TransformFamily.VS16: 16,
    TransformFamily.ROT32: 32,
    TransformFamily.ROT256: 256,
    TransformFamily.ROT1024: 1024,
}

ALL_FAMILIES = tuple(TransformFamily)
VERTICAL, HORIZONTAL = "vertical", "horizontal"


@dataclass(frozen=True)
class CompositeClass:
    family: TransformFamily
    index: int

    def __post_init__(self):
        if not 0 <= self.index < self.family.cardinality:
            raise ClassIndexError(
                f"class index {self.index} out of range for {self.family.tag} (cardinality {self.family.cardinality})"
            )

    def decompose(self) -> dict:
        """Outer rotation plus inner parameters for this class."""
        fam, i = self.family, self.index
        if fam is TransformFamily.ROT4:
            return {"outer": i}
        if fam in (TransformFamily.HS4, TransformFamily.VS4):
            return {"outer": 0, "axis": _axis(fam), "halves": (i >> 1, i & 1)}
        if fam in (TransformFamily.HS16, TransformFamily.VS16):
            return {"outer": i // 4, "axis": _axis(fam), "halves": ((i >> 1) & 1, i & 1)}
        if fam is TransformFamily.ROT32:
            sub = TransformFamily.VS16 if i < 16 else TransformFamily.HS16
            return CompositeClass(sub, i % 16).decompose()
        outer = i // 256 if fam is TransformFamily.ROT1024 else 0
        rest = i % 256
        return {"outer": outer, "quarters": tuple((rest >> (2 * q)) & 3 for q in range(4))}


def _axis(fam: TransformFamily) -> str:
    return VERTICAL if fam in (TransformFamily.VS4, TransformFamily.VS16) else HORIZONTAL


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise ShapeError(f"expected a C x H x W image, got shape {img.shape}")
    _, h, w = img.shape
    if h != w:
        raise ShapeError(f"image must be square, got {h}x{w}")
    if h % 2:
        raise ShapeError(f"image side must be even, got {h}")


def rotate90(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate a C x H x W image counter-clockwise by ``k`` quarter turns."""
    if img.ndim != 3 or img.shape[1] != img.shape[2]:
        raise ShapeError(f"rotate90 needs a square C x H x W image, got {img.shape}")
    return np.ascontiguousarray(np.rot90(img, k % 4, axes=(1, 2)))


def rotate_half(img: np.ndarray, axis: str, which: str, flip: bool) -> np.ndarray:
    """Rotate one half of the image by 180 degrees inside its own rectangle.

    ``axis="vertical"`` splits into left/right column halves, ``"horizontal"``
    into top/bottom row halves.
    """
    if img.ndim != 3:
        raise ShapeError(f"expected a C x H x W image, got shape {img.shape}")
    _, h, w = img.shape
    if h % 2 or w % 2:
        raise ShapeError(f"rotate_half needs even dimensions, got {h}x{w}")
    if axis not in (VERTICAL, HORIZONTAL) or which not in ("first", "second"):
        raise ArgumentError(f"bad half specification axis={axis!r} which={which!r}")
    out = img.copy()
    if not flip:
        return out
    if axis == VERTICAL:
        cols = slice(0, w // 2) if which == "first" else slice(w // 2, w)
        out[:, :, cols] = img[:, ::-1, cols][:, :, ::-1]
    else:
        rows = slice(0, h // 2) if which == "first" else slice(h // 2, h)
        out[:, rows, :] = img[:, rows, :][:, ::-1, ::-1]
    return out


def rotate_quarters(img: np.ndarray, ks) -> np.ndarray:
    """Rotate each quarter (TL, TR, BL, BR) counter-clockwise by its own ``k``."""
    _check_image(img)
    s = img.shape[1] // 2
    out = img.copy()
    for q, k in enumerate(ks):
        r0, c0 = (q // 2) * s, (q % 2) * s
        block = img[:, r0 : r0 + s, c0 : c0 + s]
        out[:, r0 : r0 + s, c0 : c0 + s] = np.rot90(block, k % 4, axes=(1, 2))
    return out


def apply(cls: CompositeClass, img: np.ndarray) -> np.ndarray:
    """Apply a composite class to a C x H x W image (outer rotation first)."""
    _check_image(img)
    parts = cls.decompose()
    out = rotate90(img, parts["outer"])
    if "halves" in parts:
        first, second = parts["halves"]
        out = rotate_half(out, parts["axis"], "first", bool(first))
        out = rotate_half(out, parts["axis"], "second", bool(second))
    elif "quarters" in parts:
        out = rotate_quarters(out, parts["quarters"])
    return out


# --------------------------------------------------------------------------
# Index-permutation oracle: maps each destination pixel to its source pixel
# by coordinate arithmetic, independent of the array-slicing code above.
# --------------------------------------------------------------------------


def _rot_src(i, j, n, k):
    # destination (i, j) of a CCW quarter turn of an n x n block reads source (j, n-1-i)
    for _ in range(k % 4):
        i, j = j, n - 1 - i
    return i, j


def pixel_permutation(cls: CompositeClass, h: int, w: int) -> np.ndarray:
    """Flat gather indices ``perm`` with ``apply(cls, img)[c].ravel() == img[c].ravel()[perm]``."""
    if h != w:
        raise ShapeError(f"image must be square, got {h}x{w}")
    if h % 2:
        raise ShapeError(f"image side must be even, got {h}")
    parts = cls.decompose()
    i, j = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # Walk backwards from the output: undo inner steps, then the outer rotation.
    if "halves" in parts:
        first, second = parts["halves"]
        if parts["axis"] == VERTICAL:
            half = w // 2
            left = j < half
            flip = np.where(left, first, second).astype(bool)
            c0 = np.where(left, 0, half)
            i, j = np.where(flip, h - 1 - i, i), np.where(flip, 2 * c0 + half - 1 - j, j)
        else:
            half = h // 2
            top = i < half
            flip = np.where(top, first, second).astype(bool)
            r0 = np.where(top, 0, half)
            i, j = np.where(flip, 2 * r0 + half - 1 - i, i), np.where(flip, w - 1 - j, j)
    elif "quarters" in parts:
        s = h // 2
        qi, qj = i // s, j // s
        li, lj = i % s, j % s
        ks = np.asarray(parts["quarters"])[qi * 2 + qj]
        si, sj = li.copy(), lj.copy()
        for k in range(1, 4):
            m = ks == k
            ri, rj = _rot_src(li[m], lj[m], s, k)
            si[m], sj[m] = ri, rj
        i, j = qi * s + si, qj * s + sj
    i, j = _rot_src(i, j, h, parts["outer"])
    return (i * w + j).reshape(-1)


def gather(img: np.ndarray, perm: np.ndarray) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h * w)[:, perm].reshape(c, h, w)


def sample_classes(family: TransformFamily, m: int, rng: np.random.Generator) -> list[CompositeClass]:
    """``m`` distinct classes drawn uniformly without replacement."""
    family = TransformFamily.parse(family)
    if not 1 <= m <= family.cardinality:
        raise ArgumentError(f"m={m} outside [1, {family.cardinality}] for {family.tag}")
    idx = rng.choice(family.cardinality, size=m, replace=False)
    return [CompositeClass(family, int(i)) for i in idx]


def all_classes(family: TransformFamily) -> list[CompositeClass]:
    family = TransformFamily.parse(family)
    return [CompositeClass(family, i) for i in range(family.cardinality)]
