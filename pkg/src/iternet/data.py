"""Image IO, field-of-view masks, augmentation, and patch gridding.

Images travel as float32 [1,C,H,W] in [0,1]; gold labels and fov masks
as float32 [1,1,H,W] holding exactly {0,1}.  On disk, any label/mask
pixel >= 128 counts as foreground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError


@dataclass
class Sample:
    """One aligned (image, gold, fov) triple."""

    image: np.ndarray
    gold: np.ndarray
    fov: np.ndarray

    def check(self):
        for name, arr in (("image", self.image), ("gold", self.gold),
                          ("fov", self.fov)):
            if arr.ndim != 4 or arr.shape[0] != 1:
                raise ValueError(f"{name} must be [1,C,H,W], got {arr.shape}")
        if self.image.shape[2:] != self.gold.shape[2:] or \
                self.image.shape[2:] != self.fov.shape[2:]:
            raise ValueError(
                f"misaligned sample: image {self.image.shape}, "
                f"gold {self.gold.shape}, fov {self.fov.shape}")
        for name, arr in (("gold", self.gold), ("fov", self.fov)):
            if arr.shape[1] != 1 or not np.isin(arr, (0.0, 1.0)).all():
                raise ValueError(f"{name} must be a single binary channel")
        return self


# ---------------------------------------------------------------------------
# image files

def load_image(path):
    """Read an 8-bit PNG or PPM/PGM (binary or ASCII) as [1,C,H,W] in [0,1]."""
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as e:
        raise ValueError(f"cannot read image {path}: {e}") from None
    if img.format not in ("PNG", "PPM"):
        raise ValueError(
            f"unsupported image format {img.format!r} for {path} "
            f"(PNG and PPM/PGM only)")
    if img.mode in ("P", "RGBA"):
        img = img.convert("RGB")
    if img.mode == "1":
        img = img.convert("L")
    if img.mode not in ("L", "RGB"):
        raise ValueError(
            f"unsupported pixel mode {img.mode!r} for {path} (8-bit only)")
    a = np.asarray(img, dtype=np.float32) / 255.0
    if a.ndim == 2:
        a = a[None, None]
    else:
        a = a.transpose(2, 0, 1)[None]
    return a


def load_binary_map(path):
    """Read a label/mask image; pixel >= 128 means foreground."""
    a = load_image(path)
    if a.shape[1] != 1:
        a = a.mean(axis=1, keepdims=True)
    return (a >= 128.0 / 255.0).astype(np.float32)


def to_uint8(map01):
    """Quantize a [0,1] map to uint8 by round(p*255)."""
    return np.clip(np.rint(np.asarray(map01) * 255.0), 0, 255).astype(np.uint8)


def save_gray8(arr, path):
    """Write a single-channel map ([H,W] or [1,1,H,W], [0,1] or uint8)."""
    a = np.asarray(arr)
    a = a.reshape(a.shape[-2:])
    if a.dtype != np.uint8:
        a = to_uint8(a)
    Image.fromarray(a, mode="L").save(path)


def save_rgb8(arr, path):
    """Write an RGB image ([1,3,H,W] or [3,H,W] in [0,1], or HWC uint8)."""
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = a.reshape(a.shape[-3:])
        a = to_uint8(a.transpose(1, 2, 0))
    Image.fromarray(a, mode="RGB").save(path)


def load_sample(image_path, gold_path, fov_path):
    return Sample(load_image(image_path), load_binary_map(gold_path),
                  load_binary_map(fov_path)).check()


# ---------------------------------------------------------------------------
# field of view

def _dilate3(a):
    p = np.pad(a, 1, mode="edge")
    out = a.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out |= p[1 + dr:1 + dr + a.shape[0], 1 + dc:1 + dc + a.shape[1]]
    return out


def _erode3(a):
    p = np.pad(a, 1, mode="edge")
    out = a.copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            out &= p[1 + dr:1 + dr + a.shape[0], 1 + dc:1 + dc + a.shape[1]]
    return out


def binary_close3(mask):
    """One 3x3 closing (dilate, then erode) with edge-replicated borders,
    so a full-frame mask stays full-frame."""
    a = np.asarray(mask) != 0
    return _erode3(_dilate3(a))


def generate_fov_mask(image, threshold=0.08):
    """Mean-over-channels brightness threshold plus one 3x3 closing."""
    img = np.asarray(image)
    if img.ndim != 4:
        raise ValueError(f"expected [1,C,H,W] image, got shape {img.shape}")
    raw = img.mean(axis=1)[0] > threshold
    return binary_close3(raw)[None, None].astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    """Geometric transforms hit image, gold and fov identically;
    photometric ones hit the image only.  Defaults give the standard
    training jitter; identity() turns everything off."""

    flip_prob: float = 0.5
    rotation_degrees: float = 20.0
    brightness_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.7, 1.4)
    color_shift: float = 0.05
    affine: bool = False  # adds a random translation when true
    translate_frac: float = 0.04

    @staticmethod
    def identity():
        return AugmentConfig(flip_prob=0.0, rotation_degrees=0.0,
                             brightness_range=(1.0, 1.0),
                             gamma_range=(1.0, 1.0), color_shift=0.0,
                             affine=False)


def _snap(x):
    # exact multiples of 90 degrees must become exact permutations
    return 0.0 if abs(x) < 1e-12 else (1.0 if abs(x - 1) < 1e-12 else
                                       (-1.0 if abs(x + 1) < 1e-12 else x))


def warp_plane(plane, angle_deg, translate=(0.0, 0.0)):
    """Rotate about the image center (then translate), bilinear, zero fill.

    A +90 degree angle maps pixel (r,c) to (c, H-1-r).
    """
    h, w = plane.shape
    a = math.radians(angle_deg)
    ca, sa = _snap(math.cos(a)), _snap(math.sin(a))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    rr = rr - cy - translate[0]
    cc = cc - cx - translate[1]
    sr = ca * rr - sa * cc + cy
    sc = sa * rr + ca * cc + cx
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr = sr - r0
    fc = sc - c0
    out = np.zeros((h, w), dtype=np.float64)
    for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                        (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
        r = r0 + dr
        c = c0 + dc
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w) & (wgt > 0)
        out[ok] += wgt[ok] * plane[r[ok], c[ok]]
    return out.astype(plane.dtype)


def _warp_nchw(arr, angle, translate, binary):
    out = np.empty_like(arr)
    for ch in range(arr.shape[1]):
        p = warp_plane(arr[0, ch], angle, translate)
        out[0, ch] = (p >= 0.5).astype(arr.dtype) if binary else p
    return out


def augment(sample, cfg, rng):
    """Randomized flips/rotation/translation plus photometric jitter.

    All draws come from rng, so a fixed seed reproduces the transform.
    With AugmentConfig.identity() the sample comes back bitwise equal.
    """
    img, gold, fov = sample.image, sample.gold, sample.fov
    hflip = rng.random() < cfg.flip_prob
    vflip = rng.random() < cfg.flip_prob
    angle = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
    if cfg.affine:
        t = rng.uniform(-cfg.translate_frac, cfg.translate_frac, size=2)
        translate = (float(t[0] * img.shape[2]), float(t[1] * img.shape[3]))
    else:
        translate = (0.0, 0.0)
    if hflip:
        img, gold, fov = (a[:, :, :, ::-1].copy() for a in (img, gold, fov))
    if vflip:
        img, gold, fov = (a[:, :, ::-1, :].copy() for a in (img, gold, fov))
    if angle != 0.0 or translate != (0.0, 0.0):
        img = _warp_nchw(img, angle, translate, binary=False)
        gold = _warp_nchw(gold, angle, translate, binary=True)
        fov = _warp_nchw(fov, angle, translate, binary=True)

    b = float(rng.uniform(*cfg.brightness_range))
    g = float(rng.uniform(*cfg.gamma_range))
    shifts = rng.uniform(-cfg.color_shift, cfg.color_shift, size=img.shape[1])
    touched = False
    if b != 1.0:
        img = img * np.float32(b)
        touched = True
    if g != 1.0:
        img = np.clip(img, 0.0, 1.0) ** np.float32(g)
        touched = True
    if np.any(shifts != 0.0):
        img = img + shifts.astype(np.float32)[None, :, None, None]
        touched = True
    if touched:
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, gold, fov)


# ---------------------------------------------------------------------------
# patches

@dataclass
class PatchGrid:
    """Top-left anchors covering the whole image: multiples of the stride
    plus an edge-clamped final row/column when the stride does not land
    exactly on the border."""

    coords: list
    size: int
    height: int
    width: int
    stride: int


def _axis_anchors(length, size, stride):
    if size > length:
        raise ValueError(f"patch size {size} exceeds image extent {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    xs = list(range(0, length - size + 1, stride))
    if xs[-1] != length - size:
        xs.append(length - size)
    return xs


def grid_patch_count(height, width, size, stride):
    """Closed form for the grid size: per axis ceil((L-size)/stride)+1."""
    return ((-(-(height - size) // stride) + 1)
            * (-(-(width - size) // stride) + 1))


def square_padded_grid_count(height, width, size, stride, pad_multiple=64):
    """Patch count under a square-crop-then-pad convention: crop to the
    short side, pad up to the next multiple of pad_multiple, ceil-count
    per axis.  For a 565x584 image at size 128 this reproduces the
    reference counts 22801 (stride 3) and 3249 (stride 8) via a 576x576
    working frame."""
    side = -(-min(height, width) // pad_multiple) * pad_multiple
    per_axis = -(-(side - size) // stride) + 1
    return per_axis * per_axis


def make_grid(height, width, size, stride):
    rows = _axis_anchors(height, size, stride)
    cols = _axis_anchors(width, size, stride)
    coords = [(r, c) for r in rows for c in cols]
    return PatchGrid(coords, size, height, width, stride)


def sample_training_patch(sample, size, rng):
    """Uniformly random square crop of the whole triple."""
    h, w = sample.image.shape[2:]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    r = int(rng.integers(0, h - size + 1))
    c = int(rng.integers(0, w - size + 1))
    sl = np.s_[:, :, r:r + size, c:c + size]
    return Sample(sample.image[sl].copy(), sample.gold[sl].copy(),
                  sample.fov[sl].copy())


def extract_grid_patches(image, size, stride):
    """Every grid patch of a [1,C,H,W] image; together they tile it."""
    img = np.asarray(image)
    if img.ndim != 4:
        raise ValueError(f"expected [1,C,H,W] image, got shape {img.shape}")
    grid = make_grid(img.shape[2], img.shape[3], size, stride)
    patches = [img[:, :, r:r + size, c:c + size].copy()
               for r, c in grid.coords]
    return grid, patches


class StitchAccumulator:
    """Sum/count averaging of overlapping patches, float64 accumulators."""

    def __init__(self, height, width, channels=1):
        self.total = np.zeros((channels, height, width), dtype=np.float64)
        self.cover = np.zeros((height, width), dtype=np.int64)
        self.size = None

    def add(self, coord, patch):
        p = np.asarray(patch)
        p = p.reshape(p.shape[-3:])
        r, c = coord
        h, w = p.shape[1], p.shape[2]
        self.total[:, r:r + h, c:c + w] += p
        self.cover[r:r + h, c:c + w] += 1

    def finish(self, dtype=np.float32):
        if (self.cover == 0).any():
            raise ValueError("stitch grid does not cover every pixel")
        out = self.total / self.cover[None]
        return out[None].astype(dtype)


def stitch_patches(grid, patches, channels=None):
    """Average overlapping patches back into a [1,C,H,W] image."""
    if len(patches) != len(grid.coords):
        raise ValueError(
            f"{len(patches)} patches for {len(grid.coords)} grid anchors")
    if channels is None:
        channels = np.asarray(patches[0]).reshape(
            np.asarray(patches[0]).shape[-3:]).shape[0]
    acc = StitchAccumulator(grid.height, grid.width, channels)
    for coord, p in zip(grid.coords, patches):
        acc.add(coord, p)
    return acc.finish(dtype=np.asarray(patches[0]).dtype)
