"""Whole-image and overlapping-patch inference."""

from __future__ import annotations

import time

import numpy as np

from .data import StitchAccumulator, make_grid
from .model import iternet_forward


def _check_patchable(h, w, size):
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")


def predict_probmap(store, cfg, image, mode="patched", patch_size=32,
                    stride=3, batch_size=16):
    """Final-output probability map [1,1,H,W] plus a timing dict.

    whole: one forward pass; H and W must already be divisible by the
    model's downsampling factor (the error suggests the padded size).
    patched: full-coverage grid of overlapping crops, batched forward,
    overlaps averaged.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 4:
        raise ValueError(f"expected [1,C,H,W] image, got shape {img.shape}")
    h, w = img.shape[2:]
    timings = {"crop": 0.0, "predict": 0.0, "combine": 0.0, "patches": 0}

    if mode == "whole":
        div = 1 << (cfg.max_depth() - 1)
        if h % div or w % div:
            ph = -(-h // div) * div
            pw = -(-w // div) * div
            raise ValueError(
                f"whole-image mode needs H,W divisible by {div}: got "
                f"{h}x{w}, pad to {ph}x{pw} or use patched mode")
        t0 = time.perf_counter()
        out = iternet_forward(store, img, cfg).outputs[-1]
        timings["predict"] = time.perf_counter() - t0
        timings["patches"] = 1
        return out, timings
    if mode != "patched":
        raise ValueError(f"unknown predict mode {mode!r}")

    _check_patchable(h, w, patch_size)
    t0 = time.perf_counter()
    grid = make_grid(h, w, patch_size, stride)
    timings["crop"] += time.perf_counter() - t0
    timings["patches"] = len(grid.coords)
    acc = StitchAccumulator(h, w, channels=1)
    for i in range(0, len(grid.coords), batch_size):
        chunk = grid.coords[i:i + batch_size]
        t0 = time.perf_counter()
        xb = np.concatenate([img[:, :, r:r + patch_size, c:c + patch_size]
                             for r, c in chunk])
        t1 = time.perf_counter()
        out = iternet_forward(store, xb, cfg).outputs[-1]
        t2 = time.perf_counter()
        for j, coord in enumerate(chunk):
            acc.add(coord, out[j])
        t3 = time.perf_counter()
        timings["crop"] += t1 - t0
        timings["predict"] += t2 - t1
        timings["combine"] += t3 - t2
    t0 = time.perf_counter()
    stitched = acc.finish()
    timings["combine"] += time.perf_counter() - t0
    return stitched, timings
