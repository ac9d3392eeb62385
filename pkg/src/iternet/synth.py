"""Synthetic fundus-like images with known vessel maps.

Each sample is a circular field of view holding a branching tree of
smooth dark curves (the vessels, 1-4 px wide, rasterized from cubic
Bezier segments radiating out of a bright disk blob), over a smoothly
varying illumination field with Gaussian pixel noise.  The exact
rasterized curves are the gold map, the analytic circle is the fov,
and everything is a pure function of the seed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .data import Sample, save_gray8, save_rgb8


@dataclass
class SynthConfig:
    fov_radius_frac: float = 0.47
    root_count: tuple = (5, 9)        # inclusive range of root curves
    branch_prob: float = 0.45
    max_branch_depth: int = 2
    width_range: tuple = (1.3, 3.4)   # stamped diameter in pixels
    contrast_range: tuple = (0.18, 0.36)
    noise_sigma: float = 0.06
    disk_amp_range: tuple = (0.16, 0.28)
    disk_sigma_frac: tuple = (0.055, 0.095)
    # short spans where a vessel fades into the background while the
    # gold map keeps it; the label is only inferable from continuation
    fade_prob: float = 0.9
    fade_span_px: tuple = (4.0, 8.0)
    fade_depth: tuple = (0.95, 1.0)


def _bezier_points(p0, p1, p2, p3, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    u = 1.0 - t
    return (u ** 3 * p0 + 3 * u ** 2 * t * p1 + 3 * u * t ** 2 * p2
            + t ** 3 * p3)


def _grow(rng, start, direction, length, width, depth, cfg, curves):
    # one cubic segment with jittered control points, then maybe children
    d = direction / (np.linalg.norm(direction) + 1e-9)
    perp = np.array([-d[1], d[0]])
    bend = rng.uniform(-0.35, 0.35, size=2) * length
    p1 = start + d * length * 0.33 + perp * bend[0]
    p2 = start + d * length * 0.66 + perp * bend[1]
    p3 = start + d * length + perp * rng.uniform(-0.2, 0.2) * length
    curves.append((start, p1, p2, p3, width))
    if depth >= cfg.max_branch_depth:
        return
    for _ in range(2):
        if rng.random() < cfg.branch_prob:
            t = rng.uniform(0.25, 0.85)
            at = _bezier_points(start, p1, p2, p3, 33)[int(t * 32)]
            ang = rng.uniform(0.4, 1.1) * rng.choice((-1.0, 1.0))
            rot = np.array([[np.cos(ang), -np.sin(ang)],
                            [np.sin(ang), np.cos(ang)]])
            _grow(rng, at, rot @ d, length * rng.uniform(0.45, 0.7),
                  max(width * 0.65, 1.0), depth + 1, cfg, curves)


def _stamp_curves(curves, h, w, rng, cfg):
    gold = np.zeros((h, w), dtype=bool)
    shade = np.zeros((h, w), dtype=np.float32)
    for p0, p1, p2, p3, width in curves:
        approx = np.linalg.norm(p3 - p0) + 1.0
        pts = _bezier_points(p0, p1, p2, p3, max(int(approx * 2.5), 8))
        # vessel darkness tapers along the curve
        amps = np.linspace(1.0, rng.uniform(0.55, 0.9), len(pts))
        if rng.random() < cfg.fade_prob:
            # raised-cosine notch: the stamped darkness dips to near zero
            # over a few pixels of arc while the gold keeps the curve
            span = rng.uniform(*cfg.fade_span_px)
            depth = rng.uniform(*cfg.fade_depth)
            center = rng.uniform(0.25, 0.8) * len(pts)
            half = max(span * len(pts) / (2.0 * approx), 1.0)
            rel = (np.arange(len(pts)) - center) / half
            notch = np.where(np.abs(rel) < 1.0,
                             0.5 * (1.0 + np.cos(np.pi * np.clip(rel, -1, 1))),
                             0.0)
            amps = amps * (1.0 - depth * notch)
        rad = width / 2.0
        ri = int(np.ceil(rad))
        dy, dx = np.mgrid[-ri:ri + 1, -ri:ri + 1]
        disk = (dy ** 2 + dx ** 2) <= rad ** 2 + 0.25
        for (py, px), amp in zip(pts, amps):
            iy, ix = int(round(py)), int(round(px))
            y0, y1 = iy - ri, iy + ri + 1
            x0, x1 = ix - ri, ix + ri + 1
            if y1 <= 0 or x1 <= 0 or y0 >= h or x0 >= w:
                continue
            sy0, sx0 = max(0, y0), max(0, x0)
            sy1, sx1 = min(h, y1), min(w, x1)
            d = disk[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0]
            gold[sy0:sy1, sx0:sx1] |= d
            region = shade[sy0:sy1, sx0:sx1]
            np.maximum(region, d * amp, out=region)
    return gold, shade


def synth_vessel_sample(seed, height=128, width=128, cfg=None):
    """Deterministic synthetic Sample for a seed (int or sequence of ints)."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    h, w = height, width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = cfg.fov_radius_frac * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    fov = ((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2

    # vessels radiate from the disk blob like they leave the optic disk
    ang0 = rng.uniform(0, 2 * np.pi)
    disk_c = np.array([cy, cx]) + radius * 0.45 * np.array(
        [np.sin(ang0), np.cos(ang0)])
    curves = []
    n_roots = int(rng.integers(cfg.root_count[0], cfg.root_count[1] + 1))
    for _ in range(n_roots):
        ang = rng.uniform(0, 2 * np.pi)
        d = np.array([np.sin(ang), np.cos(ang)])
        start = disk_c + d * rng.uniform(0.0, 4.0)
        length = radius * rng.uniform(0.55, 1.05)
        width_px = rng.uniform(*cfg.width_range)
        _grow(rng, start, d, length, width_px, 0, cfg, curves)
    gold, shade = _stamp_curves(curves, h, w, rng, cfg)
    gold &= fov

    # illumination: base level, linear gradient, radial vignette
    base = rng.uniform(0.55, 0.68)
    gx, gy = rng.uniform(-0.10, 0.10, size=2)
    vig = rng.uniform(0.06, 0.16)
    rnorm = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / radius
    illum = base + gx * (xx - cx) / w + gy * (yy - cy) / h - vig * rnorm ** 2

    damp = rng.uniform(*cfg.disk_amp_range)
    dsig = rng.uniform(*cfg.disk_sigma_frac) * min(h, w)
    disk_blob = damp * np.exp(-((yy - disk_c[0]) ** 2 + (xx - disk_c[1]) ** 2)
                              / (2 * dsig ** 2))

    contrast = rng.uniform(*cfg.contrast_range)
    tint = np.array([1.0, 0.86, 0.58]) * rng.uniform(0.95, 1.05, size=3)
    vessel_gain = np.array([0.9, 1.0, 0.75])
    img = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        img[ch] = illum * tint[ch] + disk_blob - contrast * vessel_gain[ch] * shade
    img *= fov
    img += 0.01 * ~fov
    noise_scale = np.where(fov, 1.0, 0.25) * cfg.noise_sigma
    img += rng.normal(0.0, 1.0, size=img.shape) * noise_scale
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    return Sample(img[None], gold[None, None].astype(np.float32),
                  fov[None, None].astype(np.float32)).check()


# ---------------------------------------------------------------------------
# corpus on disk

def write_corpus(out_dir, count, train_count, height=128, width=128, seed=0,
                 cfg=None):
    """img_####.png / gold_####.png / fov_####.png plus manifest.csv."""
    if not 0 <= train_count <= count:
        raise ValueError(f"train split {train_count} of {count} is invalid")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(count):
        s = synth_vessel_sample([seed, i], height, width, cfg)
        stem = f"{i:04d}"
        save_rgb8(s.image, os.path.join(out_dir, f"img_{stem}.png"))
        save_gray8(s.gold, os.path.join(out_dir, f"gold_{stem}.png"))
        save_gray8(s.fov, os.path.join(out_dir, f"fov_{stem}.png"))
        rows.append(("train" if i < train_count else "test",
                     f"img_{stem}.png", f"gold_{stem}.png", f"fov_{stem}.png"))
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("split", "image", "gold", "fov"))
        wr.writerows(rows)
    return rows


def read_manifest(corpus_dir):
    """-> list of (split, image path, gold path, fov path)."""
    path = os.path.join(corpus_dir, "manifest.csv")
    if not os.path.exists(path):
        raise ValueError(f"no manifest.csv in {corpus_dir}")
    out = []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd, None)
        if header != ["split", "image", "gold", "fov"]:
            raise ValueError(f"malformed manifest header in {path}: {header}")
        for row in rd:
            if len(row) != 4 or row[0] not in ("train", "test"):
                raise ValueError(f"malformed manifest row in {path}: {row}")
            out.append((row[0],) + tuple(os.path.join(corpus_dir, p)
                                         for p in row[1:]))
    return out
