"""Segmentation quality metrics.

Pixel metrics (confusion counts, AUC) are computed inside the fov mask;
the connectivity measure always looks at the whole map because breaks
matter wherever they happen.  Probability maps are accepted on either
the [0,1] or the 0-255 scale; threshold grids live on 0-255.

Connectivity at a threshold compares the number of predicted segments
against the number of gold segments, normalized by a tolerance equal to
alpha times the gold skeleton length:

    C(theta) = 1 - |S_P - S_G| / (alpha * L)   clamped to 0 below

and the scalar connectivity score is the mean of C over all 256
integer thresholds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np


def _plane(arr):
    a = np.asarray(arr)
    if a.ndim == 4 and a.shape[0] == 1 and a.shape[1] == 1:
        a = a[0, 0]
    elif a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValueError(f"expected a single 2-D map, got shape {np.asarray(arr).shape}")
    return a


def _scale255(pred):
    p = _plane(pred).astype(np.float64)
    if p.size and p.max() <= 1.0:
        p = p * 255.0
    return p


def binarize(prob, theta):
    """1 where prob > theta (theta on the same scale as the map)."""
    return (_plane(prob) > theta).astype(np.uint8)


# ---------------------------------------------------------------------------
# confusion counts

@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def sensitivity(self):
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def specificity(self):
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else 0.0

    @property
    def accuracy(self):
        n = self.tp + self.fp + self.tn + self.fn
        return (self.tp + self.tn) / n

    @property
    def f1(self):
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 0.0


def confusion(pred_bin, gold, mask=None):
    """Counts over mask==1 pixels (whole map when mask is None)."""
    p = _plane(pred_bin) != 0
    g = _plane(gold) != 0
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} vs gold {g.shape}")
    if mask is None:
        m = np.ones_like(g)
    else:
        m = _plane(mask) != 0
        if m.shape != g.shape:
            raise ValueError(f"mask {m.shape} vs gold {g.shape}")
    if not m.any():
        raise ValueError("confusion: mask selects zero pixels")
    return Confusion(tp=int((p & g & m).sum()), fp=int((p & ~g & m).sum()),
                     tn=int((~p & ~g & m).sum()), fn=int((~p & g & m).sum()))


# ---------------------------------------------------------------------------
# ROC

def _masked_values(pred, gold, mask):
    p = _plane(pred).astype(np.float64).ravel()
    g = (_plane(gold) != 0).ravel()
    if mask is not None:
        m = (_plane(mask) != 0).ravel()
        p, g = p[m], g[m]
    if not g.any() or g.all():
        raise ValueError("AUC needs both classes present inside the mask")
    return p, g


def _tied_ranks(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    return ranks

def roc_auc(pred, gold, mask=None):
    """Area under the ROC curve as the Mann-Whitney rank statistic
    (ties count one half)."""
    p, g = _masked_values(pred, gold, mask)
    ranks = _tied_ranks(p)
    npos = int(g.sum())
    nneg = len(g) - npos
    u = ranks[g].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def auc_threshold_sweep(pred, gold, mask=None):
    """AUC by explicit threshold sweep over every distinct value plus
    trapezoidal integration; an independent cross-check of roc_auc."""
    p, g = _masked_values(pred, gold, mask)
    order = np.argsort(-p, kind="stable")
    ps = p[order]
    gs = g[order]
    boundary = np.r_[np.flatnonzero(ps[1:] != ps[:-1]), len(ps) - 1]
    tp = np.cumsum(gs)[boundary]
    fp = np.cumsum(~gs)[boundary]
    npos = int(g.sum())
    nneg = len(g) - npos
    tpr = np.r_[0.0, tp / npos]
    fpr = np.r_[0.0, fp / nneg]
    return float(np.trapezoid(tpr, fpr))


def roc_points(pred, gold, mask=None, count=256):
    """(fpr, tpr) at `count` evenly spaced thresholds, for plotting."""
    p, g = _masked_values(pred, gold, mask)
    top = 255.0 if p.max() > 1.0 else 1.0
    thetas = np.linspace(0.0, top, count)
    npos = int(g.sum())
    nneg = len(g) - npos
    fpr = np.empty(count)
    tpr = np.empty(count)
    for i, t in enumerate(thetas):
        hit = p > t
        tpr[i] = (hit & g).sum() / npos
        fpr[i] = (hit & ~g).sum() / nneg
    return fpr, tpr


# ---------------------------------------------------------------------------
# skeletonization (two-subpass thinning, applied sequentially in scan
# order so no deletion can disconnect or erase a component)

_NB = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _thin_pass(img, phase):
    # vectorized candidate screen on the current image
    p = [img[1 + dr:img.shape[0] - 1 + dr, 1 + dc:img.shape[1] - 1 + dc]
         for dr, dc in _NB]
    b = sum(x.astype(np.int8) for x in p)
    ring = np.stack(p + [p[0]])
    a = ((ring[1:] == 1) & (ring[:-1] == 0)).sum(axis=0)
    if phase == 0:
        cond = (p[0] * p[2] * p[4] == 0) & (p[2] * p[4] * p[6] == 0)
    else:
        cond = (p[0] * p[2] * p[6] == 0) & (p[0] * p[4] * p[6] == 0)
    cand = (img[1:-1, 1:-1] == 1) & (b >= 2) & (b <= 6) & (a == 1) & cond
    removed = 0
    for r, c in zip(*np.nonzero(cand)):
        rr, cc = r + 1, c + 1
        nb = [img[rr + dr, cc + dc] for dr, dc in _NB]
        bs = sum(nb)
        if not 2 <= bs <= 6:
            continue
        ring = nb + [nb[0]]
        trans = sum(ring[i] == 0 and ring[i + 1] == 1 for i in range(8))
        if trans != 1:
            continue
        if phase == 0:
            if nb[0] * nb[2] * nb[4] or nb[2] * nb[4] * nb[6]:
                continue
        else:
            if nb[0] * nb[2] * nb[6] or nb[0] * nb[4] * nb[6]:
                continue
        img[rr, cc] = 0
        removed += 1
    return removed


def skeletonize(binary):
    """Thin to 1-px centerlines; idempotent, preserves the number of
    8-connected components."""
    a = (_plane(binary) != 0)
    img = np.pad(a, 1).astype(np.uint8)
    while _thin_pass(img, 0) + _thin_pass(img, 1):
        pass
    return img[1:-1, 1:-1].astype(bool)


# ---------------------------------------------------------------------------
# connected components (8-connectivity, run-based union-find)

def _row_runs(row):
    d = np.diff(row.astype(np.int8))
    starts = np.flatnonzero(d == 1) + 1
    ends = np.flatnonzero(d == -1)
    if row[0]:
        starts = np.r_[0, starts]
    if row[-1]:
        ends = np.r_[ends, len(row) - 1]
    return starts, ends


def count_segments(binary):
    """Number of 8-connected foreground components."""
    a = _plane(binary) != 0
    parent = []

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    prev = []  # (start, end, set id) runs of the previous row
    for row in a:
        starts, ends = _row_runs(row)
        cur = []
        for s, e in zip(starts.tolist(), ends.tolist()):
            rid = len(parent)
            parent.append(rid)
            cur.append((s, e, rid))
        i = j = 0
        while i < len(prev) and j < len(cur):
            ps, pe, pid = prev[i]
            cs, ce, cid = cur[j]
            if ps <= ce + 1 and cs <= pe + 1:  # diagonal contact counts
                ra, rb = find(pid), find(cid)
                if ra != rb:
                    parent[rb] = ra
            if pe < ce:
                i += 1
            else:
                j += 1
        prev = cur
    return sum(1 for i in range(len(parent)) if find(i) == i)


# ---------------------------------------------------------------------------
# connectivity score

def _gold_plane(gold):
    g = _plane(gold)
    if not np.isin(g, (0, 1)).all():
        raise ValueError("gold map must be binary 0/1")
    if not g.any():
        raise ValueError("connectivity undefined for an empty gold map")
    return g != 0


def connectivity_at(pred, gold, theta, alpha=0.05):
    """C(theta) against the gold map; theta on the map's own scale."""
    g = _gold_plane(gold)
    s_max = alpha * int(skeletonize(g).sum())
    s_g = count_segments(g)
    s_p = count_segments(binarize(pred, theta))
    diff = abs(s_p - s_g)
    return 1.0 - diff / s_max if diff <= s_max else 0.0


def connectivity_curve(pred, gold, alpha=0.05):
    """C over the 256 integer thresholds of the 0-255 scale ([0,1] maps
    are scaled up first).  -> (thetas, values)"""
    g = _gold_plane(gold)
    s_max = alpha * int(skeletonize(g).sum())
    s_g = count_segments(g)
    p = _scale255(pred)
    thetas = np.arange(256)
    values = np.empty(256, dtype=np.float64)
    for t in thetas:
        diff = abs(count_segments(p > t) - s_g)
        values[t] = 1.0 - diff / s_max if diff <= s_max else 0.0
    return thetas, values


def connectivity_area(pred, gold, alpha=0.05):
    """Mean of C(theta) over the threshold grid (in [0,1], higher better)."""
    _, values = connectivity_curve(pred, gold, alpha)
    return float(values.mean())


# ---------------------------------------------------------------------------
# whole-image evaluation

@dataclass
class ImageEval:
    stem: str
    f1: float
    sensitivity: float
    specificity: float
    accuracy: float
    auc: float
    connectivity: float
    roc: tuple = field(repr=False, default=None)
    conn_curve: tuple = field(repr=False, default=None)

    METRICS = ("f1", "sensitivity", "specificity", "accuracy", "auc",
               "connectivity")


def evaluate(pred, gold, fov=None, alpha=0.05, with_mask=True, threshold=0.5,
             stem=""):
    """All metrics for one image.

    with_mask restricts the confusion counts and AUC to fov==1 pixels;
    connectivity is always computed on the full maps.  threshold picks
    the operating point for the confusion-based metrics and lives on
    [0,1] (rescaled automatically for a 0-255 map).
    """
    p = _plane(pred)
    mask = _plane(fov) if (with_mask and fov is not None) else None
    th = threshold * 255.0 if p.max() > 1.0 else threshold
    cm = confusion(binarize(p, th), gold, mask)
    auc = roc_auc(p, gold, mask)
    conn_t, conn_v = connectivity_curve(p, gold, alpha)
    fpr, tpr = roc_points(p, gold, mask)
    return ImageEval(stem=stem, f1=cm.f1, sensitivity=cm.sensitivity,
                     specificity=cm.specificity, accuracy=cm.accuracy,
                     auc=auc, connectivity=float(conn_v.mean()),
                     roc=(fpr, tpr), conn_curve=(conn_t, conn_v))


def mean_eval(rows):
    """Unweighted per-image mean of each metric column."""
    if not rows:
        raise ValueError("cannot aggregate an empty evaluation")
    return ImageEval(stem="mean", **{
        m: float(np.mean([getattr(r, m) for r in rows]))
        for m in ImageEval.METRICS})


def write_report_csv(path, rows):
    """Per-image rows plus a final mean row, fixed column order."""
    mean = mean_eval(rows)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("image", "f1", "sensitivity", "specificity", "accuracy",
                     "auc", "connectivity"))
        for r in list(rows) + [mean]:
            wr.writerow((r.stem,) + tuple(f"{getattr(r, m):.10g}"
                                          for m in ImageEval.METRICS))
    return mean


def write_curve_csv(path, header, xs, ys):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        for x, y in zip(xs, ys):
            wr.writerow((f"{x:.10g}", f"{y:.10g}"))


def write_roc_csv(path, fpr, tpr):
    write_curve_csv(path, ("fpr", "tpr"), fpr, tpr)


def write_connectivity_csv(path, thetas, values):
    write_curve_csv(path, ("theta", "connectivity"), thetas, values)
