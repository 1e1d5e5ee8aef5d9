"""Pixel-loop kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``DIVSAL_NUMBA`` is not
set to ``0``, except for ``entropy_maps`` where numpy is faster and numba is
opt-in. Both paths return matching results; ``tests/test_kernels.py``
checks this and ``benchmarks/bench_kernels.py`` times them against each other.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("DIVSAL_NUMBA", "1") != "0"

LN2 = math.log(2.0)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# threshold confusion counts (F-measure / E-measure)
# --------------------------------------------------------------------------


def _threshold_counts_np(pred, gt, thresholds):
    n = thresholds.shape[0]
    # pixel is foreground at threshold k iff pred > thresholds[k] iff k < c
    c = np.searchsorted(thresholds, pred.ravel(), side="left")
    fg = gt.ravel().astype(bool)
    hist_fg = np.bincount(c[fg], minlength=n + 1)
    hist_bg = np.bincount(c[~fg], minlength=n + 1)
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    fp = np.cumsum(hist_bg[::-1])[::-1][1:]
    return tp.astype(np.int64), fp.astype(np.int64)


def _threshold_counts_loop(pred, gt, thresholds):
    n = thresholds.shape[0]
    hist_fg = np.zeros(n + 1, np.int64)
    hist_bg = np.zeros(n + 1, np.int64)
    p = pred.ravel()
    g = gt.ravel()
    for i in range(p.shape[0]):
        c = np.searchsorted(thresholds, p[i])
        if g[i] > 0:
            hist_fg[c] += 1
        else:
            hist_bg[c] += 1
    tp = np.zeros(n, np.int64)
    fp = np.zeros(n, np.int64)
    acc_tp = 0
    acc_fp = 0
    for k in range(n - 1, -1, -1):
        acc_tp += hist_fg[k + 1]
        acc_fp += hist_bg[k + 1]
        tp[k] = acc_tp
        fp[k] = acc_fp
    return tp, fp


# --------------------------------------------------------------------------
# entropy decomposition
# --------------------------------------------------------------------------


def _entropy_maps_np(stack, eps):
    p = np.clip(stack, eps, 1.0 - eps)
    mean = p.mean(axis=0)
    h_mean = -(mean * np.log(mean) + (1.0 - mean) * np.log1p(-mean)) / LN2
    h_each = -(p * np.log(p) + (1.0 - p) * np.log1p(-p)) / LN2
    return h_mean, h_each.mean(axis=0)


def _entropy_maps_loop(stack, eps):
    s, n = stack.shape
    acc = np.zeros(n)
    acc_h = np.zeros(n)
    # row-major sweep keeps reads contiguous
    for j in range(s):
        for i in range(n):
            v = min(max(stack[j, i], eps), 1.0 - eps)
            acc[i] += v
            acc_h[i] -= v * math.log(v) + (1.0 - v) * math.log1p(-v)
    ln2 = math.log(2.0)
    up = np.empty(n)
    ua = np.empty(n)
    for i in range(n):
        m = acc[i] / s
        up[i] = -(m * math.log(m) + (1.0 - m) * math.log1p(-m)) / ln2
        ua[i] = acc_h[i] / s / ln2
    return up, ua


# --------------------------------------------------------------------------
# binary morphology with a disk structuring element
# --------------------------------------------------------------------------


def disk_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1).astype(np.int64)


def _binary_morph_np(mask, offsets, dilate):
    h, w = mask.shape
    src = mask.astype(bool)
    out = np.zeros((h, w), bool) if dilate else np.ones((h, w), bool)
    for dy, dx in offsets:
        shifted = np.zeros((h, w), bool)
        ys, yd = (slice(dy, h), slice(0, h - dy)) if dy >= 0 else (slice(0, h + dy), slice(-dy, h))
        xs, xd = (slice(dx, w), slice(0, w - dx)) if dx >= 0 else (slice(0, w + dx), slice(-dx, w))
        shifted[yd, xd] = src[ys, xs]
        if dilate:
            out |= shifted
        else:
            out &= shifted
    return out.astype(np.uint8)


def _binary_morph_loop(mask, offsets, dilate):
    h, w = mask.shape
    out = np.zeros((h, w), np.uint8) if dilate else np.ones((h, w), np.uint8)
    for k in range(offsets.shape[0]):
        dy = offsets[k, 0]
        dx = offsets[k, 1]
        for y in range(h):
            yy = y + dy
            row_inside = 0 <= yy < h
            if dilate and not row_inside:
                continue
            for x in range(w):
                xx = x + dx
                v = 1 if row_inside and 0 <= xx < w and mask[yy, xx] > 0 else 0
                if dilate:
                    out[y, x] |= v
                else:
                    out[y, x] &= v
    return out


if HAS_NUMBA:  # compiled lazily on first call
    _threshold_counts_nb = njit(cache=True)(_threshold_counts_loop)
    _entropy_maps_nb = njit(cache=True)(_entropy_maps_loop)
    _binary_morph_nb = njit(cache=True)(_binary_morph_loop)


# --------------------------------------------------------------------------
# public dispatchers
# --------------------------------------------------------------------------


def threshold_counts(pred, gt, thresholds, use_numba=None):
    """True/false positive counts for ``pred > t`` at each threshold ``t``.

    ``thresholds`` must be sorted ascending. Returns two int64 arrays.
    """
    pred = np.ascontiguousarray(pred, dtype=np.float64)
    gt = np.ascontiguousarray(gt, dtype=np.uint8)
    thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
    if HAS_NUMBA and (USE_NUMBA if use_numba is None else use_numba):
        return _threshold_counts_nb(pred, gt, thresholds)
    return _threshold_counts_np(pred, gt, thresholds)


def entropy_maps(stack, eps=1e-7, use_numba=None):
    """Per-pixel normalized entropy of the mean and mean entropy over axis 0.

    ``stack`` has shape (S, ...). Values are clipped to [eps, 1 - eps] before
    averaging so that the first output never falls below the second.
    """
    stack = np.asarray(stack, dtype=np.float64)
    s = stack.shape[0]
    tail = stack.shape[1:]
    flat = np.ascontiguousarray(stack.reshape(s, -1))
    # numpy's vectorized log outruns the compiled scalar loop here, so the
    # numba path is opt-in (see benchmarks/bench_kernels.py)
    if use_numba and HAS_NUMBA:
        up, ua = _entropy_maps_nb(flat, float(eps))
    else:
        up, ua = _entropy_maps_np(flat, float(eps))
    return up.reshape(tail), ua.reshape(tail)


def binary_morph(mask, radius, dilate, use_numba=None):
    """Dilate (``dilate=True``) or erode a binary mask by a disk of ``radius``.

    Pixels outside the grid count as background.
    """
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    if radius <= 0:
        return mask.copy()
    offsets = disk_offsets(radius)
    if HAS_NUMBA and (USE_NUMBA if use_numba is None else use_numba):
        return _binary_morph_nb(mask, offsets, bool(dilate))
    return _binary_morph_np(mask, offsets, bool(dilate))
