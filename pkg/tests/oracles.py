"""Independent brute-force references used by the unit and acceptance tests.

Everything here is written as plain loops over pixels so it shares no code
path with the vectorised implementations under test.
"""

import math

import numpy as np


def conv_direct(x, w, b, stride=1, padding=0):
    """Six-nested-loop cross-correlation of (C_in, H, W) with (C_out, C_in, k, k)."""
    c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = b[o]
                for c in range(c_in):
                    for u in range(k):
                        for v in range(k):
                            s += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = s
    return out


def maxpool_loop(x, k):
    c, h, w = x.shape
    out = np.zeros((c, h // k, w // k))
    for ch in range(c):
        for i in range(h // k):
            for j in range(w // k):
                best = -math.inf
                for u in range(k):
                    for v in range(k):
                        best = max(best, x[ch, i * k + u, j * k + v])
                out[ch, i, j] = best
    return out


def softmax_scalar(x):
    c, h, w = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(h):
        for j in range(w):
            col = [float(x[ch, i, j]) for ch in range(c)]
            m = max(col)
            e = [math.exp(v - m) for v in col]
            s = sum(e)
            for ch in range(c):
                out[ch, i, j] = e[ch] / s
    return out


def loss_loop(pred, target, alpha=0.25, gamma=2.0, gate=0.01, eps=1e-7, n=1):
    """Per-pixel scalar evaluation of the combined cross-entropy + focal objective."""
    total = 0.0
    for p, t in zip(np.asarray(pred, dtype=np.float64).ravel(), np.asarray(target, dtype=np.float64).ravel()):
        p = min(max(float(p), eps), 1.0 - eps)
        t = float(t)
        p_t = p if t > gate else 1.0 - p
        total += 0.5 * t * math.log(p) + 0.5 * alpha * (1.0 - p_t) ** gamma * math.log(p_t)
    return -total / n


def gaussian_loop(center, h, w, width):
    sigma = width / 6.0
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            d2 = (x - center[0]) ** 2 + (y - center[1]) ** 2
            if d2 <= (width / 2.0) ** 2:
                out[y, x] = math.exp(-d2 / (2 * sigma * sigma))
    return out


def argmax_loop(ch):
    """First maximum scanning rows top to bottom, columns left to right; returns (x, y)."""
    h, w = ch.shape
    best, pos = -math.inf, (0, 0)
    for y in range(h):
        for x in range(w):
            if ch[y, x] > best:
                best, pos = ch[y, x], (x, y)
    return pos


def centroid_loop(ch, threshold=0.5):
    h, w = ch.shape
    peak = max(ch[y, x] for y in range(h) for x in range(w))
    sx = sy = cnt = 0
    for y in range(h):
        for x in range(w):
            if ch[y, x] / peak >= threshold:
                sx += x
                sy += y
                cnt += 1
    return sx / cnt, sy / cnt


def merge_loop(patches, canvas, num_channels):
    """Cover-then-average: for every pixel and channel, average the contributing patch values.

    ``patches`` is a list of (array (C, P, P), x, y, anchor); a patch writes
    its anchor channel and the last (background) channel.
    """
    h, w = canvas
    out = np.zeros((num_channels, h, w))
    for c in range(num_channels):
        for y in range(h):
            for x in range(w):
                vals = []
                for arr, px, py, anchor in patches:
                    side = arr.shape[-1]
                    if c not in (anchor, num_channels - 1):
                        continue
                    if px <= x < px + side and py <= y < py + side:
                        vals.append(arr[c, y - py, x - px])
                if vals:
                    out[c, y, x] = sum(vals) / len(vals)
    return out


def region_pixels(x, y, side):
    return {(i, j) for j in range(y, y + side) for i in range(x, x + side)}


def two_pass_mean_std(values):
    vals = [v for v in values if not math.isnan(v)]
    n = len(vals)
    mean = 0.0
    for v in vals:
        mean += v
    mean /= n
    ss = 0.0
    for v in vals:
        ss += (v - mean) ** 2
    return mean, math.sqrt(ss / n)


def central_fd(f, arr, index, h=1e-5):
    """Central finite difference of scalar ``f()`` w.r.t. ``arr[index]`` (modified in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


def rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-8)
