"""Slow, obviously-correct reference implementations used only by tests."""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, w, b, stride, padding):
    """Direct 7-deep loop cross-correlation, ``w`` is ``[Cout, Cin, kh, kw]``."""
    B, C, H, W = x.shape
    cout, _, kh, kw = w.shape
    s, p = stride, padding
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p))
    xp[:, :, p : p + H, p : p + W] = x
    ho = (H + 2 * p - kh) // s + 1
    wo = (W + 2 * p - kw) // s + 1
    out = np.zeros((B, cout, ho, wo))
    for n in range(B):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[n, c, i * s + u, j * s + v]
                    out[n, o, i, j] = acc
    return out


def conv_transpose2d_loop(x, w, b, stride, padding):
    """Scatter form of the fractionally strided conv, ``w`` is ``[Cin, Cout, kh, kw]``."""
    B, C, H, W = x.shape
    _, cout, kh, kw = w.shape
    s, p = stride, padding
    full = np.zeros((B, cout, (H - 1) * s + kh, (W - 1) * s + kw))
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    for o in range(cout):
                        for u in range(kh):
                            for v in range(kw):
                                full[n, o, i * s + u, j * s + v] += x[n, c, i, j] * w[c, o, u, v]
    out = full[:, :, p : full.shape[2] - p, p : full.shape[3] - p].copy()
    if b is not None:
        out += b[None, :, None, None]
    return out


def convolve_loop(x, k):
    """O(n*m) full linear convolution of two 1-D sequences."""
    out = [0.0] * (len(x) + len(k) - 1)
    for i, xi in enumerate(x):
        for j, kj in enumerate(k):
            out[i + j] += xi * kj
    return np.array(out)


def metrics_loop(pred, gt):
    """Per-pixel python loop over valid pixels; returns the six metrics and the count."""
    se = rel = lg = 0.0
    hits = [0, 0, 0]
    n = 0
    for p, d in zip(np.ravel(pred), np.ravel(gt)):
        p, d = float(p), float(d)
        if d <= 0:
            continue
        n += 1
        pc = p if p > 0 else 1e-3
        se += (p - d) ** 2
        rel += abs(p - d) / d
        lg += abs(math.log10(pc) - math.log10(d))
        r = max(pc / d, d / pc)
        for t in range(3):
            if r < 1.25 ** (t + 1):
                hits[t] += 1
    return math.sqrt(se / n), rel / n, lg / n, hits[0] / n, hits[1] / n, hits[2] / n, n


def single_reflector_echo(pulse, n_out, lag_l, lag_r, amp, direct=True):
    """Closed form for one reflector: ``x(t) + a * x(t - t_1)`` per ear."""
    out = np.zeros((2, n_out))
    for ch, lag in enumerate((lag_l, lag_r)):
        for t in range(n_out):
            v = pulse[t] if (direct and t < len(pulse)) else 0.0
            if 0 <= t - lag < len(pulse):
                v += amp * pulse[t - lag]
            out[ch, t] = v
    return out
