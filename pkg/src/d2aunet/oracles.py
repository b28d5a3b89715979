"""Slow scalar reference implementations.

These share no code with :mod:`d2aunet.ops`; they exist so the fast paths
can be checked against something written the obvious way.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1):
    """Direct cross-correlation with explicit loops over every index."""
    B, C, H, W = x.shape
    O, _, K, _ = w.shape
    span = dilation * (K - 1) + 1
    ho = (H + 2 * padding - span) // stride + 1
    wo = (W + 2 * padding - span) // stride + 1
    out = np.zeros((B, O, ho, wo))
    for n in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for ki in range(K):
                            for kj in range(K):
                                r = i * stride - padding + ki * dilation
                                s = j * stride - padding + kj * dilation
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, c, r, s] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc
    return out


def bilinear_pixel(img, oy: int, ox: int, scale: int) -> float:
    """One output pixel of half-pixel bilinear upsampling of a 2-D array."""
    H, W = img.shape

    def coord(o, n):
        src = (o + 0.5) / scale - 0.5
        src = max(src, 0.0)
        lo = min(int(math.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        return lo, hi, src - lo

    y0, y1, fy = coord(oy, H)
    x0, x1, fx = coord(ox, W)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def upsample_loops(x, scale: int):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H * scale, W * scale))
    for n in range(B):
        for c in range(C):
            for i in range(H * scale):
                for j in range(W * scale):
                    out[n, c, i, j] = bilinear_pixel(x[n, c], i, j, scale)
    return out


def maxpool_loops(x):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // 2, W // 2))
    for n in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    out[n, c, i, j] = max(x[n, c, 2 * i + a, 2 * j + b] for a in range(2) for b in range(2))
    return out


def sigmoid(z: float) -> float:
    return 1 / (1 + math.exp(-z)) if z >= 0 else math.exp(z) / (1 + math.exp(z))


def channel_attention_scalar(g, w0, b0, w1, b1):
    """pool -> affine -> relu -> affine -> sigmoid for one (C, H, W) guide."""
    pooled = [float(np.mean(g[c])) for c in range(g.shape[0])]
    hidden = [max(0.0, sum(w0[h, c] * pooled[c] for c in range(len(pooled))) + b0[h]) for h in range(w0.shape[0])]
    return [sigmoid(sum(w1[o, h] * hidden[h] for h in range(len(hidden))) + b1[o]) for o in range(w1.shape[0])]


def confusion_counts(pred, truth):
    tp = fp = tn = fn = 0
    for p, t in zip(np.asarray(pred).ravel().tolist(), np.asarray(truth).ravel().tolist()):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def dice_loss_scalar(logits, target, eps: float = 1e-5) -> float:
    total = 0.0
    for z_img, g_img in zip(logits, target):
        zs, gs = np.ravel(z_img).tolist(), np.ravel(g_img).tolist()
        ps = [sigmoid(z) for z in zs]
        inter = sum(p * g for p, g in zip(ps, gs))
        total += 1 - (2 * inter + eps) / (sum(ps) + sum(gs) + eps)
    return total / len(logits)


def bce_scalar(logits, target) -> float:
    zs, gs = np.ravel(logits).tolist(), np.ravel(target).tolist()
    total = 0.0
    for z, g in zip(zs, gs):
        # log sigmoid(z) and log sigmoid(-z), each in its overflow-free branch
        log_p = -math.log1p(math.exp(-z)) if z >= 0 else z - math.log1p(math.exp(z))
        log_q = -math.log1p(math.exp(z)) if z <= 0 else -z - math.log1p(math.exp(-z))
        total -= g * log_p + (1 - g) * log_q
    return total / len(zs)


def adam_scalar(theta: float, grad_fn, steps: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, wd=0.0):
    m = v = 0.0
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(theta) + wd * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(theta)
    return traj


def plateau_trace(history, lr: float, factor: float = 0.1, patience: int = 10, threshold: float = 1e-8):
    """lr in effect after each epoch, re-derived with a plain counter."""
    best = math.inf
    bad = 0
    out = []
    for value in history:
        if value < best - threshold:
            best, bad = value, 0
        else:
            bad += 1
        if bad == patience + 1:
            lr, bad = lr * factor, 0
        out.append(lr)
    return out
