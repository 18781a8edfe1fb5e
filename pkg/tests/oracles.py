"""Independent reference implementations used to cross-check the package.

Everything here is written as plain scalar loops (or brute-force counting)
on purpose: slow, obvious, and structurally unrelated to the vectorized
code under test.  Do not import the package's internals into this module
beyond plain data types.
"""

import math

import numpy as np


def feature_oracle(patch, filters, truncation, cfa_aware):
    """Residual feature of one patch: correlate, quantize, 4-tuple histograms.

    filters: list of (kernel 2-d array, q).  Mirrors the documented layout:
    per filter, horizontal then vertical blocks, each split into the four
    (row%2, col%2) phases when cfa_aware.
    """
    t = truncation
    base = 2 * t + 1
    blocks = []
    for kernel, q in filters:
        kh, kw = kernel.shape
        h = patch.shape[0] - kh + 1
        w = patch.shape[1] - kw + 1
        resid = np.zeros((h, w))
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for a in range(kh):
                    for b in range(kw):
                        acc += kernel[a, b] * float(patch[i + a, j + b])
                resid[i, j] = acc
        qmap = np.zeros((h, w), dtype=np.int64)
        for i in range(h):
            for j in range(w):
                v = resid[i, j] / q
                r = math.floor(abs(v) + 0.5)
                if v < 0:
                    r = -r
                qmap[i, j] = max(-t, min(t, r))
        for direction in ("horizontal", "vertical"):
            sub_maps = [qmap]
            if cfa_aware:
                sub_maps = [qmap[0::2, 0::2], qmap[0::2, 1::2], qmap[1::2, 0::2], qmap[1::2, 1::2]]
            for sub in sub_maps:
                hist = np.zeros(base**4)
                count = 0
                hh, ww = sub.shape
                if direction == "horizontal":
                    for i in range(hh):
                        for j in range(ww - 3):
                            idx = 0
                            for k in range(4):
                                idx += (sub[i, j + k] + t) * base**k
                            hist[idx] += 1
                            count += 1
                else:
                    for i in range(hh - 3):
                        for j in range(ww):
                            idx = 0
                            for k in range(4):
                                idx += (sub[i + k, j] + t) * base**k
                            hist[idx] += 1
                            count += 1
                if count:
                    hist /= count
                blocks.append(hist)
    return np.concatenate(blocks)


def triplet_forward_oracle(w1, b1, w2, b2, x):
    """Two dense layers with ReLU between, then L2 normalization, via loops."""
    h1 = []
    for j in range(w1.shape[0]):
        acc = b1[j]
        for i in range(w1.shape[1]):
            acc += w1[j, i] * x[i]
        h1.append(max(acc, 0.0))
    z2 = []
    for j in range(w2.shape[0]):
        acc = b2[j]
        for i in range(w2.shape[1]):
            acc += w2[j, i] * h1[i]
        z2.append(acc)
    norm = math.sqrt(sum(v * v for v in z2))
    return np.array([v / norm for v in z2])


def triplet_loss_oracle(w1, b1, w2, b2, anchors, positives, negatives, margin):
    """Sum of max(0, m + |f_a-f_p|^2 - |f_a-f_n|^2) using the loop forward."""
    total = 0.0
    for a, p, n in zip(anchors, positives, negatives):
        fa = triplet_forward_oracle(w1, b1, w2, b2, a)
        fp = triplet_forward_oracle(w1, b1, w2, b2, p)
        fn = triplet_forward_oracle(w1, b1, w2, b2, n)
        d_ap = sum((x - y) ** 2 for x, y in zip(fa, fp))
        d_an = sum((x - y) ** 2 for x, y in zip(fa, fn))
        total += max(0.0, margin + d_ap - d_an)
    return total


def auc_pairs_oracle(scores, labels):
    """All positive/negative pairs; ties count one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    num = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                num += 1.0
            elif p == n:
                num += 0.5
    return num / (len(pos) * len(neg))


def svm_primal_oracle(x, y, c, steps=200_000, bias_scale=1.0, seed=0):
    """Best primal value found by projected subgradient descent.

    The objective is 1-strongly convex, so the classic 2/(t+2) schedule
    converges; the best value along the trajectory is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    xa = np.concatenate([x, np.full((n, 1), bias_scale)], axis=1)
    w = np.zeros(xa.shape[1])
    best = _primal_value(w, xa, y, c)
    for t in range(steps):
        margins = y * (xa @ w)
        viol = margins < 1.0
        grad = w - c * (y[viol, None] * xa[viol]).sum(axis=0)
        w = w - (2.0 / (t + 2.0)) * grad
        val = _primal_value(w, xa, y, c)
        if val < best:
            best = val
    return best


def _primal_value(w, xa, y, c):
    margins = y * (xa @ w)
    return float(0.5 * (w @ w) + c * np.sum(np.maximum(0.0, 1.0 - margins)))


def bilinear_oracle(src, out_h, out_w):
    """Per-pixel bilinear resample with half-pixel centers, scalar math."""
    h, w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = (i + 0.5) * (h / out_h) - 0.5
            sx = (j + 0.5) * (w / out_w) - 0.5
            y0 = min(max(int(math.floor(sy)), 0), h - 1)
            x0 = min(max(int(math.floor(sx)), 0), w - 1)
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            wy = min(max(sy - y0, 0.0), 1.0)
            wx = min(max(sx - x0, 0.0), 1.0)
            top = src[y0, x0] * (1 - wx) + src[y0, x1] * wx
            bot = src[y1, x0] * (1 - wx) + src[y1, x1] * wx
            out[i, j] = top * (1 - wy) + bot * wy
    return out


def conv_net_oracle(crop, k1, b1, k2, b2, wf, bf):
    """Scalar forward of the small conv net: 3x3 same-pad conv, ReLU, 2x2
    max-pool, twice, then a dense logit."""

    def conv(x, k, b):
        c_out, c_in, _, _ = k.shape
        h, w = x.shape[1], x.shape[2]
        out = np.zeros((c_out, h, w))
        for o in range(c_out):
            for i in range(h):
                for j in range(w):
                    acc = b[o]
                    for ci in range(c_in):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < w:
                                    acc += k[o, ci, di, dj] * x[ci, ii, jj]
                    out[o, i, j] = acc
        return out

    def pool(x):
        c, h, w = x.shape
        out = np.zeros((c, h // 2, w // 2))
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ci, i, j] = max(
                        x[ci, 2 * i, 2 * j], x[ci, 2 * i, 2 * j + 1],
                        x[ci, 2 * i + 1, 2 * j], x[ci, 2 * i + 1, 2 * j + 1],
                    )
        return out

    a1 = np.maximum(conv(crop[None, :, :], k1, b1), 0.0)
    p1 = pool(a1)
    a2 = np.maximum(conv(p1, k2, b2), 0.0)
    p2 = pool(a2)
    flat = p2.reshape(-1)
    return float(flat @ wf + bf)


def score_map_oracle(positions, scores, height, width):
    """Per-pixel mean over covering windows, round-half-up to uint8."""
    out = np.zeros((height, width), dtype=np.uint8)
    for py in range(height):
        for px in range(width):
            cover = []
            for rect, s in zip(positions, scores):
                if rect.x <= px < rect.x + rect.w and rect.y <= py < rect.y + rect.h:
                    cover.append(s)
            if cover:
                out[py, px] = int(math.floor(255.0 * (sum(cover) / len(cover)) + 0.5))
    return out


def grad_check(fun, params, analytic, eps=1e-6):
    """Max relative error between analytic grads and central differences.

    fun() evaluates the loss with the current (mutable) params; analytic is
    the list of gradient arrays aligned with params.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            keep = flat_p[i]
            flat_p[i] = keep + eps
            up = fun()
            flat_p[i] = keep - eps
            down = fun()
            flat_p[i] = keep
            numeric = (up - down) / (2 * eps)
            denom = max(abs(numeric), abs(flat_g[i]), 1e-8)
            worst = max(worst, abs(numeric - flat_g[i]) / denom)
    return worst
