"""Slow, obviously-correct reference implementations used by the tests."""
import itertools

import numpy as np


def conv2d_direct(x, w, b=None, stride=1, pad=0):
    """Nested-loop cross-correlation, NCHW input, (O, C, kh, kw) kernel."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for r in range(Ho):
                for c in range(Wo):
                    acc = 0.0
                    for ci in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[n, ci, r * stride + i, c * stride + j] * w[o, ci, i, j]
                    out[n, o, r, c] = acc + (0.0 if b is None else b[o])
    return out


def conv_transpose2d_direct(x, w, b=None, stride=2, pad=1):
    """Scatter every input pixel times the kernel, then crop ``pad``."""
    B, C, H, W = x.shape
    _, O, kh, kw = w.shape
    full = np.zeros((B, O, (H - 1) * stride + kh, (W - 1) * stride + kw))
    for n in range(B):
        for ci in range(C):
            for r in range(H):
                for c in range(W):
                    for o in range(O):
                        full[n, o, r * stride:r * stride + kh, c * stride:c * stride + kw] += x[n, ci, r, c] * w[ci, o]
    out = full[:, :, pad:full.shape[2] - pad, pad:full.shape[3] - pad]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def max_pool_direct(x, k=2):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // k, W // k))
    for n, ch, r, c in itertools.product(range(B), range(C), range(H // k), range(W // k)):
        out[n, ch, r, c] = max(x[n, ch, r * k + i, c * k + j] for i in range(k) for j in range(k))
    return out


def boundary_direct(mask):
    m = np.asarray(mask).astype(bool)
    H, W = m.shape
    out = np.zeros_like(m)
    for r in range(H):
        for c in range(W):
            if not m[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W and not m[rr, cc]:
                    out[r, c] = True
    return out


def distance_brute(mask):
    """O(N^2) scan for the nearest boundary pixel."""
    b = np.argwhere(boundary_direct(mask))
    H, W = np.shape(mask)
    out = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            out[r, c] = min(np.sqrt((r - br) ** 2 + (c - bc) ** 2) for br, bc in b)
    return out


def dice_count(gt, mp):
    g = [bool(v) for v in np.ravel(gt)]
    m = [bool(v) for v in np.ravel(mp)]
    inter = sum(1 for a, b in zip(g, m) if a and b)
    total = sum(g) + sum(m)
    return 1.0 if total == 0 else 2.0 * inter / total


def adam_single_step(p, g, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat = m / (1 - b1)
    vhat = v / (1 - b2)
    return p - lr * mhat / (np.sqrt(vhat) + eps)


def ahe_reference(img, tiles, bins):
    """Unclipped adaptive equalization with bilinear blending of tile maps,
    written pixel by pixel."""
    H, W = img.shape
    ty, tx = tiles
    ys = np.linspace(0, H, ty + 1).round().astype(int)
    xs = np.linspace(0, W, tx + 1).round().astype(int)
    idx = np.minimum((img * bins).astype(int), bins - 1)
    luts = {}
    for a in range(ty):
        for b in range(tx):
            t = idx[ys[a]:ys[a + 1], xs[b]:xs[b + 1]]
            hist = np.array([np.sum(t == k) for k in range(bins)], dtype=float)
            luts[a, b] = None if np.count_nonzero(hist) <= 1 else np.cumsum(hist) / hist.sum()
    cy = [(ys[a] + ys[a + 1] - 1) / 2 for a in range(ty)]
    cx = [(xs[b] + xs[b + 1] - 1) / 2 for b in range(tx)]

    def locate(p, centers):
        if p <= centers[0]:
            return 0, 0, 0.0
        if p >= centers[-1]:
            return len(centers) - 1, len(centers) - 1, 0.0
        for k in range(len(centers) - 1):
            if centers[k] <= p <= centers[k + 1]:
                return k, k + 1, (p - centers[k]) / (centers[k + 1] - centers[k])

    out = np.zeros_like(img)
    for r in range(H):
        a0, a1, fa = locate(r, cy)
        for c in range(W):
            b0, b1, fb = locate(c, cx)

            def val(a, b):
                lut = luts[a, b]
                return img[r, c] if lut is None else lut[idx[r, c]]

            out[r, c] = ((1 - fa) * (1 - fb) * val(a0, b0) + (1 - fa) * fb * val(a0, b1)
                         + fa * (1 - fb) * val(a1, b0) + fa * fb * val(a1, b1))
    return out


def gibbs_energy_direct(labels, unary, pos, inten, w1, w2, ta, tb, tg):
    n = len(labels)
    e = sum(unary[i, labels[i]] for i in range(n))
    for i in range(n):
        for j in range(i + 1, n):
            if labels[i] != labels[j]:
                dp = np.sum((pos[i] - pos[j]) ** 2)
                di = (inten[i] - inten[j]) ** 2
                e += w1 * np.exp(-dp / (2 * ta ** 2) - di / (2 * tb ** 2)) + w2 * np.exp(-dp / (2 * tg ** 2))
    return e
