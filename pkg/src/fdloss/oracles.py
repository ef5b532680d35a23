"""Naive scalar-loop reference implementations.

These deliberately share no code with the vectorised paths; the test suite
and ``fdloss verify`` compare the two.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_ref(a, b):
    n, k = a.shape
    k2, p = b.shape
    assert k == k2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_ref(x, kern, bias, stride=1, pad=0):
    h, w, c_in = x.shape
    k, _, _, c_out = kern.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow, c_out))
    for oy in range(oh):
        for ox in range(ow):
            for co in range(c_out):
                s = bias[co] if bias is not None else 0.0
                for i in range(k):
                    for j in range(k):
                        y, xx = oy * stride + i - pad, ox * stride + j - pad
                        if 0 <= y < h and 0 <= xx < w:
                            for ci in range(c_in):
                                s += x[y, xx, ci] * kern[i, j, ci, co]
                out[oy, ox, co] = s
    return out


def pool2d_ref(x, window, stride=None, kind="max"):
    stride = stride or window
    h, w, c = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    out = np.zeros((oh, ow, c))
    for oy in range(oh):
        for ox in range(ow):
            for ch in range(c):
                vals = [x[oy * stride + i, ox * stride + j, ch] for i in range(window) for j in range(window)]
                out[oy, ox, ch] = max(vals) if kind == "max" else sum(vals) / len(vals)
    return out


def aggregate_ref(fm):
    h, w, d = fm.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for c in range(d):
                out[y, x] += fm[y, x, c]
    return out


def mask_ref(A):
    h, w = A.shape
    tau = sum(A[y, x] for y in range(h) for x in range(w)) / (h * w)
    out = np.zeros_like(A)
    for y in range(h):
        for x in range(w):
            if A[y, x] > tau:
                out[y, x] = A[y, x]
    return out, tau


def pair_loss_ref(vi, vj, alpha=1.0, beta=10.0, eps=1e-8):
    dot = sum(a * b for a, b in zip(vi, vj))
    ni = math.sqrt(sum(a * a for a in vi))
    nj = math.sqrt(sum(b * b for b in vj))
    d2 = sum((a - b) ** 2 for a, b in zip(vi, vj))
    return alpha * dot / ((ni + eps) * (nj + eps)) + beta * math.exp(-d2)


def cross_entropy_ref(logits, label):
    mx = max(logits)
    z = sum(math.exp(v - mx) for v in logits)
    return -(logits[label] - mx - math.log(z))


def grad_cam_ref(last_conv, head_weight, class_id):
    """Grad-CAM for a global-average-pool + dense head.

    The class-score gradient w.r.t. channel ``c`` at every position is
    ``head_weight[c, class_id] / (h*w)``.
    """
    h, w, d = last_conv.shape
    weights = [head_weight[c, class_id] / (h * w) for c in range(d)]
    cam = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = sum(weights[c] * last_conv[y, x, c] for c in range(d))
            cam[y, x] = max(s, 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else cam


def central_difference(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (``x`` restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g
