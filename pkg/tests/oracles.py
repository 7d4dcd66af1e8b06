"""Brute-force reference implementations, kept deliberately naive and
independent of the production code paths they check."""

import math

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, w, bias=None, stride=1, padding=0):
    b, cin, h, wdt = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for oc in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * stride + ky - padding
                                ix = ox * stride + kx - padding
                                if 0 <= iy < h and 0 <= ix < wdt:
                                    acc += x[bi, ic, iy, ix] * w[oc, ic, ky, kx]
                    if bias is not None:
                        acc += bias[oc]
                    out[bi, oc, oy, ox] = acc
    return out


def maxpool2d_loops(x, k, stride, padding=0):
    b, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.full((b, c, ho, wo), -np.inf)
    for bi in range(b):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h and 0 <= ix < w:
                                best = max(best, x[bi, ci, iy, ix])
                    out[bi, ci, oy, ox] = best
    return out


def attention_loops(tokens, w_q, w_k, w_v, w_o, heads, d_k, d_v):
    """tokens [T, C]; explicit per-head, per-token-pair attention."""
    t, c = tokens.shape
    q = tokens @ w_q
    k = tokens @ w_k
    v = tokens @ w_v
    head_outs = np.zeros((t, heads * d_v))
    for h in range(heads):
        qs = q[:, h * d_k:(h + 1) * d_k]
        ks = k[:, h * d_k:(h + 1) * d_k]
        vs = v[:, h * d_v:(h + 1) * d_v]
        for i in range(t):
            scores = np.array([qs[i] @ ks[j] / math.sqrt(d_k) for j in range(t)])
            scores = np.exp(scores - scores.max())
            weights = scores / scores.sum()
            head_outs[i, h * d_v:(h + 1) * d_v] = sum(
                weights[j] * vs[j] for j in range(t))
    return head_outs @ w_o


def recurrent_unit_steps(x, w_f, b_f, w_r, t_steps):
    """Unrolled recurrence using the loop convolution oracle."""
    drive = conv2d_loops(x, w_f, b_f, stride=1, padding=w_f.shape[2] // 2)
    h = np.maximum(drive, 0.0)
    for _ in range(t_steps):
        h = np.maximum(drive + conv2d_loops(h, w_r, None, stride=1,
                                            padding=w_r.shape[2] // 2), 0.0)
    return x + h


def resample_area_loops(image, dst=28):
    src = image.shape[0]
    scale = src / dst
    out = np.zeros((dst, dst))
    for i in range(dst):
        for j in range(dst):
            acc = 0.0
            for a in range(int(math.floor(i * scale)), int(math.ceil((i + 1) * scale))):
                for b in range(int(math.floor(j * scale)), int(math.ceil((j + 1) * scale))):
                    wa = min(a + 1.0, (i + 1) * scale) - max(float(a), i * scale)
                    wb = min(b + 1.0, (j + 1) * scale) - max(float(b), j * scale)
                    acc += wa * wb * image[a, b]
            out[i, j] = acc / (scale * scale)
    return out


def graph_conv_loops(features, adjacency, w_id, w_adj, slope=0.01):
    """Per-node neighbor-sum message passing."""
    v, d = features.shape
    h = w_id.shape[1]
    out = np.zeros((v, h))
    for i in range(v):
        agg = np.zeros(d)
        for j in range(v):
            agg += adjacency[i, j] * features[j]
        pre = features[i] @ w_id + agg @ w_adj
        out[i] = np.where(pre > 0, pre, slope * pre)
    return out
