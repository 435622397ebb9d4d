"""Slow reference implementations written with explicit Python loops.

None of these touch ``edlm.tensor``; they are the independent side of the
equivalence tests.
"""
import math

import numpy as np


def matmul_loops(a, b):
    p, q = a.shape
    q2, r = b.shape
    assert q == q2
    out = np.zeros((p, r))
    for i in range(p):
        for j in range(r):
            s = 0.0
            for k in range(q):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def softmax_visible(row, mask):
    vals = [row[j] for j in range(len(row)) if mask[j]]
    denom = sum(math.exp(v) for v in vals)
    return [math.exp(row[j]) / denom if mask[j] else 0.0 for j in range(len(row))]


def rms_norm_vec(x, gain, eps):
    ms = sum(v * v for v in x) / len(x)
    r = 1.0 / math.sqrt(ms + eps)
    return [x[i] * r * gain[i] for i in range(len(x))]


def rotate(vec, pos, base, pi_scale):
    dh = len(vec)
    half = dh // 2
    out = list(vec)
    for j in range(half):
        theta = (pos / pi_scale) * base ** (-2.0 * j / dh)
        c, s = math.cos(theta), math.sin(theta)
        a, b = vec[j], vec[j + half]
        out[j] = a * c - b * s
        out[j + half] = b * c + a * s
    return out


def project(x, w, lo, hi):
    return [sum(x[k] * w[k, c] for k in range(len(x))) for c in range(lo, hi)]


def merged_attention_loops(X, H, wq, wk, wv, wo, q_gain, k_gain, n_q_heads, n_kv_heads,
                           window, base, pi_scale, dec_pos, enc_pos, eps=1e-6, probs_out=None):
    """Per-element merged attention: one query row and one key column at a time."""
    m, d = X.shape
    n = H.shape[0]
    dh = len(q_gain)
    group = n_q_heads // n_kv_heads
    rows = [X[i] for i in range(m)] + [H[j] for j in range(n)]
    kpos = list(dec_pos) + list(enc_pos)
    out = np.zeros((m, d))
    for h in range(n_q_heads):
        g = h // group
        keys, vals = [], []
        for j in range(m + n):
            k = rms_norm_vec(project(rows[j], wk, g * dh, (g + 1) * dh), k_gain, eps)
            keys.append(rotate(k, kpos[j], base, pi_scale))
            vals.append(project(rows[j], wv, g * dh, (g + 1) * dh))
        for i in range(m):
            q = rms_norm_vec(project(X[i], wq, h * dh, (h + 1) * dh), q_gain, eps)
            q = rotate(q, dec_pos[i], base, pi_scale)
            scores, mask = [], []
            for j in range(m + n):
                if j < m:
                    vis = j <= i and (window is None or i - j < window)
                else:
                    vis = True
                mask.append(vis)
                scores.append(sum(q[c] * keys[j][c] for c in range(dh)) / math.sqrt(dh) if vis else 0.0)
            vis_scores = [s for s, v in zip(scores, mask) if v]
            mx = max(vis_scores)
            e = [math.exp(s - mx) if v else 0.0 for s, v in zip(scores, mask)]
            z = sum(e)
            p = [x / z for x in e]
            if probs_out is not None:
                probs_out[(h, i)] = p
            a = [sum(p[j] * vals[j][c] for j in range(m + n)) for c in range(dh)]
            for c_out in range(d):
                out[i, c_out] += sum(a[c] * wo[h * dh + c, c_out] for c in range(dh))
    return out


def average_loops(arrays):
    k = len(arrays)
    flat = [a.reshape(-1) for a in arrays]
    out = np.zeros(flat[0].size)
    for i in range(out.size):
        s = 0.0
        for f in flat:
            s += float(f[i])
        out[i] = s / k
    return out.reshape(arrays[0].shape)
