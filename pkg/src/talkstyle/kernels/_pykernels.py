"""Reference NumPy implementations of the hot kernels.

The compiled module ``_ckernels`` exports the same functions with identical
signatures; ``talkstyle.kernels`` picks one at import time.
"""
import numpy as np


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd


def layer_norm_backward(g, xhat, rstd, gamma):
    d = xhat.shape[-1]
    dxhat = g * gamma
    dx = rstd * (
        dxhat
        - dxhat.sum(axis=-1, keepdims=True) / d
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    )
    g2 = g.reshape(-1, d)
    return dx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)


def attention_forward(q, k, v, bias, n_heads, scale):
    """Multi-head scaled dot-product attention on head-interleaved columns.

    q: (n, H*dk), k: (m, H*dk), v: (m, H*dv), bias: (n, m) or None.
    Returns the (n, H*dv) output and the (H, n, m) attention weights.
    """
    n, m = q.shape[0], k.shape[0]
    dk = q.shape[1] // n_heads
    dv = v.shape[1] // n_heads
    qh = q.reshape(n, n_heads, dk).transpose(1, 0, 2)
    kh = k.reshape(m, n_heads, dk).transpose(1, 0, 2)
    vh = v.reshape(m, n_heads, dv).transpose(1, 0, 2)
    s = (qh @ kh.transpose(0, 2, 1)) * scale
    if bias is not None:
        s = s + bias
    peak = s.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(peak)):
        raise FloatingPointError("degenerate attention row: every key is masked")
    e = np.exp(s - peak)
    p = e / e.sum(axis=-1, keepdims=True)
    out = (p @ vh).transpose(1, 0, 2).reshape(n, n_heads * dv)
    return out, p


def attention_backward(g, q, k, v, p, n_heads, scale):
    n, m = q.shape[0], k.shape[0]
    dk = q.shape[1] // n_heads
    dv = v.shape[1] // n_heads
    qh = q.reshape(n, n_heads, dk).transpose(1, 0, 2)
    kh = k.reshape(m, n_heads, dk).transpose(1, 0, 2)
    vh = v.reshape(m, n_heads, dv).transpose(1, 0, 2)
    gh = g.reshape(n, n_heads, dv).transpose(1, 0, 2)
    dp = gh @ vh.transpose(0, 2, 1)
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
    dq = (ds @ kh).transpose(1, 0, 2).reshape(n, n_heads * dk)
    dkk = (ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(m, n_heads * dk)
    dvv = (p.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(m, n_heads * dv)
    return dq, dkk, dvv


def dtw_accumulate(cost):
    """Lexicographic (cost, length) DTW over an (n, m) frame-cost matrix.

    Steps are (1,0), (0,1), (1,1). Among equal-cost alignments the one with
    fewer steps wins. Returns (total cost, path length in cells).
    """
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    length = np.zeros((n, m), dtype=np.int64)
    for i in range(n):
        for j in range(m):
            c = cost[i, j]
            if i == 0 and j == 0:
                acc[0, 0] = c
                length[0, 0] = 1
                continue
            best, blen = np.inf, 0
            for pi, pj in ((i - 1, j - 1), (i - 1, j), (i, j - 1)):
                if pi < 0 or pj < 0:
                    continue
                a, ln = acc[pi, pj], length[pi, pj]
                if a < best or (a == best and ln < blen):
                    best, blen = a, ln
            acc[i, j] = c + best
            length[i, j] = blen + 1
    return float(acc[n - 1, m - 1]), int(length[n - 1, m - 1])
