"""Pure-numpy reference kernels.

Every function here has a numba twin in ``numba_impl`` with the same
signature and the same outputs up to floating point round-off.
"""
import numpy as np


def iir_filter(b, a, x):
    """Direct-form II transposed recursion along the last axis, zero state."""
    b = np.asarray(b, dtype=np.float64) / a[0]
    a = np.asarray(a, dtype=np.float64) / a[0]
    x = np.asarray(x, dtype=np.float64)
    n = len(b)
    y = np.empty_like(x)
    z = np.zeros(x.shape[:-1] + (n - 1,))
    for t in range(x.shape[-1]):
        xt = x[..., t]
        yt = b[0] * xt + z[..., 0]
        for i in range(n - 2):
            z[..., i] = b[i + 1] * xt + z[..., i + 1] - a[i + 1] * yt
        z[..., n - 2] = b[n - 1] * xt - a[n - 1] * yt
        y[..., t] = yt
    return y


def pairwise_sqdist(z):
    sq = np.sum(z * z, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def mine_hard(d, labels):
    """Hardest positive and hardest negative per anchor (-1 when absent)."""
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)
    pos_mask = same & ~eye
    neg_mask = ~same
    dp = np.where(pos_mask, d, -np.inf)
    dn = np.where(neg_mask, d, np.inf)
    # argmax/argmin return the first extreme index: lowest-index tie break
    pos = np.argmax(dp, axis=1)
    neg = np.argmin(dn, axis=1)
    pos[~pos_mask.any(axis=1)] = -1
    neg[~neg_mask.any(axis=1)] = -1
    return pos, neg


def mine_semihard(d, labels, margin):
    """Hardest positive; closest negative inside the semi-hard band.

    Falls back to the hardest negative when the band is empty.
    """
    pos, hard_neg = mine_hard(d, labels)
    n = len(labels)
    neg = hard_neg.copy()
    same = labels[:, None] == labels[None, :]
    for i in range(n):
        if pos[i] < 0 or hard_neg[i] < 0:
            continue
        dap = d[i, pos[i]]
        band = (~same[i]) & (d[i] > dap) & (d[i] < dap + margin)
        if band.any():
            cand = np.where(band, d[i], np.inf)
            neg[i] = int(np.argmin(cand))
    return pos, neg


def mine_second_negative(d, labels, anchors, negs):
    """For each (anchor, negative k) choose l minimising d(l, k).

    l must carry a label different from both the anchor's and k's.
    """
    out = np.full(len(anchors), -1, dtype=np.int64)
    for r in range(len(anchors)):
        i, k = anchors[r], negs[r]
        if k < 0:
            continue
        ok = (labels != labels[i]) & (labels != labels[k])
        if ok.any():
            out[r] = int(np.argmin(np.where(ok, d[k], np.inf)))
    return out
