"""numba-compiled kernels; same contracts as ``numpy_impl``."""
import numpy as np
from numba import njit


@njit(cache=True)
def _iir_2d(b, a, x):
    n = b.shape[0]
    nch, nt = x.shape
    y = np.empty_like(x)
    z = np.zeros(n - 1)
    for c in range(nch):
        for i in range(n - 1):
            z[i] = 0.0
        for t in range(nt):
            xt = x[c, t]
            yt = b[0] * xt + z[0]
            for i in range(n - 2):
                z[i] = b[i + 1] * xt + z[i + 1] - a[i + 1] * yt
            z[n - 2] = b[n - 1] * xt - a[n - 1] * yt
            y[c, t] = yt
    return y


def iir_filter(b, a, x):
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = b / a[0]
    a = a / a[0]
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    return _iir_2d(b, a, flat).reshape(x.shape)


@njit(cache=True)
def pairwise_sqdist(z):
    n, m = z.shape
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(m):
                diff = z[i, k] - z[j, k]
                s += diff * diff
            d[i, j] = s
            d[j, i] = s
    return d


@njit(cache=True)
def mine_hard(d, labels):
    n = labels.shape[0]
    pos = np.full(n, -1, dtype=np.int64)
    neg = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best_p = -np.inf
        best_n = np.inf
        for j in range(n):
            if j == i:
                continue
            if labels[j] == labels[i]:
                if d[i, j] > best_p:
                    best_p = d[i, j]
                    pos[i] = j
            else:
                if d[i, j] < best_n:
                    best_n = d[i, j]
                    neg[i] = j
    return pos, neg


@njit(cache=True)
def mine_semihard(d, labels, margin):
    pos, neg = mine_hard(d, labels)
    n = labels.shape[0]
    for i in range(n):
        if pos[i] < 0 or neg[i] < 0:
            continue
        dap = d[i, pos[i]]
        best = np.inf
        pick = -1
        for j in range(n):
            if labels[j] == labels[i]:
                continue
            dj = d[i, j]
            if dj > dap and dj < dap + margin and dj < best:
                best = dj
                pick = j
        if pick >= 0:
            neg[i] = pick
    return pos, neg


@njit(cache=True)
def mine_second_negative(d, labels, anchors, negs):
    m = anchors.shape[0]
    out = np.full(m, -1, dtype=np.int64)
    n = labels.shape[0]
    for r in range(m):
        i = anchors[r]
        k = negs[r]
        if k < 0:
            continue
        best = np.inf
        for l in range(n):
            if labels[l] == labels[i] or labels[l] == labels[k]:
                continue
            if d[k, l] < best:
                best = d[k, l]
                out[r] = l
    return out
