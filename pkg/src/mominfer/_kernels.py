"""Fixed-order float32 kernels.

Every reduction runs in ascending index order with separate multiply and add
(no fast-math, no FMA contraction), and every output row depends only on its
own input row. Splitting rows across calls therefore never changes a bit.
"""

import math

import numpy as np
from numba import njit

_F0 = np.float32(0.0)
_F1 = np.float32(1.0)
_NEG_INF = np.float32(-np.inf)

# query rows per attention block / keys per online-softmax tile
_Q_BLOCK = 64
_K_TILE = 64
# below this many queries the key tile is not worth transposing
_SMALL_BLOCK = 4


@njit(cache=True, nogil=True)
def matmul_into(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    i = 0
    while i + 4 <= m:
        r0 = out[i]
        r1 = out[i + 1]
        r2 = out[i + 2]
        r3 = out[i + 3]
        for j in range(n):
            r0[j] = _F0
            r1[j] = _F0
            r2[j] = _F0
            r3[j] = _F0
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            bp = b[p]
            for j in range(n):
                bj = bp[j]
                r0[j] += a0 * bj
                r1[j] += a1 * bj
                r2[j] += a2 * bj
                r3[j] += a3 * bj
        i += 4
    while i < m:
        r0 = out[i]
        for j in range(n):
            r0[j] = _F0
        for p in range(k):
            a0 = a[i, p]
            bp = b[p]
            for j in range(n):
                r0[j] += a0 * bp[j]
        i += 1


@njit(cache=True, nogil=True)
def rmsnorm_into(x, gain, eps, out):
    m, d = x.shape
    inv_d = np.float32(d)
    for i in range(m):
        ss = _F0
        for j in range(d):
            ss += x[i, j] * x[i, j]
        rms = np.float32(math.sqrt(ss / inv_d + eps))
        for j in range(d):
            out[i, j] = x[i, j] / rms * gain[j]


@njit(cache=True, nogil=True)
def rope_inplace(x, n_heads, head_dim, start, theta):
    m = x.shape[0]
    half = head_dim // 2
    for i in range(m):
        pos = float(start + i)
        for j in range(half):
            freq = math.pow(theta, -2.0 * j / head_dim)
            ang = pos * freq
            c = np.float32(math.cos(ang))
            s = np.float32(math.sin(ang))
            for h in range(n_heads):
                o = h * head_dim + 2 * j
                x0 = x[i, o]
                x1 = x[i, o + 1]
                x[i, o] = x0 * c - x1 * s
                x[i, o + 1] = x0 * s + x1 * c


@njit(cache=True, nogil=True)
def swish_gate_inplace(gate, up):
    m, n = gate.shape
    for i in range(m):
        for j in range(n):
            g = gate[i, j]
            sig = _F1 / (_F1 + np.exp(-g))
            gate[i, j] = g * sig * up[i, j]


@njit(cache=True, nogil=True, inline="always")
def _block_matmul(a, b, out, m, k, n):
    # matmul_into restricted to the leading m x k / k x n corners of scratch tiles
    i = 0
    while i + 4 <= m:
        r0 = out[i]
        r1 = out[i + 1]
        r2 = out[i + 2]
        r3 = out[i + 3]
        for j in range(n):
            r0[j] = _F0
            r1[j] = _F0
            r2[j] = _F0
            r3[j] = _F0
        for p in range(k):
            a0 = a[i, p]
            a1 = a[i + 1, p]
            a2 = a[i + 2, p]
            a3 = a[i + 3, p]
            bp = b[p]
            for j in range(n):
                bj = bp[j]
                r0[j] += a0 * bj
                r1[j] += a1 * bj
                r2[j] += a2 * bj
                r3[j] += a3 * bj
        i += 4
    while i < m:
        r0 = out[i]
        for j in range(n):
            r0[j] = _F0
        for p in range(k):
            a0 = a[i, p]
            bp = b[p]
            for j in range(n):
                r0[j] += a0 * bp[j]
        i += 1


@njit(cache=True, nogil=True, inline="always")
def _dot_keys(qrow, kc, t0, nt, ko, head_dim, srow):
    # eight independent ascending-d chains at a time
    jj = 0
    while jj + 8 <= nt:
        k0 = kc[t0 + jj]
        k1 = kc[t0 + jj + 1]
        k2 = kc[t0 + jj + 2]
        k3 = kc[t0 + jj + 3]
        k4 = kc[t0 + jj + 4]
        k5 = kc[t0 + jj + 5]
        k6 = kc[t0 + jj + 6]
        k7 = kc[t0 + jj + 7]
        a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = _F0
        for d in range(head_dim):
            qd = qrow[d]
            c = ko + d
            a0 += qd * k0[c]
            a1 += qd * k1[c]
            a2 += qd * k2[c]
            a3 += qd * k3[c]
            a4 += qd * k4[c]
            a5 += qd * k5[c]
            a6 += qd * k6[c]
            a7 += qd * k7[c]
        srow[jj] = a0
        srow[jj + 1] = a1
        srow[jj + 2] = a2
        srow[jj + 3] = a3
        srow[jj + 4] = a4
        srow[jj + 5] = a5
        srow[jj + 6] = a6
        srow[jj + 7] = a7
        jj += 8
    while jj < nt:
        k0 = kc[t0 + jj]
        a0 = _F0
        for d in range(head_dim):
            a0 += qrow[d] * k0[ko + d]
        srow[jj] = a0
        jj += 1


@njit(cache=True, nogil=True)
def causal_attention_into(q, kc, vc, start, n_heads, n_kv_heads, head_dim, out):
    """Streaming-softmax causal attention for query rows at ``start + i``.

    Keys are visited in ascending position in tiles aligned to absolute
    multiples of the tile width, so a query's result depends only on its own
    position and the cache contents, never on which rows share the call.
    """
    n = q.shape[0]
    group = n_heads // n_kv_heads
    scale = np.float32(1.0 / math.sqrt(head_dim))
    qb = np.empty((_Q_BLOCK, head_dim), np.float32)
    kt = np.empty((head_dim, _K_TILE), np.float32)
    vt = np.empty((_K_TILE, head_dim), np.float32)
    s = np.empty((_Q_BLOCK, _K_TILE), np.float32)
    mx = np.empty(_Q_BLOCK, np.float32)
    lsum = np.empty(_Q_BLOCK, np.float32)
    acc = np.empty((_Q_BLOCK, head_dim), np.float32)
    for h in range(n_heads):
        qo = h * head_dim
        ko = (h // group) * head_dim
        for b0 in range(0, n, _Q_BLOCK):
            nb = min(_Q_BLOCK, n - b0)
            for qi in range(nb):
                mx[qi] = _NEG_INF
                lsum[qi] = _F0
                for d in range(head_dim):
                    acc[qi, d] = _F0
                    qb[qi, d] = q[b0 + qi, qo + d]
            last = start + b0 + nb - 1
            for t0 in range(0, last + 1, _K_TILE):
                nt = min(_K_TILE, last + 1 - t0)
                if nb >= _SMALL_BLOCK:
                    for jj in range(nt):
                        for d in range(head_dim):
                            kt[d, jj] = kc[t0 + jj, ko + d]
                            vt[jj, d] = vc[t0 + jj, ko + d]
                    _block_matmul(qb, kt, s, nb, head_dim, nt)
                else:
                    # few queries: read keys in place rather than transposing a tile
                    for qi in range(nb):
                        _dot_keys(qb[qi], kc, t0, nt, ko, head_dim, s[qi])
                for qi in range(nb):
                    pos = start + b0 + qi
                    if t0 > pos:
                        continue
                    hi = min(nt, pos + 1 - t0)
                    srow = s[qi]
                    mt = _NEG_INF
                    for jj in range(hi):
                        v = srow[jj] * scale
                        srow[jj] = v
                        if v > mt:
                            mt = v
                    m_old = mx[qi]
                    m_new = m_old if m_old > mt else mt
                    corr = np.exp(m_old - m_new)
                    tot = lsum[qi] * corr
                    for jj in range(hi):
                        p = np.exp(srow[jj] - m_new)
                        srow[jj] = p
                        tot += p
                    lsum[qi] = tot
                    mx[qi] = m_new
                    arow = acc[qi]
                    for d in range(head_dim):
                        arow[d] *= corr
                    if nb >= _SMALL_BLOCK:
                        for jj in range(hi):
                            p = srow[jj]
                            vrow = vt[jj]
                            for d in range(head_dim):
                                arow[d] += p * vrow[d]
                    else:
                        for jj in range(hi):
                            p = srow[jj]
                            vrow = vc[t0 + jj]
                            for d in range(head_dim):
                                arow[d] += p * vrow[ko + d]
            for qi in range(nb):
                for d in range(head_dim):
                    out[b0 + qi, qo + d] = acc[qi, d] / lsum[qi]
