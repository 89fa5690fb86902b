"""Approximate attention for head dimension 1.

Both algorithms keep, for each query q_i, only the keys whose score lies
within L = log(n/eps') of the row maximum (the relevant window) and replace
exp on that window by something cheap:

* `rounding_attention_1d` rounds every relevant score up to a grid of width
  log(1+eps') and sums each grid cell with prefix sums;
* `vector_attention` replaces exp by the certified polynomial P on [0, L] and
  evaluates sum_j P(q k_j - c) v_j from precomputed moments.

Keys are sorted in descending order, so for q >= 0 the relevant keys form a
prefix.  Moments are stored for aligned dyadic blocks of that order, each
expanded about its own smallest key; a prefix of length J splits into one
block per set bit of J.  Expanding about the block minimum keeps every term
of the binomial expansion non-negative, which avoids the catastrophic
cancellation of expanding (q k_j - c)^b about the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AttnParams, entry_bound
from .exppoly import build_exp_poly, horner, shifted_coeffs

LEAF_BITS = 3  # prefixes shorter than 2**LEAF_BITS are summed point by point
MAX_BUCKET_WORK = 2_000_000


@dataclass(frozen=True)
class RelevanceWindow:
    """Per-row shift c and relevant-prefix length over descending keys.

    The relevant keys of row i are k_desc[first_relevant : count_relevant[i]],
    and first_relevant is always 0 because the order is descending.
    """

    c: np.ndarray
    count_relevant: np.ndarray
    first_relevant: int = 0


def window_width(n: int, eps_internal: float) -> float:
    return math.log(n / eps_internal)


def relevance_windows(q, k_desc, L: float) -> RelevanceWindow:
    """Relevant window of every q_i >= 0 against descending keys."""
    q = np.asarray(q, dtype=np.float64)
    top = q * k_desc[0]
    c = top - L
    # nudge c up until the largest relevant offset is <= L as computed
    bad = top - c > L
    while bad.any():
        c[bad] = np.nextafter(c[bad], np.inf)
        bad = top - c > L
    n = k_desc.size
    lo = np.zeros(q.size, np.int64)
    hi = np.full(q.size, n, np.int64)
    while True:
        act = lo < hi
        if not act.any():
            break
        mid = (lo + hi) // 2
        inside = q * k_desc[np.minimum(mid, n - 1)] >= c
        lo = np.where(act & inside, mid + 1, lo)
        hi = np.where(act & ~inside, mid, hi)
    return RelevanceWindow(c=c, count_relevant=lo)


def build_phi_tables(k_sorted, v_sorted, g: int):
    """Prefix tables phi[J, b] = sum_{j<J} k_j^b and phi_v[J, b] = sum_{j<J} k_j^b v_j.

    Row J = 0 is the empty prefix, so phi[J, 0] = J.
    """
    k = np.asarray(k_sorted, dtype=np.float64)
    v = np.asarray(v_sorted, dtype=np.float64)
    pw = k[:, None] ** np.arange(g + 1)
    vv = pw * v[:, None] if v.ndim == 1 else pw[:, :, None] * v[:, None, :]
    zero_p = np.zeros((1,) + pw.shape[1:])
    zero_v = np.zeros((1,) + vv.shape[1:])
    phi = np.concatenate([zero_p, np.cumsum(pw, axis=0)])
    phi_v = np.concatenate([zero_v, np.cumsum(vv, axis=0)])
    return phi, phi_v


def _split_signs(q, k, v, params, one_sided):
    """Run a q >= 0 routine on (|q|, k) and (|q|, -k); zero rows are uniform."""
    q = np.asarray(q, dtype=np.float64).ravel()
    k = np.asarray(k, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64)
    n = q.size
    if n == 0:
        raise ValueError("attention over an empty sequence is undefined (n = 0)")
    if k.size != n or v.shape[0] != n:
        raise ValueError(f"length mismatch: q {q.size}, k {k.size}, v {v.shape[0]}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
        raise ValueError("inputs contain NaN or Inf")
    params.check(q, k, v)
    out = np.empty(v.shape)
    pos = q > 0
    neg = q < 0
    zero = ~(pos | neg)
    if zero.any():
        out[zero] = v.mean(axis=0)
    if pos.any():
        out[pos] = one_sided(q[pos], k, v, params)
    if neg.any():
        out[neg] = one_sided(-q[neg], -k, v, params)
    return out


# ---------------------------------------------------------------- rounding


def rounding_attention_1d(q, k, v, params: AttnParams) -> np.ndarray:
    """Bucket-rounding approximation: relevant scores are rounded up to the
    grid log(1+eps') * Z and each bucket is summed from prefix sums."""
    return _split_signs(q, k, v, params, _rounding_one_sided)


def _rounding_one_sided(q, k, v, params):
    n = k.size
    eps1 = params.eps_internal
    L = window_width(n, eps1)
    step = math.log1p(eps1)
    order = np.argsort(-k, kind="stable")
    kd = k[order]
    vd = v[order]
    win = relevance_windows(q, kd, L)
    phi, phi_v = build_phi_tables(kd, vd, 0)
    count = phi[:, 0]
    vsum = phi_v[:, 0]
    buckets = int(math.floor(L / step)) + 1
    num = np.zeros((q.size,) + v.shape[1:])
    den = np.zeros(q.size)
    J = win.count_relevant
    # rows with short windows: round each relevant key on its own
    short = np.flatnonzero(J <= buckets)
    if short.size:
        rr = np.repeat(short, J[short])
        offs = np.arange(rr.size) - np.repeat(np.cumsum(J[short]) - J[short], J[short])
        x = q[rr] * kd[offs] - win.c[rr]
        w = np.exp((np.floor(x / step) + 1.0) * step - L)
        den += np.bincount(rr, weights=w, minlength=q.size)
        num += _bincount_rows(rr, w, vd[offs], q.size)
    # rows with long windows: locate every bucket edge by binary search
    long_rows = np.flatnonzero(J > buckets)
    if long_rows.size:
        if buckets > MAX_BUCKET_WORK:
            raise ValueError(
                f"rounding needs {buckets} buckets per row; raise eps or use poly1d"
            )
        edges = np.arange(buckets + 1) * step
        chunk = max(1, MAX_BUCKET_WORK // (buckets + 1))
        rep = np.exp((np.arange(buckets) + 1.0) * step - L)
        for s in range(0, long_rows.size, chunk):
            rows = long_rows[s:s + chunk]
            qc = q[rows][:, None]
            cc = win.c[rows][:, None]
            # pos[r, m] = number of keys with offset >= edges[m]
            lo = np.zeros((rows.size, buckets + 1), np.int64)
            hi = np.broadcast_to(J[rows][:, None], lo.shape).copy()
            while True:
                act = lo < hi
                if not act.any():
                    break
                mid = (lo + hi) // 2
                inside = qc * kd[np.minimum(mid, n - 1)] - cc >= edges
                lo = np.where(act & inside, mid + 1, lo)
                hi = np.where(act & ~inside, mid, hi)
            cnt = count[lo[:, :-1]] - count[lo[:, 1:]]
            den[rows] = cnt @ rep
            vs = vsum[lo[:, :-1]] - vsum[lo[:, 1:]]
            num[rows] = np.tensordot(rep, vs, axes=([0], [1])) if vs.ndim == 3 else vs @ rep
    return num / _col(den, num)


def _bincount_rows(rr, w, vals, R):
    if vals.ndim == 1:
        return np.bincount(rr, weights=w * vals, minlength=R)
    out = np.empty((R, vals.shape[1]))
    for t in range(vals.shape[1]):
        out[:, t] = np.bincount(rr, weights=w * vals[:, t], minlength=R)
    return out


def _col(x, like):
    return x.reshape(x.shape + (1,) * (like.ndim - 1))


# -------------------------------------------------------------- polynomial


class BlockMoments:
    """Moments of dyadic blocks of descending keys about each block minimum.

    For level l >= LEAF_BITS and block m (positions [m 2^l, (m+1) 2^l)) with
    minimum key kmin and width w, store
        M[m, b, 0] = sum_j u_j^b,   M[m, b, 1+t] = sum_j u_j^b v_{j,t},
    where u_j = (k_j - kmin) / w lies in [0, 1].
    """

    def __init__(self, kd: np.ndarray, vd: np.ndarray, g: int):
        n = kd.size
        vals = np.concatenate([np.ones((n, 1)), vd.reshape(n, -1)], axis=1)
        self.levels = {}
        lev = LEAF_BITS
        while (1 << lev) <= n:
            s = 1 << lev
            nb = n >> lev
            blk = kd[: nb * s].reshape(nb, s)
            kmin = blk[:, -1]
            w = blk[:, 0] - kmin
            w = np.where(w > 0, w, 1.0)
            u = (blk - kmin[:, None]) / w[:, None]
            vb = vals[: nb * s].reshape(nb, s, -1)
            M = np.empty((nb, g + 1, vals.shape[1]))
            pw = np.ones_like(u)
            for b in range(g + 1):
                M[:, b, :] = np.einsum("ms,mst->mt", pw, vb)
                pw *= u
            self.levels[lev] = (kmin, w, M)
            lev += 1


def one_sided_attention(q, k, v, params: AttnParams) -> np.ndarray:
    """Polynomial-method attention for rows with q_i > 0 (single pass)."""
    q = np.asarray(q, dtype=np.float64).ravel()
    if np.any(q <= 0):
        raise ValueError("one_sided_attention needs strictly positive queries")
    k = np.asarray(k, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64)
    params.check(q, k, v)
    return _poly_one_sided(q, k, v, params)


def _poly_one_sided(q, k, v, params):
    n = k.size
    eps1 = params.eps_internal
    L = window_width(n, eps1)
    P = build_exp_poly(0.0, L, min(eps1, 0.05))
    order = np.argsort(-k, kind="stable")
    kd = k[order]
    vd = v[order].reshape(n, -1)
    win = relevance_windows(q, kd, L)
    c = win.c
    J = win.count_relevant
    mom = BlockMoments(kd, vd, P.degree)
    acc = np.zeros((q.size, 1 + vd.shape[1]))
    bvec = np.arange(P.degree + 1)
    for lev, (kmin, w, M) in mom.levels.items():
        rows = np.flatnonzero((J >> lev) & 1)
        if rows.size == 0:
            continue
        blk = (J[rows] >> (lev + 1)) << 1
        a = q[rows] * kmin[blk] - c[rows]
        z = q[rows] * w[blk]
        coef = shifted_coeffs(P, a) * z[:, None] ** bvec
        acc[rows] += np.einsum("rb,rbt->rt", coef, M[blk])
    # leftover positions below the smallest block size
    low = J & ((1 << LEAF_BITS) - 1)
    rows = np.flatnonzero(low)
    if rows.size:
        rr = np.repeat(rows, low[rows])
        pos = np.repeat(J[rows] - low[rows], low[rows])
        pos = pos + np.arange(rr.size) - np.repeat(np.cumsum(low[rows]) - low[rows], low[rows])
        x = q[rr] * kd[pos] - c[rr]
        px = horner(P.coeffs, x)
        acc[:, 0] += np.bincount(rr, weights=px, minlength=q.size)
        acc[:, 1:] += _bincount_rows(rr, px, vd[pos], q.size).reshape(q.size, -1)
    if np.any(acc[:, 0] <= 0):
        raise ArithmeticError("non-positive softmax denominator; polynomial certification breached")
    out = acc[:, 1:] / acc[:, :1]
    return out.reshape((q.size,) + v.shape[1:])


def vector_attention(q, k, v, params: AttnParams) -> np.ndarray:
    """Polynomial-method attention for d = 1 with sign splitting."""
    return _split_signs(q, k, v, params, _poly_one_sided)


def params_1d(q, k, v, eps: float) -> AttnParams:
    return AttnParams(n=np.size(q), d=1, B=entry_bound(q, k, v), eps=eps)
