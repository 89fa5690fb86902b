"""Approximate attention for small head dimension d >= 2, and the low-rank
wrapper that reduces any d to the numerical rank of Q or K.

For row i the keys with Q_i . K_j >= c_i are kept, where
c_i = s_i * log(1+eps') - L, L = log(n/eps'), and s_i is the largest level
such that some key reaches Q_i . K_j >= s_i * log(1+eps').  On those keys exp
is replaced by the certified polynomial P, so the numerator and denominator
become sums of P(Q_i . K_j - c_i) * [1, V_j] over a half-space.

The half-space sums come from a partition tree over K.  A node that lies
entirely inside the half-space is summed from moments stored about one of
its bounding-box corners: for the corner that minimizes Q_i . x over the box,
    P(Q_i.K_j - c_i) = sum_b tau_b(a) (sum_k |Q_ik| w_k u_jk)^b,
with a = Q_i.corner - c_i >= 0, tau_b(a) = P^(b)(a)/b!, and
u_jk = |K_jk - corner_k| / w_k in [0, 1].  Every term is non-negative, so
the multinomial expansion loses no accuracy.  Crossing nodes below a size
threshold, and inside nodes without moments, are summed point by point.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np

from .attn1d import vector_attention
from .core import AttnParams, as_matrix, check_qkv, entry_bound, rank_factorize, uniform_attention
from .exppoly import ExpPoly, build_exp_poly, horner, shifted_coeffs
from .rangesearch import (
    HalfSpace,
    RangeIndex,
    max_projection_levels,
    project,
    project_pairs,
)

MAX_DIM = 8
MEMORY_CAP_BYTES = 2 * 1024**3
ROW_CHUNK = 1024


def exponent_tuples(d: int, g: int) -> np.ndarray:
    """All (l_1..l_d) with sum <= g, ordered by total degree."""
    out = []
    for total in range(g + 1):
        for bars in itertools.combinations(range(total + d - 1), d - 1):
            prev = -1
            t = []
            for b in bars:
                t.append(b - prev - 1)
                prev = b
            t.append(total + d - 1 - prev - 1)
            out.append(t)
    return np.array(out, dtype=np.int64).reshape(-1, d)


def multinomials(tuples: np.ndarray) -> np.ndarray:
    # exact integer arithmetic, rounded once to double
    return np.array(
        [float(math.factorial(int(t.sum())) // math.prod(math.factorial(int(a)) for a in t))
         for t in tuples]
    )


class PhiIndexFamily:
    """Partition tree over K with per-node corner moments of [1, V].

    `unit_index` is the unit-weight RangeIndex over K; its tree is shared.
    """

    def __init__(self, K, V, g: int, leaf_size: int = 8, memory_cap: int = MEMORY_CAP_BYTES):
        K = as_matrix(K, "K")
        V = as_matrix(V, "V")
        n, d = K.shape
        if V.shape[0] != n:
            raise ValueError("K and V row counts differ")
        self.K = K
        self.V = V
        self.d = d
        self.g = g
        self.tuples = exponent_tuples(d, g)
        self.deg = self.tuples.sum(axis=1)
        self.multinom = multinomials(self.tuples)
        T = self.tuples.shape[0]
        self.unit_index = RangeIndex(K, np.ones(n), engine="tree", leaf_size=leaf_size)
        tree = self.tree = self.unit_index.tree
        vals = np.concatenate([np.ones((n, 1)), V], axis=1)[tree.perm]
        self._vals = vals
        width = vals.shape[1]
        # moments pay off once a node holds more points than a moment
        # contraction costs in point evaluations
        self.min_moment_size = max(leaf_size, int(T * (d + 2 + width) / (g + 2 * d)))
        has = tree.size > self.min_moment_size
        self.has_moments = has
        self.terminal = ~has
        slots = np.flatnonzero(has)
        nbytes = slots.size * (1 << d) * T * width * 8
        if nbytes > memory_cap:
            raise MemoryError(
                f"moment tables need {nbytes / 2**30:.1f} GiB (degree {g}, d={d}); "
                "raise eps or lower the entry bound"
            )
        self.slot = np.full(tree.n_nodes, -1, np.int64)
        self.slot[slots] = np.arange(slots.size)
        self.widths = np.where(tree.hi > tree.lo, tree.hi - tree.lo, 1.0)
        self.moments = np.empty((slots.size, 1 << d, T, width))
        for s, v in enumerate(slots):
            pts = tree.points[tree.start[v]:tree.end[v]]
            vv = vals[tree.start[v]:tree.end[v]]
            for sigma in range(1 << d):
                corner = self.corner(v, sigma)
                u = np.abs(pts - corner) / self.widths[v]
                self.moments[s, sigma] = self._monomials(u).T @ vv

    def corner(self, node: int, sigma: int) -> np.ndarray:
        bits = (sigma >> np.arange(self.d)) & 1
        return np.where(bits == 1, self.tree.hi[node], self.tree.lo[node])

    def _monomials(self, u: np.ndarray) -> np.ndarray:
        """Rows of prod_k u_k^{l_k} over the tuple list."""
        pw = u[:, :, None] ** np.arange(self.g + 1)  # (m, d, g+1)
        out = pw[:, 0, self.tuples[:, 0]]
        for k in range(1, self.d):
            out = out * pw[:, k, self.tuples[:, k]]
        return out

    def weighted_sums(self, Q, c, P: ExpPoly) -> np.ndarray:
        """acc[i] = sum over {j : Q_i.K_j >= c_i} of P(Q_i.K_j - c_i) * [1, V_j]."""
        Q = np.asarray(Q, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        acc = np.zeros((Q.shape[0], self._vals.shape[1]))
        for s in range(0, Q.shape[0], ROW_CHUNK):
            sl = slice(s, s + ROW_CHUNK)
            acc[sl] = self._weighted_chunk(Q[sl], c[sl], P)
        return acc

    def _weighted_chunk(self, Q, c, P):
        tree = self.tree
        R = Q.shape[0]
        acc = np.zeros((R, self._vals.shape[1]))
        in_r, in_n, dr, dn = tree.classify(Q, c, aggregated=self.has_moments,
                                           terminal=self.terminal)
        if in_r.size:
            sigma = ((Q[in_r] < 0) * (1 << np.arange(self.d))).sum(axis=1)
            key = in_n * (1 << self.d) + sigma
            order = np.argsort(key, kind="stable")
            key = key[order]
            rows_sorted = in_r[order]
            bounds = np.flatnonzero(np.diff(key)) + 1
            starts = np.concatenate([[0], bounds])
            ends = np.concatenate([bounds, [key.size]])
            for s0, e0 in zip(starts, ends):
                node, sg = divmod(int(key[s0]), 1 << self.d)
                rows = rows_sorted[s0:e0]
                acc[rows] += self._node_contrib(Q[rows], c[rows], node, sg, P)
        if dr.size:
            rr, pos = tree.expand(dr, dn)
            x = project_pairs(tree.points, pos, Q, rr) - c[rr]
            keep = x >= 0
            rr, pos, x = rr[keep], pos[keep], x[keep]
            px = horner(P.coeffs, x)
            for t in range(acc.shape[1]):
                acc[:, t] += np.bincount(rr, weights=px * self._vals[pos, t], minlength=R)
        return acc

    def _node_contrib(self, Qr, cr, node, sigma, P):
        corner = self.corner(node, sigma)
        a = project(Qr, corner) - cr
        a = np.maximum(a, 0.0)
        z = np.abs(Qr) * self.widths[node]
        tau = shifted_coeffs(P, a)
        zp = z[:, :, None] ** np.arange(self.g + 1)
        G = zp[:, 0, self.tuples[:, 0]]
        for k in range(1, self.d):
            G = G * zp[:, k, self.tuples[:, k]]
        W = G * (self.multinom * tau[:, self.deg])
        return W @ self.moments[self.slot[node], sigma]


def phi_query(fam: PhiIndexFamily, t: int, h: HalfSpace, tup) -> float:
    """Origin-centred moment sum_{j in h} prod_k K_jk^{l_k} * V_jt (t = 0: no V)."""
    tup = tuple(int(x) for x in tup)
    if len(tup) != fam.d or min(tup) < 0 or sum(tup) > fam.g:
        raise ValueError(f"tuple {tup} is not in the family (d={fam.d}, g={fam.g})")
    if not 0 <= t <= fam.V.shape[1]:
        raise ValueError(f"column index {t} out of range")
    j = fam.unit_index.members(h)
    w = np.prod(fam.K[j] ** np.array(tup), axis=1)
    if t:
        w = w * fam.V[j, t - 1]
    return float(w.sum())


def assemble_row(i: int, Q_i, c_i: float, P: ExpPoly, fam: PhiIndexFamily) -> np.ndarray:
    """Output row i from the half-space {x : Q_i.x >= c_i} via the expansion."""
    acc = fam.weighted_sums(np.asarray(Q_i, np.float64)[None, :], [c_i], P)[0]
    if not acc[0] > 0:
        raise ArithmeticError(f"row {i}: non-positive denominator {acc[0]}")
    return acc[1:] / acc[0]


def relevance_shifts(fam: PhiIndexFamily, Q, params: AttnParams):
    """Per-row level s_i and shift c_i = s_i log(1+eps') - L."""
    eps1 = params.eps_internal
    step = math.log1p(eps1)
    L = math.log(params.n / eps1)
    # |Q_i.K_j| <= sum_k |Q_ik| max_j |K_jk| <= d B^2
    bound = np.abs(Q) @ np.abs(fam.K).max(axis=0)
    span = np.ceil(bound / step).astype(np.int64) + 1
    if span.max() >= 2**31:
        raise ValueError(
            f"level bracket of {int(span.max())} steps exceeds 2^31; raise eps or lower B"
        )
    s = max_projection_levels(fam.unit_index, Q, step, -span, span)
    if np.any(s < -span) or np.any(s > span):
        raise AssertionError("max projection level fell outside the bracket")
    return s, s * step - L, step, L


def approx_attention(Q, K, V, params: AttnParams | None = None, eps: float | None = None,
                     profile: dict | None = None) -> np.ndarray:
    """Additive-eps approximation of exact_attention for small d."""
    Q, K, V = _check_any_v(Q, K, V)
    if params is None:
        if eps is None:
            raise ValueError("give params or eps")
        params = AttnParams(n=Q.shape[0], d=Q.shape[1], B=entry_bound(Q, K, V), eps=eps)
    params.check(Q, K, V)
    n, d = Q.shape
    if d > MAX_DIM:
        raise ValueError(f"d={d} exceeds the supported maximum {MAX_DIM}; try low_rank_attention")
    t0 = time.perf_counter()
    if d == 1:
        out = vector_attention(Q[:, 0], K[:, 0], V, params)
        if profile is not None:
            profile.update(build_s=0.0, query_s=time.perf_counter() - t0)
        return out
    eps1 = params.eps_internal
    step = math.log1p(eps1)
    L = math.log(n / eps1)
    P = build_exp_poly(0.0, L + 2 * step, min(eps1, 0.05))
    fam = PhiIndexFamily(K, V, P.degree)
    t1 = time.perf_counter()
    _, c, _, _ = relevance_shifts(fam, Q, params)
    acc = fam.weighted_sums(Q, c, P)
    if np.any(acc[:, 0] <= 0):
        raise ArithmeticError("non-positive softmax denominator; polynomial certification breached")
    out = acc[:, 1:] / acc[:, :1]
    if profile is not None:
        profile.update(build_s=t1 - t0, query_s=time.perf_counter() - t1)
    return out


def _check_any_v(Q, K, V):
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    if Q.shape[0] == 0:
        raise ValueError("attention over an empty sequence is undefined (n = 0)")
    if K.shape != Q.shape or V.shape[0] != Q.shape[0]:
        raise ValueError(f"shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    return Q, K, V


def low_rank_attention(Q, K, V, params: AttnParams, tol: float = 1e-9,
                       profile: dict | None = None) -> np.ndarray:
    """Attention through a rank-r rewrite Q'K'^T = QK^T with r = min rank."""
    Q, K, V = check_qkv(*(as_matrix(M) for M in (Q, K, V)))
    fq = rank_factorize(Q, tol)
    fk = rank_factorize(K, tol)
    if fq.r == 0 or fk.r == 0:
        return uniform_attention(V, Q.shape[0])
    if fq.r <= fk.r:
        Qp = fq.U
        Kp = fk.U @ (fk.V.T @ fq.V)
    else:
        Qp = fq.U @ (fq.V.T @ fk.V)
        Kp = fk.U
    inner = AttnParams(n=Q.shape[0], d=Qp.shape[1], B=entry_bound(Qp, Kp, V), eps=params.eps)
    return approx_attention(Qp, Kp, V, inner, profile=profile)


def approx_oracle(Q, K, V, eps: float) -> np.ndarray:
    """Oracle backed by approx_attention, with B taken from the actual inputs."""
    return approx_attention(Q, K, V, eps=eps)
