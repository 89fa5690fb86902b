"""Exact combinatorial answers recovered from a normalized attention oracle.

The oracle only returns normalized outputs D^-1 exp(QK^T) V.  A threshold
test `S_i >= c_i ?` on the unnormalized row sums S_i = sum_j exp(Q_i.K_j) is
obtained by prepending a key whose score is exactly ln c_i and a value
column that is 0 on that key and 1 elsewhere: the output is S_i/(c_i + S_i).
A parallel binary search over c_i = (1+eps)^(f-1) then estimates every S_i
to a constant factor, one oracle call per round.  On top of that:

* max_ip scales K by C ln n so S_i is dominated by n^(C max_j a_i.b_j) and
  the maximum is read off the exponent;
* ov_large_entries scales by sqrt|ln k| so orthogonal pairs contribute 1 and
  all other pairs at most k;
* ov_parity uses base-2 scores so row sums are integers whose parity counts
  orthogonal partners, with random subsampling to expose odd counts.

An oracle is any callable oracle(Q, K, V, eps) (see core.exact_oracle and
attnd.approx_oracle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import as_matrix, entry_bound


@dataclass(frozen=True)
class VectorSet:
    vectors: np.ndarray
    entry_kind: str = "integer"  # "binary" or "integer"
    entry_bound: float | None = None

    def __post_init__(self):
        M = as_matrix(self.vectors, "vectors")
        object.__setattr__(self, "vectors", M)
        if self.entry_kind not in ("binary", "integer"):
            raise ValueError(f"unknown entry kind {self.entry_kind!r}")
        if not np.all(M == np.round(M)):
            raise ValueError("vector entries must be integers")
        if self.entry_kind == "binary" and not np.all((M == 0) | (M == 1)):
            raise ValueError("binary vector set has entries outside {0, 1}")
        bound = entry_bound(M) if self.entry_bound is None else self.entry_bound
        if entry_bound(M) > bound:
            raise ValueError(f"entry exceeds bound {bound}")
        object.__setattr__(self, "entry_bound", float(bound))

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def _vectors(S, kind):
    if isinstance(S, VectorSet):
        if kind == "binary" and S.entry_kind != "binary":
            VectorSet(S.vectors, "binary")  # validates
        return S.vectors
    return VectorSet(S, kind).vectors


@dataclass(frozen=True)
class RowSumEstimate:
    estimates: np.ndarray  # (1+eps)^f_i
    log_estimates: np.ndarray  # f_i * ln(1+eps)
    exponents: np.ndarray  # f_i
    eps: float
    rounds_used: int
    search_range: tuple  # (f_lo, f_hi) before padding


# ------------------------------------------------------------ row sums


def augmented_inputs(Q, K, log_c):
    """Q' = [[ln c | Q], [0 | 0]], K' = [[1 | 0], [0 | K]], V' = [0; 1; ...; 1].

    Row i < n of Q'K'^T is [ln c_i, Q_i K^T]; the last row is all zero.
    """
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    n, d = Q.shape
    log_c = np.asarray(log_c, dtype=np.float64).ravel()
    Qa = np.zeros((n + 1, d + 1))
    Qa[:n, 0] = log_c
    Qa[:n, 1:] = Q
    Ka = np.zeros((n + 1, d + 1))
    Ka[0, 0] = 1.0
    Ka[1:, 1:] = K
    Va = np.ones((n + 1, 1))
    Va[0, 0] = 0.0
    return Qa, Ka, Va


def _indicator_log(Q, K, log_c, oracle, eps):
    Qa, Ka, Va = augmented_inputs(Q, K, log_c)
    out = np.asarray(oracle(Qa, Ka, Va, eps / 100.0), dtype=np.float64)
    return out[: Q.shape[0], 0] >= 0.5


def threshold_indicator(Q, K, c, oracle, eps: float = 0.1) -> np.ndarray:
    """b_i = 1 if S_i >= (1+eps) c_i, b_i = 0 if S_i <= (1-eps) c_i (either
    answer in between), from one oracle call at error eps/100."""
    c = np.asarray(c, dtype=np.float64).ravel()
    if np.any(~(c > 0)) or not np.all(np.isfinite(c)):
        raise ValueError("thresholds c_i must be positive and finite")
    return _indicator_log(Q, K, np.log(c), oracle, eps)


def estimate_row_sums(Q, K, eps: float, oracle) -> RowSumEstimate:
    """Estimate S_i = sum_j exp(Q_i.K_j) with S_i < est_i <= (1+eps)^2 (1+eps/25) S_i.

    Parallel binary search for the smallest f with indicator 0 at
    c = (1+eps)^(f-1).  The top of the range is never queried: there
    c >= (1+eps) max S and the oracle error eps/100 forces a 0.
    """
    if not (0.0 < eps <= 0.25):
        raise ValueError(f"eps must lie in (0, 1/4], got {eps}")
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    n, d = Q.shape
    if K.shape != (n, d):
        raise ValueError(f"K must be {n}x{d}, got {K.shape}")
    # |Q_i.K_j| <= d max|Q| max|K|, which is at most d B^2
    span = d * entry_bound(Q) * entry_bound(K)
    lstep = math.log1p(eps)
    f_lo = math.floor((math.log(n) - span) / lstep)
    f_hi = math.ceil((math.log(n) + span) / lstep)
    lo = np.full(n, f_lo, dtype=np.int64)
    hi = np.full(n, f_hi + 2, dtype=np.int64)
    rounds = 0
    while True:
        act = lo < hi
        if not act.any():
            break
        mid = (lo + hi) // 2
        b = _indicator_log(Q, K, (mid - 1) * lstep, oracle, eps)
        rounds += 1
        hi = np.where(act & ~b, mid, hi)
        lo = np.where(act & b, mid + 1, lo)
    logs = hi * lstep
    with np.errstate(over="ignore"):
        est = np.exp(logs)
    return RowSumEstimate(est, logs, hi, eps, rounds, (f_lo, f_hi))


# ------------------------------------------------------------ Max-IP


MAX_IP_EPS = 0.1
MAX_IP_ROWSUM_EPS = MAX_IP_EPS / 4  # 4x slack keeps estimates within (1 +- 0.1)


def max_ip_scale(n: int, eps: float = MAX_IP_EPS) -> int:
    """Smallest integer C with 0.5C > 1 + log_n(1+eps) and -0.5C < log_n(1-eps)."""
    ln = math.log(n)
    C = 1
    while not (0.5 * C > 1 + math.log1p(eps) / ln and -0.5 * C < math.log1p(-eps) / ln):
        C += 1
    return C


def max_ip(A, B_set, oracle):
    """Per-row maxima M_i = max_j a_i.b_j and the global maximum."""
    Av = _vectors(A, "integer")
    Bv = _vectors(B_set, "integer")
    n = Av.shape[0]
    if Bv.shape[0] != n or Bv.shape[1] != Av.shape[1]:
        raise ValueError(f"sets must have equal shapes, got {Av.shape} and {Bv.shape}")
    if n < 2:
        raise ValueError("need n >= 2 (log base n); compute n = 1 directly")
    C = max_ip_scale(n)
    k = math.log(n)
    est = estimate_row_sums(Av, k * C * Bv, MAX_IP_ROWSUM_EPS, oracle)
    M = np.floor(est.log_estimates / k / C + 0.5).astype(np.int64)
    return M, int(M.max())


# ------------------------------------------------------------ OV


OV_LARGE_C = 0.5
OV_LARGE_EPS = 0.25


def _check_pair(Av, Bv):
    if Av.shape != Bv.shape:
        raise ValueError(f"sets must have equal shapes, got {Av.shape} and {Bv.shape}")


def ov_large_entries(A, B_set, oracle) -> bool:
    """Orthogonal pair exists iff some row sum of exp(-|ln k| A B^T) reaches 1 - c."""
    Av = _vectors(A, "binary")
    Bv = _vectors(B_set, "binary")
    _check_pair(Av, Bv)
    n = Av.shape[0]
    c = OV_LARGE_C
    k = (1 - c) / (2 * n * (1 + c))
    s = math.sqrt(abs(math.log(k)))
    est = estimate_row_sums(-s * Av, s * Bv, OV_LARGE_EPS, oracle)
    return bool(np.any(est.estimates >= 1 - c))


def ov_parity(A, B_set, oracle, seed: int = 0, rounds: int | None = None) -> bool:
    """Orthogonal pair search through parities of integer row sums.

    Each round keeps every b independently with probability 1/2, pads with
    all-ones vectors, and reads S_i = sum_j 2^(a_i.b_j); S_i is odd exactly
    when a_i has an odd number of orthogonal partners in the sample.
    """
    Av = _vectors(A, "binary")
    Bv = _vectors(B_set, "binary")
    _check_pair(Av, Bv)
    n, d = Av.shape
    if n * 2.0**d >= 2.0**53:
        raise ValueError("n * 2^d must stay below 2^53 for exact integer row sums")
    if np.any(~Av.any(axis=1)):
        return True
    if rounds is None:
        rounds = max(1, math.ceil(10 * math.log2(n))) if n > 1 else 1
    # estimates satisfy 0 < est - S <= 2.1 eps S and S <= n 2^d, so the
    # additive error stays below 1/2
    eps = 1.0 / (8.0 * n * 2.0**d)
    # scores ln2 * a.b so that exp gives 2^(a.b); only Q carries the ln 2
    Q = math.log(2.0) * Av
    for r in range(rounds):
        rng = np.random.Generator(np.random.Philox(key=[seed, r]))
        keep = rng.random(n) < 0.5
        Bs = np.ones((n, d))
        Bs[: int(keep.sum())] = Bv[keep]
        est = estimate_row_sums(Q, Bs, eps, oracle)
        S = np.rint(est.estimates).astype(np.int64)
        if np.any(S % 2 == 1):
            return True
    return False


# ------------------------------------------------------------ brute force


def brute_force_max_ip(A, B_set):
    M = (as_matrix(A) @ as_matrix(B_set).T).max(axis=1)
    return np.rint(M).astype(np.int64), int(np.rint(M.max()))


def brute_force_ov(A, B_set) -> bool:
    return bool(np.any(as_matrix(A) @ as_matrix(B_set).T == 0))
