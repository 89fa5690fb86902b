"""Dense reference attention, parameters, rank factorization and matrix I/O.

Matrices are plain 2-D float64 numpy arrays; `as_matrix` validates and
normalizes inputs at API boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return `a` as a finite 2-D float64 array (a 1-D input becomes a column)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains NaN or Inf")
    return m


def entry_bound(*mats) -> float:
    """Largest absolute entry over all given arrays (0 for empty input)."""
    return max((float(np.max(np.abs(m))) if np.size(m) else 0.0) for m in mats)


def check_qkv(Q, K, V):
    Q = as_matrix(Q, "Q")
    K = as_matrix(K, "K")
    V = as_matrix(V, "V")
    n = Q.shape[0]
    if n == 0:
        raise ValueError("attention over an empty sequence is undefined (n = 0)")
    if K.shape[0] != n or V.shape[0] != n:
        raise ValueError(f"row counts differ: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"Q and K widths differ: {Q.shape[1]} vs {K.shape[1]}")
    if Q.shape[1] < 1:
        raise ValueError("head dimension must be at least 1")
    return Q, K, V


@dataclass(frozen=True)
class AttnParams:
    """Entry bound and target additive error for one attention instance.

    `eps_internal` is the per-stage error used inside the approximation
    algorithms; the final additive error is at most 7*max(B,1)*eps_internal.
    """

    n: int
    d: int
    B: float
    eps: float

    def __post_init__(self):
        if not (0.0 < self.eps < 0.5):
            raise ValueError(f"eps must lie in (0, 1/2), got {self.eps}")
        if self.B < 0 or not math.isfinite(self.B):
            raise ValueError(f"entry bound must be finite and >= 0, got {self.B}")

    @property
    def eps_internal(self) -> float:
        return self.eps / (7.0 * max(self.B, 1.0))

    @classmethod
    def for_instance(cls, Q, K, V, eps: float, B: float | None = None) -> "AttnParams":
        """Params for a concrete instance; B defaults to the actual max entry."""
        Q, K, V = check_qkv(Q, K, V)
        actual = entry_bound(Q, K, V)
        if B is None:
            B = actual
        elif actual > B:
            raise ValueError(f"entry {actual} exceeds declared bound B={B}")
        return cls(n=Q.shape[0], d=Q.shape[1], B=float(B), eps=float(eps))

    def check(self, Q, K, V) -> None:
        actual = entry_bound(Q, K, V)
        if actual > self.B:
            raise ValueError(f"entry {actual} exceeds declared bound B={self.B}")


EXACT_CHUNK_ENTRIES = 1 << 24  # rows of Q are processed in blocks of <= this many scores


def softmax_weights(Q, K) -> np.ndarray:
    """Row-stochastic weight matrix D^-1 exp(Q K^T), stabilized per row."""
    S = as_matrix(Q, "Q") @ as_matrix(K, "K").T
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=1, keepdims=True)
    return S


def exact_attention(Q, K, V) -> np.ndarray:
    """Reference attention D^-1 exp(Q K^T) V with per-row max subtraction."""
    Q, K, V = check_qkv(Q, K, V)
    n = Q.shape[0]
    step = max(1, EXACT_CHUNK_ENTRIES // n)
    if step >= n:
        return _exact_block(Q, K, V)
    out = np.empty((n, V.shape[1]))
    for s in range(0, n, step):
        out[s:s + step] = _exact_block(Q[s:s + step], K, V)
    return out


def _exact_block(Q, K, V):
    S = Q @ K.T
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    return (S @ V) / S.sum(axis=1, keepdims=True)


def uniform_attention(V, n_rows: int) -> np.ndarray:
    """Output when every score is equal: each row is the column mean of V."""
    return np.repeat(V.mean(axis=0, keepdims=True), n_rows, axis=0)


def max_abs_diff(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(A - B)))


@dataclass(frozen=True)
class RankFactorization:
    U: np.ndarray  # n x r
    V: np.ndarray  # d x r

    @property
    def r(self) -> int:
        return self.U.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.U @ self.V.T


def rank_factorize(A, tol: float = 1e-9) -> RankFactorization:
    """Factor A = U V^T with column-pivoted QR; rank is the count of pivots
    with |R_kk| > tol * |R_00|."""
    A = as_matrix(A, "A")
    n, d = A.shape
    if tol <= 0:
        raise ValueError("tol must be positive")
    if A.size == 0 or not np.any(A):
        return RankFactorization(np.zeros((n, 0)), np.zeros((d, 0)))
    q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    r = int(np.sum(diag > tol * diag[0]))
    Vt = np.zeros((r, d))
    Vt[:, piv] = R[:r, :]
    return RankFactorization(q[:, :r].copy(), Vt.T.copy())


def load_matrix(path) -> np.ndarray:
    """Read a headerless comma-separated matrix; errors name the bad line."""
    rows = []
    width = None
    lines = Path(path).read_text().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            raise ValueError(f"{path}: line {lineno}: empty row")
        try:
            vals = [float(tok) for tok in line.split(",")]
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: non-numeric token") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ValueError(
                f"{path}: line {lineno}: expected {width} columns, got {len(vals)}"
            )
        rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    return as_matrix(np.array(rows, dtype=np.float64))


def store_matrix(M, path) -> None:
    M = as_matrix(M)
    # repr of a Python float is the shortest string that round-trips exactly
    lines = [",".join(repr(float(x)) for x in row) for row in M]
    Path(path).write_text("\n".join(lines) + "\n")


# --- attention oracles -----------------------------------------------------
# An oracle is any callable oracle(Q, K, V, eps) -> n x m array within eps of
# exact_attention(Q, K, V) (V may have any number of columns).


def exact_oracle(Q, K, V, eps: float | None = None) -> np.ndarray:
    return exact_attention(Q, K, V)


class CountingOracle:
    """Wraps an oracle and counts its invocations."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def __call__(self, Q, K, V, eps):
        self.calls += 1
        return self.inner(Q, K, V, eps)
