"""Gradient of the attention regression loss

    L(X) = 1/2 || f(X) h - E ||_F^2,   f(X) = softmax_rows(A1 X A2^T),  h = A3 Y,

by dense evaluation and by a reduction to attention-oracle calls.

With c = f h - E and G = c h^T, the derivative with respect to the scores
S = A1 X A2^T is dL/dS = f o G - diag(r) f where r_i = sum_l f_il G_il
= sum_p c_ip (f h)_ip, hence

    dL/dX = A1^T (f o (c h^T)) A2 - A1^T diag(r) f A2.

The oracle route never forms f: with C5 = f h,
    (f o (f h h^T)) A2 = sum_p (f (h_p o_r A2)) o_r (C5)_p,
    (f o (E h^T)) A2   = sum_p (f (h_p o_r A2)) o_r E_p,
    diag(r) f A2       = r o_r (f A2),
where o_r scales rows.  That is one call for C5, one per column p, and one
for f A2: d + 2 calls in total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_matrix, entry_bound, softmax_weights

C_RED = 64.0


@dataclass(frozen=True)
class GradInstance:
    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray
    E: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    B: float
    eps: float

    def __post_init__(self):
        for name in ("A1", "A2", "A3", "E", "Y", "X"):
            object.__setattr__(self, name, as_matrix(getattr(self, name), name))
        n, d = self.A1.shape
        for name in ("A2", "A3", "E"):
            if getattr(self, name).shape != (n, d):
                raise ValueError(f"{name} must be {n}x{d}, got {getattr(self, name).shape}")
        for name in ("X", "Y"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        actual = entry_bound(self.A1, self.A2, self.A3, self.E, self.Y)
        if actual > self.B:
            raise ValueError(f"entry {actual} exceeds declared bound B={self.B}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def n(self) -> int:
        return self.A1.shape[0]

    @property
    def d(self) -> int:
        return self.A1.shape[1]

    @property
    def eps2(self) -> float:
        return self.eps / (C_RED * self.n * self.d * max(self.B, 1.0) ** 3)

    @classmethod
    def random(cls, rng, n: int, d: int, B: float = 1.0, eps: float = 1e-3,
               x_scale: float = 1.0) -> "GradInstance":
        u = lambda *s: rng.uniform(-B, B, s)
        return cls(u(n, d), u(n, d), u(n, d), u(n, d), u(d, d),
                   rng.uniform(-x_scale, x_scale, (d, d)), B, eps)

    def with_X(self, X) -> "GradInstance":
        return GradInstance(self.A1, self.A2, self.A3, self.E, self.Y, X, self.B, self.eps)

    def with_E(self, E) -> "GradInstance":
        B = max(self.B, entry_bound(E))
        return GradInstance(self.A1, self.A2, self.A3, E, self.Y, self.X, B, self.eps)


def scores_softmax(inst: GradInstance) -> np.ndarray:
    return softmax_weights(inst.A1 @ inst.X, inst.A2)


def loss(inst: GradInstance) -> float:
    f = scores_softmax(inst)
    h = inst.A3 @ inst.Y
    R = f @ h - inst.E
    return 0.5 * float(np.sum(R * R))


def exact_gradient(inst: GradInstance) -> np.ndarray:
    """dL/dX by dense n x n evaluation."""
    f = scores_softmax(inst)
    h = inst.A3 @ inst.Y
    fh = f @ h
    c = fh - inst.E
    r = np.sum(c * fh, axis=1)
    dS = f * (c @ h.T) - r[:, None] * f
    return inst.A1.T @ dS @ inst.A2


def kron_terms(inst: GradInstance, oracle=None):
    """Row-scaled formulations of the two product terms and their parts.

    Returns (B1, B2, C5, C7) where C7[p] = f (h_p o_r A2).  With no oracle the
    attention products are formed densely.
    """
    QX = inst.A1 @ inst.X
    h = inst.A3 @ inst.Y
    if oracle is None:
        f = softmax_weights(QX, inst.A2)
        att = lambda V, tag: f @ V
    else:
        att = lambda V, tag: _call(oracle, QX, inst.A2, V, inst.eps2, tag)
    C5 = att(h, "f h")
    B1 = np.zeros_like(inst.A2)
    B2 = np.zeros_like(inst.A2)
    C7 = []
    for p in range(inst.d):
        C7p = att(h[:, p:p + 1] * inst.A2, f"f (h_{p} o A2)")
        C7.append(C7p)
        B1 += C7p * C5[:, p:p + 1]
        B2 += C7p * inst.E[:, p:p + 1]
    return B1, B2, C5, C7


def approx_gradient(inst: GradInstance, oracle) -> np.ndarray:
    """dL/dX from d + 2 oracle calls at additive error eps2 each."""
    B1, B2, C5, _ = kron_terms(inst, oracle)
    c = C5 - inst.E
    r = np.sum(c * C5, axis=1)
    FA = _call(oracle, inst.A1 @ inst.X, inst.A2, inst.A2, inst.eps2, "f A2")
    B3 = r[:, None] * FA
    return inst.A1.T @ (B1 - B2 - B3)


def _call(oracle, Q, K, V, eps, tag):
    try:
        return np.asarray(oracle(Q, K, V, eps), dtype=np.float64)
    except Exception as exc:
        raise RuntimeError(f"attention oracle failed computing {tag}: {exc}") from exc


def finite_difference_gradient(inst: GradInstance, step: float = 1e-5) -> np.ndarray:
    """Central differences of `loss` in every entry of X."""
    g = np.zeros_like(inst.X)
    for i in range(inst.d):
        for j in range(inst.d):
            Xp = inst.X.copy()
            Xm = inst.X.copy()
            Xp[i, j] += step
            Xm[i, j] -= step
            g[i, j] = (loss(inst.with_X(Xp)) - loss(inst.with_X(Xm))) / (2 * step)
    return g
