"""Certified polynomial approximations of exp on a bounded interval.

The polynomial is the Taylor series of exp about the interval's left end,
truncated at the smallest degree that passes a dense-grid relative-error
check, and stored in the monomial basis.  With lo = 0 (the only case the
attention code uses) every coefficient is 1/k! > 0, so Horner evaluation for
x >= 0 and the shifted expansions used downstream involve no cancellation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

MAX_DEGREE = 256
GRID_POINTS = 10_000
# degree <= DEGREE_SLACK * max(log(1/eps) / max(1, log(log(1/eps)/W)), W) + DEGREE_SLACK
DEGREE_SLACK = 4


@dataclass(frozen=True)
class ExpPoly:
    coeffs: tuple  # m_0..m_g, ascending degree
    lo: float
    hi: float
    eps_rel: float
    certified_error: float = float("nan")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, x):
        return horner(self.coeffs, x)


def horner(coeffs, x):
    x = np.asarray(x, dtype=np.float64)
    acc = np.full(x.shape, float(coeffs[-1]))
    for c in reversed(coeffs[:-1]):
        acc = acc * x + c
    return acc if acc.ndim else float(acc)


def eval_poly(P: ExpPoly, x):
    """Horner value of P at x (scalar or array)."""
    return P(x)


def monomial_coeffs(P: ExpPoly) -> list[float]:
    return list(P.coeffs)


def degree_estimate(width: float, eps_rel: float) -> float:
    """Asymptotic degree scale max(log(1/eps)/max(1, log(log(1/eps)/W)), W)."""
    le = math.log(1.0 / eps_rel)
    denom = max(1.0, math.log(le / width)) if width > 0 else 1.0
    return max(le / denom, width)


def _taylor_monomials(lo: float, g: int) -> tuple:
    """Monomial coefficients of e^lo * sum_{k<=g} (x - lo)^k / k!."""
    if lo == 0.0:
        return tuple(float(Fraction(1, math.factorial(k))) for k in range(g + 1))
    a = Fraction(lo)
    facts = [math.factorial(k) for k in range(g + 1)]
    out = []
    for j in range(g + 1):
        s = sum(
            Fraction(math.comb(k, j)) * (-a) ** (k - j) / facts[k]
            for k in range(j, g + 1)
        )
        out.append(float(s) * math.exp(lo))
    return tuple(out)


def _grid_error(coeffs, lo, hi) -> float:
    x = np.linspace(lo, hi, GRID_POINTS)
    ex = np.exp(x)
    return float(np.max(np.abs(horner(coeffs, x) - ex) / ex))


@lru_cache(maxsize=256)
def build_exp_poly(lo: float, hi: float, eps_rel: float) -> ExpPoly:
    """Smallest-degree truncated Taylor polynomial certified on a 10^4 grid."""
    lo, hi, eps_rel = float(lo), float(hi), float(eps_rel)
    if not (0.0 < eps_rel < 0.1):
        raise ValueError(f"eps_rel must lie in (0, 0.1), got {eps_rel}")
    if not (lo < hi):
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    if hi > 700.0 or lo < -700.0:
        raise ValueError(f"interval [{lo}, {hi}] exceeds double-precision exp range")

    def ok(g):
        c = _taylor_monomials(lo, g)
        err = _grid_error(c, lo, hi)
        return err <= eps_rel, c, err

    g = max(1, int(degree_estimate(hi - lo, eps_rel) / 2))
    good = None
    fail = 0
    while good is None:
        g = min(g, MAX_DEGREE)
        passed, c, err = ok(g)
        if passed:
            good = (g, c, err)
        elif g == MAX_DEGREE:
            raise ValueError(
                f"cannot certify exp on [{lo}, {hi}] to {eps_rel} below degree {MAX_DEGREE}"
            )
        else:
            fail = g
            g *= 2
    # bisect down to the smallest certified degree in (fail, good]
    hi_g = good[0]
    while hi_g - fail > 1:
        mid = (hi_g + fail) // 2
        passed, c, err = ok(mid)
        if passed:
            hi_g, good = mid, (mid, c, err)
        else:
            fail = mid
    return ExpPoly(coeffs=good[1], lo=lo, hi=hi, eps_rel=eps_rel, certified_error=good[2])


def shifted_coeffs(P: ExpPoly, a) -> np.ndarray:
    """Taylor coefficients of P about each point a: out[i, b] = P^(b)(a_i) / b!.

    For the lo = 0 Taylor polynomial this is (1/b!) * sum_{s <= g-b} a^s/s!,
    computed in O(g) per point; otherwise the general O(g^2) formula.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    g = P.degree
    if P.lo == 0.0:
        terms = np.empty((a.size, g + 1))
        terms[:, 0] = 1.0
        for r in range(1, g + 1):
            terms[:, r] = terms[:, r - 1] * a / r
        partial = np.cumsum(terms, axis=1)
        inv_fact = np.asarray(P.coeffs)
        return partial[:, ::-1] * inv_fact
    m = np.asarray(P.coeffs)
    H = np.zeros((g + 1, g + 1))
    for b in range(g + 1):
        for s in range(g + 1 - b):
            H[s, b] = m[b + s] * math.comb(b + s, b)
    apow = a[:, None] ** np.arange(g + 1)
    return apow @ H
