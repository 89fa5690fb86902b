import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyattn.exppoly import (
    DEGREE_SLACK,
    ExpPoly,
    build_exp_poly,
    degree_estimate,
    eval_poly,
    monomial_coeffs,
    shifted_coeffs,
)


def naive_eval(coeffs, x):
    return sum(c * x**k for k, c in enumerate(coeffs))


def fresh_rel_error(P, m=1000, seed=0):
    x = np.random.default_rng(seed).uniform(P.lo, P.hi, m)
    return float(np.max(np.abs(eval_poly(P, x) - np.exp(x)) / np.exp(x)))


def test_value_at_zero():
    P = build_exp_poly(0.0, 1.0, 1e-3)
    assert abs(eval_poly(P, 0.0) - 1.0) <= 1e-3


def test_window_for_n1024():
    n, eps = 1024, 1e-3
    P = build_exp_poly(0.0, 2 * math.log(n / eps), eps)
    x = np.linspace(P.lo, P.hi, 10_000)
    assert np.max(np.abs(P(x) - np.exp(x)) / np.exp(x)) <= eps


def test_degree_monotone_in_width():
    assert build_exp_poly(0, 20, 1e-3).degree >= build_exp_poly(0, 5, 1e-3).degree


def test_eval_constant_and_identity():
    assert eval_poly(ExpPoly((2.5,), 0, 1, 0.1), 17.0) == 2.5
    assert eval_poly(ExpPoly((0.0, 1.0), 0, 1, 0.1), 3.0) == 3.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.floats(-2, 2))
def test_horner_matches_power_sum(coeffs, x):
    P = ExpPoly(tuple(coeffs), -2, 2, 0.1)
    ref = naive_eval(coeffs, x)
    scale = sum(abs(c) * abs(x) ** k for k, c in enumerate(coeffs))
    assert abs(eval_poly(P, x) - ref) <= 1e-12 * max(scale, 1e-300) + 1e-300


def test_tiny_interval_constant_term():
    P = build_exp_poly(0.0, 1e-6, 0.05)
    c = monomial_coeffs(P)
    assert abs(c[0] - 1.0) <= 0.05
    assert len(c) == P.degree + 1


def test_coeffs_reproduce_eval():
    P = build_exp_poly(0.0, 8.0, 1e-6)
    for x in (0.0, 1.3, 7.9):
        assert naive_eval(monomial_coeffs(P), x) == pytest.approx(P(x), rel=1e-13)


def test_nonzero_left_end():
    P = build_exp_poly(-3.0, 2.0, 1e-5)
    assert fresh_rel_error(P) <= 1.05e-5


@pytest.mark.parametrize("args", [(0, 1, 0.0), (0, 1, 0.2), (1, 1, 0.01), (0, 800, 0.01)])
def test_invalid_arguments(args):
    with pytest.raises(ValueError):
        build_exp_poly(*args)


def test_certification_failure_is_loud():
    with pytest.raises(ValueError, match="cannot certify"):
        build_exp_poly(0.0, 690.0, 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 60), st.sampled_from([1e-2, 1e-4, 1e-6, 1e-8]))
def test_certified_on_fresh_points(W, eps):
    P = build_exp_poly(0.0, W, eps)
    assert fresh_rel_error(P, seed=int(W * 1000)) <= 1.05 * eps
    assert np.all(P(np.linspace(0, W, 257)) > 0)
    bound = DEGREE_SLACK * degree_estimate(W, eps) + DEGREE_SLACK
    assert P.degree <= bound <= 16 * degree_estimate(W, eps) + 16


def test_deterministic():
    build_exp_poly.cache_clear()
    a = build_exp_poly(0.0, 13.0, 1e-5).coeffs
    build_exp_poly.cache_clear()
    assert build_exp_poly(0.0, 13.0, 1e-5).coeffs == a


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 30), st.integers(0, 6))
def test_shifted_coeffs_are_taylor_of_p(a, b):
    P = build_exp_poly(0.0, 30.0, 1e-6)
    tau = shifted_coeffs(P, [a])[0]
    # P(a + z) == sum_b tau_b z^b
    for z in (0.0, 0.5, 1.7):
        assert naive_eval(tau, z) == pytest.approx(naive_eval(P.coeffs, a + z), rel=1e-11)
    m = P.coeffs
    direct = sum(m[k] * math.comb(k, b) * a ** (k - b) for k in range(b, len(m)))
    assert tau[b] == pytest.approx(direct, rel=1e-11)


def test_shifted_coeffs_general_interval():
    P = build_exp_poly(-1.0, 1.0, 1e-6)
    tau = shifted_coeffs(P, [0.3])[0]
    assert naive_eval(tau, 0.2) == pytest.approx(P(0.5), rel=1e-12)
