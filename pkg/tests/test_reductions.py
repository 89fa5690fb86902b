import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyattn.attnd import approx_oracle
from polyattn.core import CountingOracle, exact_oracle
from polyattn.reductions import (
    VectorSet,
    augmented_inputs,
    brute_force_max_ip,
    brute_force_ov,
    estimate_row_sums,
    max_ip,
    max_ip_scale,
    ov_large_entries,
    ov_parity,
    threshold_indicator,
)


def row_sums(Q, K):
    return np.exp(Q @ K.T).sum(axis=1)


def binary(rng, n, d, p=0.75):
    return (rng.random((n, d)) < p).astype(float)


def plant(rng, A, B):
    i, j = rng.integers(len(A), size=2)
    A[i] = A[i] * (1 - B[j])
    return A


# ---------------------------------------------------------------- indicator


def test_augmented_structure():
    rng = np.random.default_rng(0)
    Q, K = rng.normal(size=(2, 5, 3))
    logc = rng.normal(size=5)
    Qa, Ka, Va = augmented_inputs(Q, K, logc)
    S = Qa @ Ka.T
    np.testing.assert_allclose(S[:5, 0], logc)
    np.testing.assert_allclose(S[:5, 1:], Q @ K.T)
    assert np.all(S[5] == 0)
    assert Va[:, 0].tolist() == [0.0] + [1.0] * 5


def test_threshold_single_entry():
    Q = K = np.zeros((1, 1))
    assert threshold_indicator(Q, K, [0.25], exact_oracle).tolist() == [True]
    assert threshold_indicator(Q, K, [4.0], exact_oracle).tolist() == [False]


def test_threshold_bad_c():
    with pytest.raises(ValueError):
        threshold_indicator(np.zeros((1, 1)), np.zeros((1, 1)), [0.0], exact_oracle)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 3), st.integers(0, 2**31))
def test_threshold_decisive_rows(n, d, seed):
    rng = np.random.default_rng(seed)
    Q, K = rng.uniform(-1, 1, (2, n, d))
    S = row_sums(Q, K)
    c = S * rng.uniform(0.5, 1.5, n)
    b = threshold_indicator(Q, K, c, exact_oracle, eps=0.1)
    hi = S >= 1.1 * c
    lo = S <= 0.9 * c
    assert np.all(b[hi]) and not np.any(b[lo])


# ---------------------------------------------------------------- row sums


def test_rowsums_zeros():
    n, eps = 9, 0.1
    est = estimate_row_sums(np.zeros((n, 2)), np.zeros((n, 2)), eps, exact_oracle)
    assert np.all(est.estimates >= n) and np.all(est.estimates <= (1 + eps) ** 2 * n)


def test_rowsums_single():
    est = estimate_row_sums([[1.0]], [[2.0]], 0.1, exact_oracle)
    assert abs(est.estimates[0] - math.e**2) <= 0.4 * math.e**2


def test_rowsums_eps_range():
    for eps in (0.0, 0.3):
        with pytest.raises(ValueError):
            estimate_row_sums(np.zeros((2, 1)), np.zeros((2, 1)), eps, exact_oracle)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 3), st.floats(0.1, 2.0),
       st.sampled_from([0.25, 0.1, 0.05]), st.integers(0, 2**31))
def test_rowsums_multiplicative(n, d, B, eps, seed):
    rng = np.random.default_rng(seed)
    Q, K = rng.uniform(-B, B, (2, n, d))
    oracle = CountingOracle(exact_oracle)
    est = estimate_row_sums(Q, K, eps, oracle)
    S = row_sums(Q, K)
    assert np.all(est.estimates > S)
    assert np.all(est.estimates <= (1 + eps) ** 2 * (1 + eps / 25) * S)
    assert np.all(np.abs(est.estimates - S) <= 4 * eps * S)
    f_lo, f_hi = est.search_range
    assert oracle.calls == est.rounds_used
    assert est.rounds_used <= math.ceil(math.log2(f_hi - f_lo)) + 2


def test_rowsums_with_approx_oracle():
    rng = np.random.default_rng(1)
    Q, K = rng.uniform(-2, 2, (2, 40, 2))
    est = estimate_row_sums(Q, K, 0.1, approx_oracle)
    S = row_sums(Q, K)
    assert np.all(np.abs(est.estimates - S) <= 0.4 * S)


# ---------------------------------------------------------------- vector sets


def test_vector_set_validation():
    with pytest.raises(ValueError):
        VectorSet([[0.5, 1.0]])
    with pytest.raises(ValueError):
        VectorSet([[2.0, 1.0]], "binary")
    with pytest.raises(ValueError):
        VectorSet([[3.0]], entry_bound=2)
    vs = VectorSet([[1, 0], [0, 1]], "binary")
    assert (vs.n, vs.d, vs.entry_bound) == (2, 2, 1.0)


# ---------------------------------------------------------------- max ip


def test_max_ip_example():
    A = [[1.0, 0.0], [1.0, 0.0]]
    B = [[0.0, 1.0], [1.0, 1.0]]
    M, top = max_ip(A, B, exact_oracle)
    assert M.tolist() == [1, 1] and top == 1


def test_max_ip_zero_set():
    rng = np.random.default_rng(2)
    M, top = max_ip(np.zeros((6, 3)), rng.integers(-3, 4, (6, 3)), exact_oracle)
    assert M.tolist() == [0] * 6 and top == 0


def test_max_ip_scale():
    for n in (2, 10, 1000):
        C = max_ip_scale(n)
        assert 0.5 * C > 1 + math.log1p(0.1) / math.log(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 32), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_max_ip_matches_brute_force(n, d, B, seed):
    rng = np.random.default_rng(seed)
    A, Bs = rng.integers(-B, B + 1, (2, n, d)).astype(float)
    M, top = max_ip(A, Bs, exact_oracle)
    Mb, tb = brute_force_max_ip(A, Bs)
    assert np.array_equal(M, Mb) and top == tb


def test_max_ip_approx_oracle():
    rng = np.random.default_rng(3)
    A, Bs = rng.integers(-2, 3, (2, 16, 2)).astype(float)
    M, _ = max_ip(A, Bs, approx_oracle)
    assert np.array_equal(M, brute_force_max_ip(A, Bs)[0])


def test_max_ip_rejects():
    with pytest.raises(ValueError):
        max_ip([[1.0]], [[1.0]], exact_oracle)
    with pytest.raises(ValueError):
        max_ip(np.zeros((3, 2)), np.zeros((2, 2)), exact_oracle)


# ---------------------------------------------------------------- OV


def test_ov_all_ones():
    A = np.ones((8, 5))
    assert ov_large_entries(A, A, exact_oracle) is False
    assert ov_parity(A, A, exact_oracle, rounds=30) is False


def test_ov_planted():
    rng = np.random.default_rng(4)
    A, B = binary(rng, 20, 8, 0.8), binary(rng, 20, 8, 0.8)
    A = plant(rng, A, B)
    assert brute_force_ov(A, B)
    assert ov_large_entries(A, B, exact_oracle) is True
    assert ov_parity(A, B, exact_oracle, seed=1) is True


def test_ov_parity_zero_row_shortcut():
    o = CountingOracle(exact_oracle)
    A = np.ones((4, 3))
    A[2] = 0
    assert ov_parity(A, np.ones((4, 3)), o) is True
    assert o.calls == 0


def test_ov_parity_deterministic_in_seed():
    rng = np.random.default_rng(5)
    A, B = binary(rng, 16, 6), binary(rng, 16, 6)
    runs = [ov_parity(A, B, exact_oracle, seed=9, rounds=5) for _ in range(2)]
    assert runs[0] == runs[1]


def test_ov_rejects_non_binary():
    with pytest.raises(ValueError):
        ov_large_entries([[2.0]], [[1.0]], exact_oracle)
    with pytest.raises(ValueError):
        ov_parity(np.ones((2, 2)), np.ones((3, 2)), exact_oracle)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 64), st.integers(1, 10), st.integers(0, 2**31), st.booleans())
def test_ov_large_matches_brute_force(n, d, seed, planted):
    rng = np.random.default_rng(seed)
    A, B = binary(rng, n, d), binary(rng, n, d)
    if planted:
        A = plant(rng, A, B)
    assert ov_large_entries(A, B, exact_oracle) == brute_force_ov(A, B)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 32), st.integers(1, 8), st.integers(0, 2**31), st.booleans())
def test_ov_parity_matches_brute_force(n, d, seed, planted):
    rng = np.random.default_rng(seed)
    A, B = binary(rng, n, d), binary(rng, n, d)
    if planted:
        A = plant(rng, A, B)
    assert ov_parity(A, B, exact_oracle, seed=seed % 1000, rounds=60) == brute_force_ov(A, B)
