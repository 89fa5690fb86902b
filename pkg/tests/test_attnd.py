import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyattn.attn1d import vector_attention
from polyattn.attnd import (
    PhiIndexFamily,
    approx_attention,
    approx_oracle,
    assemble_row,
    exponent_tuples,
    low_rank_attention,
    multinomials,
    phi_query,
    relevance_shifts,
)
from polyattn.core import AttnParams, exact_attention, max_abs_diff, softmax_weights
from polyattn.exppoly import build_exp_poly
from polyattn.rangesearch import HalfSpace, project


def rand(n, d, B, seed, m=None):
    rng = np.random.default_rng(seed)
    return (rng.uniform(-B, B, (n, d)), rng.uniform(-B, B, (n, d)),
            rng.uniform(-B, B, (n, d if m is None else m)))


def test_zero_queries():
    _, K, V = rand(100, 2, 3.0, 0)
    out = approx_attention(np.zeros((100, 2)), K, V, AttnParams(100, 2, 3.0, 1e-2))
    assert max_abs_diff(out, np.tile(V.mean(axis=0), (100, 1))) <= 1e-2


def test_single_row():
    Q, K, V = rand(1, 3, 2.0, 1)
    assert max_abs_diff(approx_attention(Q, K, V, eps=0.1), V) < 1e-12


def test_example_512():
    Q, K, V = rand(512, 2, 3.0, 2)
    out = approx_attention(Q, K, V, AttnParams(512, 2, 3.0, 1e-2))
    assert max_abs_diff(out, exact_attention(Q, K, V)) <= 1e-2


def test_value_width_independent_of_d():
    Q, K, V = rand(200, 2, 2.0, 3, m=5)
    assert max_abs_diff(approx_attention(Q, K, V, eps=1e-2), exact_attention(Q, K, V)) <= 1e-2


def test_d1_consistent_with_vector_attention():
    Q, K, V = rand(300, 1, 10.0, 4)
    p = AttnParams(300, 1, 10.0, 1e-2)
    a = approx_attention(Q, K, V, p)
    b = vector_attention(Q[:, 0], K[:, 0], V, p)
    assert max_abs_diff(a, b) <= 2e-2


def test_rejects():
    Q, K, V = rand(4, 2, 1.0, 5)
    with pytest.raises(ValueError):
        approx_attention(Q, K[:3], V, eps=0.1)
    with pytest.raises(ValueError):
        approx_attention(Q, K, V)
    with pytest.raises(ValueError):
        approx_attention(Q, K, V, AttnParams(4, 2, 0.5, 0.1))
    with pytest.raises(ValueError, match="low_rank"):
        approx_attention(*rand(4, 9, 1.0, 5), eps=0.1)


def test_memory_cap():
    _, K, V = rand(2000, 2, 1.0, 6)
    with pytest.raises(MemoryError):
        PhiIndexFamily(K, V, 4, memory_cap=1024)


# ---------------------------------------------------------------- tuples


@pytest.mark.parametrize("d,g", [(1, 5), (2, 7), (3, 4), (4, 3)])
def test_tuple_count(d, g):
    T = exponent_tuples(d, g)
    assert T.shape == (math.comb(g + d, d), d)
    assert len({tuple(t) for t in T}) == T.shape[0]
    assert T.min() >= 0 and T.sum(axis=1).max() == g


def test_multinomials_exact():
    T = np.array([[60, 0], [30, 30], [20, 40], [1, 2]])
    m = multinomials(T)
    assert m[0] == 1.0
    assert m[1] == float(math.comb(60, 30))
    assert m[3] == 3.0
    assert np.all(np.isfinite(multinomials(exponent_tuples(3, 60)[-50:])))


# ---------------------------------------------------------------- phi queries


def test_phi_query_examples():
    rng = np.random.default_rng(7)
    K = rng.normal(size=(80, 2))
    V = rng.normal(size=(80, 2))
    fam = PhiIndexFamily(K, V, 3)
    h = HalfSpace([0.3, -1.2], 0.2)
    inside = project(K, h.normal) >= h.threshold
    assert phi_query(fam, 0, h, (0, 0)) == inside.sum()
    assert phi_query(fam, 0, HalfSpace([1.0, 0.0], 1e9), (0, 0)) == 0
    ref = np.sum(K[inside, 0] * K[inside, 1] * V[inside, 1])
    assert phi_query(fam, 2, h, (1, 1)) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        phi_query(fam, 0, h, (3, 3))


def direct_row(Q_i, c_i, P, K, V):
    x = project(K, Q_i) - c_i
    keep = x >= 0
    w = P(x[keep])
    return (w @ V[keep]) / w.sum()


@pytest.mark.parametrize("d", [2, 3])
def test_assemble_row_matches_direct_loop(d):
    rng = np.random.default_rng(8 + d)
    n = 3000
    K = rng.uniform(-2, 2, (n, d))
    V = rng.uniform(-2, 2, (n, 2))
    P = build_exp_poly(0.0, 12.0, 1e-6)
    fam = PhiIndexFamily(K, V, P.degree)
    assert fam.has_moments.any()
    for _ in range(25):
        q = rng.uniform(-2, 2, d)
        c = project(K, q).max() - rng.uniform(2, 12)
        got = assemble_row(0, q, c, P, fam)
        want = direct_row(q, c, P, K, V)
        np.testing.assert_allclose(got, want, rtol=1e-8, atol=1e-10)


def test_assemble_single_relevant_point():
    rng = np.random.default_rng(9)
    K = rng.uniform(-1, 1, (50, 2))
    V = rng.uniform(-1, 1, (50, 2))
    q = np.array([1.0, 0.5])
    proj = project(K, q)
    j = int(np.argmax(proj))
    P = build_exp_poly(0.0, 5.0, 1e-4)
    fam = PhiIndexFamily(K, V, P.degree)
    row = assemble_row(0, q, proj[j], P, fam)
    assert max_abs_diff(row, V[j]) <= 2 * 1e-4 * 1.0


def test_assemble_zero_query_uniform():
    _, K, V = rand(60, 2, 1.0, 10)
    P = build_exp_poly(0.0, 5.0, 1e-4)
    fam = PhiIndexFamily(K, V, P.degree)
    row = assemble_row(0, np.zeros(2), -1.0, P, fam)
    assert max_abs_diff(row, V.mean(axis=0)) <= 1e-12


# ---------------------------------------------------------------- invariants


def window_check(Q, K, V, params):
    fam = PhiIndexFamily(K, V, 1)
    _, c, step, L = relevance_shifts(fam, Q, params)
    S = Q @ K.T
    f = softmax_weights(Q, K)
    rel = S >= c[:, None]
    mass = np.where(rel, 0.0, f).sum(axis=1)
    offs = np.where(rel, S - c[:, None], np.nan)
    return mass, offs, step, L


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.sampled_from([2, 3]), st.sampled_from([1.0, 3.0, 10.0]),
       st.sampled_from([1e-1, 1e-2]), st.integers(0, 2**31))
def test_irrelevant_mass_and_window(n, d, B, eps, seed):
    Q, K, V = rand(n, d, B, seed)
    params = AttnParams(n, d, B, eps)
    mass, offs, step, L = window_check(Q, K, V, params)
    assert np.all(mass <= params.eps_internal)
    assert np.all(np.isnan(offs) | ((offs >= 0) & (offs <= L + step)))
    assert np.all(np.any(~np.isnan(offs), axis=1))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.sampled_from([2, 3]), st.sampled_from([1.0, 3.0, 10.0]),
       st.sampled_from([1e-1, 1e-2]), st.integers(0, 2**31))
def test_contract(n, d, B, eps, seed):
    Q, K, V = rand(n, d, B, seed)
    out = approx_attention(Q, K, V, AttnParams(n, d, B, eps))
    assert max_abs_diff(out, exact_attention(Q, K, V)) <= eps


def test_approx_oracle_takes_bound_from_inputs():
    Q, K, V = rand(120, 2, 2.0, 11)
    V = V * 7.0
    assert max_abs_diff(approx_oracle(Q, K, V, 1e-2), exact_attention(Q, K, V)) <= 1e-2


def test_profile_fields():
    Q, K, V = rand(300, 2, 1.0, 12)
    prof = {}
    approx_attention(Q, K, V, eps=0.1, profile=prof)
    assert prof["build_s"] > 0 and prof["query_s"] > 0


# ---------------------------------------------------------------- low rank


def test_low_rank_rank_one_queries():
    rng = np.random.default_rng(13)
    Q = np.outer(rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 8))
    K = np.outer(rng.uniform(-1, 1, 200), rng.uniform(-1, 1, 8))
    V = rng.uniform(-1, 1, (200, 8))
    p = AttnParams(200, 8, 1.0, 1e-2)
    assert max_abs_diff(low_rank_attention(Q, K, V, p), exact_attention(Q, K, V)) <= 1e-2


def test_low_rank_zero_queries():
    _, K, V = rand(30, 5, 1.0, 14)
    out = low_rank_attention(np.zeros((30, 5)), K, V, AttnParams(30, 5, 1.0, 0.1))
    assert max_abs_diff(out, np.tile(V.mean(axis=0), (30, 1))) < 1e-15


def test_low_rank_rank_two_d16():
    rng = np.random.default_rng(15)
    n, d = 300, 16
    Q = rng.uniform(-1, 1, (n, 2)) @ rng.uniform(-0.5, 0.5, (2, d))
    K = rng.uniform(-1, 1, (n, 2)) @ rng.uniform(-0.5, 0.5, (2, d))
    V = rng.uniform(-1, 1, (n, d))
    p = AttnParams.for_instance(Q, K, V, 1e-2)
    assert max_abs_diff(low_rank_attention(Q, K, V, p), exact_attention(Q, K, V)) <= 1e-2
