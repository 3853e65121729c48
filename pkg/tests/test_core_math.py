import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

"""
Core math tests: t-kernel, distances, cosine similarity, top-n softmax
"""

import math

import numpy as np
import pytest

from san.core_math import (
    KernelParams,
    TopNConfig,
    cosine_matrix,
    cosine_sim,
    kernel_matrix,
    pairwise_sq_dist,
    t_kernel,
    t_kernel_grad,
    top_n_mask,
    top_n_softmax,
    top_n_softmax_backward,
)
from san.errors import DegenerateInputError, InvalidArgumentError


def t_density(d, nu):
    """Reference kernel with math.gamma"""
    pref = math.gamma((nu + 1) / 2) / (math.sqrt(nu * math.pi) * math.gamma(nu / 2))
    return pref * (1 + d / nu) ** (-(nu + 1) / 2)


# ============================================
# T-KERNEL
# ============================================

def test_t_kernel_cauchy_values():
    assert t_kernel(0.0, KernelParams(1)) == pytest.approx(1 / math.pi, rel=1e-12)
    assert t_kernel(1.0, KernelParams(1)) == pytest.approx(1 / (2 * math.pi), rel=1e-12)


def test_t_kernel_prefactor_at_nu_100():
    value = t_kernel(0.0, KernelParams(100))
    assert value == pytest.approx(0.39795, abs=1e-5)
    assert value == pytest.approx(t_density(0.0, 100), rel=1e-10)


@pytest.mark.parametrize("nu", [0.5, 1.0, 3.0, 10.0, 100.0])
def test_t_kernel_matches_gamma_oracle(nu):
    for d in (0.0, 0.3, 2.0, 17.5):
        assert t_kernel(d, KernelParams(nu)) == pytest.approx(t_density(d, nu), rel=1e-10)


def test_t_kernel_is_monotone_decreasing():
    rng = np.random.default_rng(0)
    for _ in range(100):
        nu = float(rng.uniform(0.1, 200))
        d1, d2 = np.sort(rng.uniform(0, 50, size=2))
        if d1 == d2:
            continue
        assert t_kernel(d1, KernelParams(nu)) > t_kernel(d2, KernelParams(nu))


def test_t_kernel_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        t_kernel(-1.0, KernelParams(1))
    with pytest.raises(InvalidArgumentError):
        t_kernel(float("nan"), KernelParams(1))
    with pytest.raises(InvalidArgumentError):
        KernelParams(0)


def test_t_kernel_grad_matches_finite_difference():
    params = KernelParams(10)
    d = np.array([0.1, 1.0, 4.0])
    h = 1e-6
    numeric = (t_kernel(d + h, params) - t_kernel(d - h, params)) / (2 * h)
    np.testing.assert_allclose(t_kernel_grad(d, params), numeric, rtol=1e-7)


# ============================================
# DISTANCES AND SIMILARITIES
# ============================================

def test_pairwise_sq_dist_examples():
    np.testing.assert_array_equal(pairwise_sq_dist([[0, 0], [3, 4]]), [[0, 25], [25, 0]])
    np.testing.assert_array_equal(pairwise_sq_dist([[1, 2, 3]]), [[0]])
    np.testing.assert_array_equal(pairwise_sq_dist([[1, 1], [1, 1]]), np.zeros((2, 2)))


def test_pairwise_sq_dist_properties():
    X = np.random.default_rng(1).standard_normal((7, 4))
    D = pairwise_sq_dist(X)
    np.testing.assert_array_equal(D, D.T)
    assert np.all(D >= 0)
    assert np.all(np.diag(D) == 0)
    assert D[2, 5] == pytest.approx(np.sum((X[2] - X[5]) ** 2), rel=1e-12)


def test_pairwise_sq_dist_rejects_ragged_rows():
    with pytest.raises(InvalidArgumentError):
        pairwise_sq_dist([[1, 2], [3]])


def test_cosine_sim_examples():
    assert cosine_sim([1, 0], [1, 0]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), rel=1e-12)


def test_cosine_sim_zero_vector():
    with pytest.raises(DegenerateInputError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(DegenerateInputError):
        cosine_matrix([[0, 0], [1, 0]])


def test_cosine_matrix_agrees_with_cosine_sim():
    X = np.random.default_rng(2).standard_normal((5, 3))
    S = cosine_matrix(X)
    for i in range(5):
        for j in range(5):
            assert S[i, j] == pytest.approx(cosine_sim(X[i], X[j]), abs=1e-12)


def test_kernel_matrix_examples():
    K = kernel_matrix([[2.0, 1.0], [2.0, 1.0]], KernelParams(1))
    np.testing.assert_allclose(K, np.full((2, 2), 1 / math.pi), rtol=1e-12)
    K = kernel_matrix([[0.0, 0.0], [1.0, 0.0]], KernelParams(1))
    assert K[0, 1] == pytest.approx(1 / (2 * math.pi), rel=1e-12)


def test_kernel_matrix_matches_loop():
    X = np.random.default_rng(3).standard_normal((4, 3))
    params = KernelParams(5)
    K = kernel_matrix(X, params)
    for i in range(4):
        for j in range(4):
            assert K[i, j] == pytest.approx(t_density(float(np.sum((X[i] - X[j]) ** 2)), 5), rel=1e-10)


# ============================================
# TOP-N SOFTMAX
# ============================================

def test_top_n_softmax_examples():
    np.testing.assert_allclose(top_n_softmax([1, 1, 1, 1], TopNConfig(4)), [0.25] * 4, rtol=1e-12)
    np.testing.assert_allclose(top_n_softmax([2, 1, 0, -1], TopNConfig(2)),
                               [0.7310585786, 0.2689414214, 0, 0], atol=1e-9)
    np.testing.assert_array_equal(top_n_softmax([5, 0, 0, 0], TopNConfig(1)), [1, 0, 0, 0])


def test_top_n_softmax_properties():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        width = 2 * int(rng.integers(1, 8))
        logits = rng.normal(scale=3.0, size=width)
        n = int(rng.integers(1, 2 * width))
        probs = top_n_softmax(logits, TopNConfig(n))
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.count_nonzero(probs) <= n
        assert np.all(probs >= 0)
        if n >= width:
            full = np.exp(logits - logits.max())
            np.testing.assert_allclose(probs, full / full.sum(), rtol=1e-12, atol=1e-15)


def test_top_n_ties_prefer_lower_index():
    mask = top_n_mask(np.array([1.0, 3.0, 3.0, 3.0]), 2)
    np.testing.assert_array_equal(mask[0], [False, True, True, False])


def test_top_n_softmax_batched_rows_match_single():
    logits = np.random.default_rng(5).standard_normal((3, 6))
    batch = top_n_softmax(logits, TopNConfig(3))
    for row, single in zip(batch, logits):
        np.testing.assert_allclose(row, top_n_softmax(single, TopNConfig(3)), rtol=1e-14)


def test_top_n_softmax_backward_matches_finite_difference():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal(6)
    cfg = TopNConfig(4)
    weights = rng.standard_normal(6)
    probs = top_n_softmax(logits, cfg)
    analytic = top_n_softmax_backward(probs, weights)[0]
    h = 1e-6
    numeric = np.empty(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        numeric[i] = (weights @ top_n_softmax(logits + e, cfg) - weights @ top_n_softmax(logits - e, cfg)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)


def test_top_n_softmax_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        top_n_softmax([1.0, float("inf")], TopNConfig(2))
    with pytest.raises(InvalidArgumentError):
        TopNConfig(0)
