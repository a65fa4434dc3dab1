import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bwcp import linalg
from bwcp.errors import (DegenerateScaleError, DimensionError, DomainError, InputError,
                         InsufficientDataError, ParameterError)


def erf_series(x, terms=200):
    # Maclaurin series 2/sqrt(pi) sum (-1)^n x^(2n+1) / (n! (2n+1)), in mpmath at 50 digits
    with mpmath.workdps(50):
        x = mpmath.mpf(x)
        s = mpmath.mpf(0)
        term = x
        for n in range(terms):
            s += term / (2 * n + 1)
            term *= -x * x / (n + 1)
        return float(2 / mpmath.sqrt(mpmath.pi) * s)


# -- erf ---------------------------------------------------------------------

def test_erf_zero():
    assert linalg.erf(0.0) == 0.0


def test_erf_saturates():
    assert abs(linalg.erf(10.0) - 1.0) <= 1e-12


def test_erf_one_matches_series():
    ref = erf_series(1.0)
    assert abs(ref - 0.8427007929) < 1e-10
    assert abs(linalg.erf(1.0) - ref) <= 1e-12


@pytest.mark.parametrize("x", [-4.5, -2.0, -0.3, 1e-8, 0.7, 1.9, 3.3, 5.0])
def test_erf_against_series(x):
    assert abs(linalg.erf(x) - erf_series(x)) <= 1e-12


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_erf_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        linalg.erf(bad)


@given(st.floats(-30, 30))
def test_erf_is_odd_and_bounded(x):
    assert linalg.erf(-x) == -linalg.erf(x)
    assert -1.0 <= linalg.erf(x) <= 1.0


@given(st.floats(-6, 6), st.floats(1e-6, 1.0))
def test_erf_monotone(x, dx):
    assert linalg.erf(x + dx) >= linalg.erf(x)


# -- correlation ---------------------------------------------------------------

def standardize(x):
    m = x.mean(axis=(0, 2, 3), keepdims=True)
    s = x.std(axis=(0, 2, 3), keepdims=True)
    return (x - m) / s


def test_correlation_single_channel():
    x = standardize(np.random.default_rng(0).standard_normal((4, 1, 3, 3)))
    rho = linalg.correlation_matrix(x)
    assert rho.shape == (1, 1)
    assert abs(rho[0, 0] - 1.0) < 1e-12


def test_correlation_identical_channels():
    a = standardize(np.random.default_rng(1).standard_normal((3, 1, 4, 4)))
    rho = linalg.correlation_matrix(np.concatenate([a, a], axis=1))
    assert abs(rho[0, 1] - 1.0) < 1e-12 and rho[0, 1] == rho[1, 0]


def loop_pearson(x):
    n, c, h, w = x.shape
    cols = [[float(x[i, k, a, b]) for i in range(n) for a in range(h) for b in range(w)]
            for k in range(c)]
    m = len(cols[0])
    out = np.zeros((c, c))
    for i in range(c):
        for j in range(c):
            out[i, j] = math.fsum(p * q for p, q in zip(cols[i], cols[j])) / m
    return out


def test_correlation_matches_loop_oracle():
    x = standardize(np.random.default_rng(2).standard_normal((5, 3, 4, 4)))
    assert np.max(np.abs(linalg.correlation_matrix(x) - loop_pearson(x))) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_correlation_small_inputs_match_loop_to_rounding(seed):
    # summation order differs from the loop, so agreement is to a few ulps
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 9))
    x = standardize(rng.standard_normal((4, c, 4, 4)))
    assert np.max(np.abs(linalg.correlation_matrix(x) - loop_pearson(x))) < 1e-15 * 16


def test_correlation_is_symmetric_and_clamped():
    rng = np.random.default_rng(3)
    base = rng.standard_normal((6, 1, 3, 3))
    x = standardize(np.concatenate([base, base + 1e-9 * rng.standard_normal(base.shape),
                                    rng.standard_normal(base.shape)], axis=1))
    rho = linalg.correlation_matrix(x)
    assert np.array_equal(rho, rho.T)
    assert np.all(np.abs(rho) <= 1.0)


def test_correlation_needs_two_elements():
    with pytest.raises(InsufficientDataError):
        linalg.correlation_matrix(np.zeros((1, 2, 1, 1)))


def test_correlation_rank_check():
    with pytest.raises(DimensionError):
        linalg.correlation_matrix(np.zeros((4, 2)))


# -- normalized covariance -----------------------------------------------------

def test_normalized_covariance_single_channel():
    assert linalg.normalized_covariance([-3.7], [[1.0]]).tolist() == [[1.0]]


def test_normalized_covariance_identity_rho():
    np.testing.assert_allclose(linalg.normalized_covariance([1.0, 1.0], np.eye(2)),
                               np.diag([0.5, 0.5]), atol=0)


def test_normalized_covariance_elementwise():
    g = np.array([1.0, 2.0])
    rho = np.array([[1.0, 0.5], [0.5, 1.0]])
    out = linalg.normalized_covariance(g, rho)
    for c in range(2):
        for d in range(2):
            assert abs(out[c, d] - g[c] * g[d] * rho[c, d] / 5.0) < 1e-15


def test_normalized_covariance_degenerate():
    with pytest.raises(DegenerateScaleError):
        linalg.normalized_covariance([0.0, 0.0], np.eye(2))


def test_normalized_covariance_shape_check():
    with pytest.raises(DimensionError):
        linalg.normalized_covariance([1.0, 2.0], np.eye(3))


@settings(max_examples=50)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_normalized_covariance_trace_and_spectrum(c, seed):
    rng = np.random.default_rng(seed)
    x = standardize(rng.standard_normal((4, c, 3, 3)) + rng.standard_normal((1, c, 1, 1)))
    # Pearson correlation has an exact unit diagonal
    s = linalg.correlation_matrix(x)
    d = np.sqrt(np.diag(s))
    rho = s / np.outer(d, d)
    np.fill_diagonal(rho, 1.0)
    g = rng.uniform(-2, 2, c)
    g[0] = 1.0
    sig = linalg.normalized_covariance(g, rho)
    assert abs(np.trace(sig) - 1.0) < 1e-10
    w = np.linalg.eigvalsh(sig)
    assert w.min() >= -1e-8 and w.max() <= 1.0 + 1e-8


# -- Newton-Schulz -------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 2, 5])
def test_newton_fixed_point(T):
    assert linalg.newton_schulz_root_inverse(np.array([[1.0]]), T).tolist() == [[1.0]]


def test_newton_diag_half():
    s = np.diag([0.5, 0.5])
    p = linalg.newton_schulz_root_inverse(s, 5)
    assert linalg.frobenius_residual(p, s) < 0.05
    np.testing.assert_allclose(p, linalg.inverse_sqrt_eig(s), rtol=0.05)


def test_newton_random_improves():
    s = linalg.random_spd_trace_one(np.random.default_rng(8), 8)
    r1 = linalg.frobenius_residual(linalg.newton_schulz_root_inverse(s, 1), s)
    r5 = linalg.frobenius_residual(linalg.newton_schulz_root_inverse(s, 5), s)
    assert r5 < r1


def test_newton_iteration_formula():
    s = linalg.random_spd_trace_one(np.random.default_rng(9), 4)
    p = np.eye(4)
    for _ in range(3):
        p = 0.5 * (3 * p - p @ p @ p @ s)
    np.testing.assert_allclose(linalg.newton_schulz_root_inverse(s, 3), p, atol=1e-14)


@pytest.mark.parametrize("T", [0, -1, 1.5])
def test_newton_bad_T(T):
    with pytest.raises(ParameterError):
        linalg.newton_schulz_root_inverse(np.eye(2) / 2, T)


def test_newton_rejects_asymmetric():
    with pytest.raises(InputError):
        linalg.newton_schulz_root_inverse(np.array([[0.5, 0.1], [0.0, 0.5]]), 2)


def test_newton_output_symmetric():
    s = linalg.random_spd_trace_one(np.random.default_rng(4), 12)
    p = linalg.newton_schulz_root_inverse(s, 4)
    assert np.max(np.abs(p - p.T)) <= 1e-8


@pytest.mark.parametrize("seed", range(20))
def test_newton_residual_non_increasing(seed):
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 17))
    s = linalg.random_spd_trace_one(rng, c)
    its = linalg.newton_schulz_iterates(s, 5)
    res = [linalg.frobenius_residual(p, s) for p in its[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))
    # the iterates head towards the eigendecomposition answer
    exact = linalg.inverse_sqrt_eig(s)
    errs = [np.linalg.norm(p - exact) for p in its]
    assert errs[-1] < errs[0]


def test_newton_backward_matches_finite_differences():
    rng = np.random.default_rng(11)
    s = linalg.random_spd_trace_one(rng, 4)
    g = rng.standard_normal((4, 4))
    its = linalg.newton_schulz_iterates(s, 3)
    ana = linalg.newton_schulz_backward(its, s, g)
    h = 1e-6
    num = np.zeros_like(s)
    for i in range(4):
        for j in range(4):
            e = np.zeros_like(s)
            e[i, j] = h
            # unsymmetrized iteration so every entry is an independent input
            def f(m):
                p = np.eye(4)
                for _ in range(3):
                    p = 0.5 * (3 * p - p @ p @ p @ m)
                return np.sum(g * p)
            num[i, j] = (f(s + e) - f(s - e)) / (2 * h)
    np.testing.assert_allclose(ana, num, rtol=1e-6, atol=1e-8)


# -- running estimate ----------------------------------------------------------

def test_running_starts_at_identity():
    st_ = linalg.RunningRootInverse.identity(3)
    assert np.array_equal(st_.value, np.eye(3)) and not st_.initialized


def test_running_full_replacement():
    cur = np.array([[2.0, 0.3], [0.3, 1.0]])
    out = linalg.update_running_root_inverse(linalg.RunningRootInverse.identity(2, 1.0), cur)
    assert np.array_equal(out.value, cur) and out.initialized


def test_running_frozen():
    out = linalg.update_running_root_inverse(linalg.RunningRootInverse.identity(2, 0.0), 5 * np.eye(2))
    assert np.array_equal(out.value, np.eye(2))


def test_running_blend():
    out = linalg.update_running_root_inverse(linalg.RunningRootInverse.identity(2, 0.1), 2 * np.eye(2))
    np.testing.assert_allclose(out.value, 1.1 * np.eye(2), atol=1e-15)


def test_running_shape_mismatch():
    with pytest.raises(DimensionError):
        linalg.update_running_root_inverse(linalg.RunningRootInverse.identity(2), np.eye(3))


def test_running_bad_momentum():
    with pytest.raises(ParameterError):
        linalg.RunningRootInverse.identity(2, 1.5)
