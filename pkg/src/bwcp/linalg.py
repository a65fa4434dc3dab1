"""Dense kernels behind batch whitening.

Everything here works on small float64 arrays (C <= 512) and is free of
side effects; ``RunningRootInverse`` is the only stateful piece and its
update returns a fresh instance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import (
    DegenerateScaleError,
    DimensionError,
    DomainError,
    InputError,
    InsufficientDataError,
    ParameterError,
)

SYMMETRY_TOL = 1e-8


def erf(x):
    """Error function, accepting a scalar or an array.

    Raises DomainError on NaN/inf input.
    """
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("erf is only defined here for finite input")
    out = special.erf(arr)
    if np.ndim(x) == 0:
        return float(out)
    return out


def correlation_matrix(xbar):
    """Channel correlation of a standardized (N, C, H, W) batch.

    rho[c, d] = mean over (n, h, w) of xbar[:, c] * xbar[:, d], clamped to
    [-1, 1].
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    if xbar.ndim != 4:
        raise DimensionError(f"expected a rank-4 tensor, got shape {xbar.shape}")
    n, c, h, w = xbar.shape
    m = n * h * w
    if m < 2:
        raise InsufficientDataError(f"need at least 2 elements per channel, got {m}")
    flat = xbar.transpose(1, 0, 2, 3).reshape(c, m)
    rho = flat @ flat.T / m
    rho = 0.5 * (rho + rho.T)
    return np.clip(rho, -1.0, 1.0)


def normalized_covariance(gamma, rho):
    """Trace-normalized covariance (gamma gamma^T * rho) / ||gamma||^2."""
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    rho = np.asarray(rho, dtype=np.float64)
    c = gamma.shape[0]
    if rho.shape != (c, c):
        raise DimensionError(f"rho has shape {rho.shape}, expected {(c, c)}")
    norm2 = float(gamma @ gamma)
    if norm2 <= 0.0:
        raise DegenerateScaleError("gamma is identically zero")
    sigma = np.outer(gamma, gamma) * rho / norm2
    return 0.5 * (sigma + sigma.T)


def _check_symmetric(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise InputError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return a


def newton_schulz_iterates(sigma_n, T):
    """Return [Sigma_0 = I, Sigma_1, ..., Sigma_T] of the coupled-free Newton
    iteration Sigma_k = (3 Sigma_{k-1} - Sigma_{k-1}^3 Sigma_N) / 2.

    Each iterate is symmetrized to keep round-off from accumulating.
    """
    if int(T) != T or T < 1:
        raise ParameterError(f"iteration count must be an integer >= 1, got {T}")
    sigma_n = _check_symmetric(sigma_n)
    p = np.eye(sigma_n.shape[0])
    iterates = [p]
    for _ in range(int(T)):
        p = 0.5 * (3.0 * p - p @ p @ p @ sigma_n)
        p = 0.5 * (p + p.T)
        iterates.append(p)
    return iterates


def newton_schulz_root_inverse(sigma_n, T):
    """Approximate sigma_n^{-1/2} with T Newton-Schulz steps from the identity."""
    return newton_schulz_iterates(sigma_n, T)[-1]


def newton_schulz_backward(iterates, sigma_n, grad_out):
    """Gradient of a loss w.r.t. Sigma_N given dL/dSigma_T.

    Walks the iteration backwards; ``iterates`` is the list returned by
    ``newton_schulz_iterates``.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    s_t = sigma_n.T
    g_sigma = np.zeros_like(g)
    for k in range(len(iterates) - 1, 0, -1):
        a = iterates[k - 1]
        a2 = a @ a
        g_sigma -= 0.5 * (a2 @ a).T @ g
        g = (1.5 * g
             - 0.5 * g @ (a2 @ sigma_n).T
             - 0.5 * a2.T @ g @ s_t
             - 0.5 * a.T @ g @ (a @ sigma_n).T)
    return g_sigma


def inverse_sqrt_eig(a):
    """Exact A^{-1/2} through an eigendecomposition; used as a reference."""
    a = _check_symmetric(a)
    w, q = np.linalg.eigh(a)
    if np.any(w <= 0):
        raise InputError("matrix is not positive definite")
    return (q / np.sqrt(w)) @ q.T


@dataclass
class RunningRootInverse:
    """Moving-average population estimate of the whitening matrix."""

    value: np.ndarray
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def identity(cls, c, momentum=0.1):
        if not 0.0 <= momentum <= 1.0:
            raise ParameterError(f"momentum must lie in [0, 1], got {momentum}")
        return cls(np.eye(c), float(momentum), False)

    @property
    def channels(self):
        return self.value.shape[0]


def update_running_root_inverse(state, current):
    """value <- (1 - g) * value + g * current; returns a new state."""
    current = np.asarray(current, dtype=np.float64)
    if current.shape != state.value.shape:
        raise DimensionError(
            f"running estimate has shape {state.value.shape}, update has {current.shape}")
    g = state.momentum
    value = (1.0 - g) * state.value + g * current
    return RunningRootInverse(value, g, True)


def frobenius_residual(root_inv, sigma_n):
    """||P P Sigma_N - I||_F, the convergence measure for the iteration."""
    c = sigma_n.shape[0]
    return float(np.linalg.norm(root_inv @ root_inv @ sigma_n - np.eye(c)))


def random_spd_trace_one(rng, c, cond=None):
    """Random SPD matrix with unit trace; if ``cond`` is given the
    eigenvalues are log-uniform with that exact condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((c, c)))
    if cond is None:
        a = rng.standard_normal((c, 2 * c))
        m = a @ a.T / (2 * c) + 1e-3 * np.eye(c)
    else:
        if c == 1:
            w = np.ones(1)
        else:
            w = np.exp(rng.uniform(0.0, math.log(cond), size=c))
            w[0], w[1] = 1.0, float(cond)
        m = (q * w) @ q.T
    m = 0.5 * (m + m.T)
    return m / np.trace(m)
