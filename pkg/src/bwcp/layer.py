"""The BWCP normalization layer.

A layer standardizes its input per channel, whitens the affine-transformed
result with a Newton-Schulz approximation of Sigma_N^{-1/2}, derives
equivalent per-channel scale/bias, turns them into activation
probabilities, and samples a channel mask from those probabilities.

The backward pass is written out by hand and is exact for the forward
composition (including the dependence of the whitening matrix and the mask
on the batch), so it can be checked against finite differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .errors import (
    DegenerateDeltaError,
    DimensionError,
    InsufficientDataError,
    InvalidStateError,
    ParameterError,
    UninitializedStatisticsError,
)
from .linalg import RunningRootInverse
from .sampler import (
    ChannelMask,
    gumbel_softmax_mask,
    inference_mask,
    mask_grad_wrt_probability,
    ones_mask,
    ste_mask,
)

GAMMA_HAT_FLOOR = 1e-12
DELTA_DENOM_TOL = 1e-8
MASK_KINDS = ("gumbel", "ste", "none")


@dataclass
class BatchStats:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class EquivalentParams:
    gamma_hat: np.ndarray
    beta_hat: np.ndarray


def bn_standardize(x, eps=1e-5):
    """Per-channel standardization over (N, H, W) with divisor sqrt(var + eps)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 tensor, got shape {x.shape}")
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise InsufficientDataError("need at least two elements per channel for batch statistics")
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    xbar = (x - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
    return xbar, BatchStats(mean, var)


def activation_probability(gamma_hat, beta_hat, delta=0.05):
    """P(gamma_hat * Z + beta_hat > delta) for Z ~ N(0, 1).

    Channels with |gamma_hat| < 1e-12 get the limiting step value.
    """
    if delta < 0:
        raise ParameterError(f"delta must be non-negative, got {delta}")
    g = np.abs(np.asarray(gamma_hat, dtype=np.float64))
    b = np.asarray(beta_hat, dtype=np.float64)
    g, b = np.broadcast_arrays(g, b)
    out = np.where(b > delta, 1.0, 0.0)
    live = g >= GAMMA_HAT_FLOOR
    if np.any(live):
        z = (b[live] - delta) / (math.sqrt(2.0) * g[live])
        out = out.astype(np.float64)
        out[live] = 0.5 * (1.0 + linalg.erf(z))
    if np.ndim(gamma_hat) == 0 and np.ndim(beta_hat) == 0:
        return float(out)
    return out


def _probability_partials(gamma_hat, beta_hat, delta):
    """dp/dgamma_hat and dp/dbeta_hat of ``activation_probability``."""
    g = np.abs(gamma_hat)
    live = g >= GAMMA_HAT_FLOOR
    dg = np.zeros_like(gamma_hat)
    db = np.zeros_like(beta_hat)
    z = (beta_hat[live] - delta) / g[live]
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    db[live] = pdf / g[live]
    dg[live] = -pdf * z * np.sign(gamma_hat[live]) / g[live]
    return dg, db


def prop3_delta(gamma, beta, rho, c):
    """Activation threshold under which whitening cannot lower channel c's
    activation probability (first-order Newton step)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    norm2 = float(gamma @ gamma)
    denom = norm2 - float(np.sum(gamma ** 2 * rho[c]))
    if denom <= DELTA_DENOM_TOL:
        raise DegenerateDeltaError(
            f"threshold denominator {denom:.3e} for channel {c} is not positive")
    cross = gamma * beta[c] - gamma[c] * beta
    num = math.sqrt(norm2) * math.sqrt(float(np.sum(cross ** 2 * rho[c] ** 2)))
    return num / denom


def pearson_from_standardized(xbar):
    """Unit-diagonal channel correlation and the raw second moments it came from."""
    n, c, h, w = xbar.shape
    flat = xbar.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    s = flat @ flat.T / flat.shape[1]
    s = 0.5 * (s + s.T)
    d = np.sqrt(np.diag(s))
    if np.any(d <= 0):
        # constant channels: treat as uncorrelated with everything else
        d = np.where(d > 0, d, 1.0)
    rho = s / np.outer(d, d)
    rho = np.clip(rho, -1.0, 1.0)
    np.fill_diagonal(rho, 1.0)
    return rho, s, d


class BWCPLayer:
    """Batch-whitening replacement for a BN layer, with a probabilistic channel mask.

    ``whiten=False`` turns the layer into plain BN (W = I) while keeping the
    probability/mask machinery; ``mask="none"`` disables masking. When
    ``stat_sink`` is set, eval-mode forwards pass their input to its ``add``
    method (used to re-measure running statistics).
    """

    def __init__(self, channels, T=2, eps=1e-5, momentum=0.1, delta=0.05, tau=0.5,
                 group_size=None, whiten=True, mask="gumbel", threshold=0.5):
        if channels < 1:
            raise ParameterError("a layer needs at least one channel")
        if T < 1:
            raise ParameterError(f"T must be >= 1, got {T}")
        if eps <= 0:
            raise ParameterError(f"eps must be positive, got {eps}")
        if mask not in MASK_KINDS:
            raise ParameterError(f"unknown mask kind {mask!r}")
        group_size = channels if not group_size else min(int(group_size), channels)
        if channels % group_size:
            raise ParameterError(f"group size {group_size} does not divide {channels} channels")
        self.channels = int(channels)
        self.T = int(T)
        self.eps = float(eps)
        self.delta = float(delta)
        self.tau = float(tau)
        self.group_size = group_size
        self.whiten = bool(whiten)
        self.mask_kind = mask
        self.threshold = float(threshold)

        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.grad_gamma = np.zeros(channels)
        self.grad_beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.running_rinv = RunningRootInverse.identity(channels, momentum)
        self.cache = None
        self.mask = None
        # optional observer of eval-mode inputs, used by BN recalibration
        self.stat_sink = None

    @property
    def momentum(self):
        return self.running_rinv.momentum

    @property
    def stats_initialized(self):
        return self.running_rinv.initialized

    def _groups(self):
        return [slice(i, i + self.group_size) for i in range(0, self.channels, self.group_size)]

    def batch_whitening_matrix(self, rho):
        """Block-diagonal Newton-Schulz estimate of Sigma_N^{-1/2} for the batch."""
        w = np.zeros((self.channels, self.channels))
        parts = []
        for sl in self._groups():
            sigma_n = linalg.normalized_covariance(self.gamma[sl], rho[sl, sl])
            iterates = linalg.newton_schulz_iterates(sigma_n, self.T)
            w[sl, sl] = iterates[-1]
            parts.append((sl, sigma_n, iterates))
        return w, parts

    def eval_matrix(self):
        if not self.whiten:
            return np.eye(self.channels)
        if not self.running_rinv.initialized:
            raise UninitializedStatisticsError("running whitening estimate was never updated")
        return self.running_rinv.value

    def equivalent(self, rinv=None):
        return equivalent_params(self, self.eval_matrix() if rinv is None else rinv)

    def eval_probabilities(self):
        eq = self.equivalent()
        return activation_probability(eq.gamma_hat, eq.beta_hat, self.delta)

    def eval_mask(self, threshold=None):
        if self.mask_kind == "none":
            return ones_mask(self.channels)
        return inference_mask(self.eval_probabilities(),
                              self.threshold if threshold is None else threshold)

    def forward(self, x, training=True, rng=None, noise=None):
        """Return the whitened (unmasked) output and this layer's own mask."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise DimensionError(f"layer expects {self.channels} channels, got shape {x.shape}")
        if training:
            xbar, stats = bn_standardize(x, self.eps)
            g = self.momentum
            # in place, so views handed out by named_buffers stay live
            self.running_mean *= 1.0 - g
            self.running_mean += g * stats.mean
            self.running_var *= 1.0 - g
            self.running_var += g * stats.var
            std = np.sqrt(stats.var + self.eps)
        else:
            if not self.stats_initialized:
                raise UninitializedStatisticsError("layer has never seen a training batch")
            if self.stat_sink is not None:
                self.stat_sink.add(x)
            std = np.sqrt(self.running_var + self.eps)
            xbar = (x - self.running_mean[None, :, None, None]) / std[None, :, None, None]
        mode = "train" if training else "eval"
        xhat = bw_forward(self, xbar, mode)
        w = self.cache["w"]
        eq = equivalent_params(self, w)
        p = activation_probability(eq.gamma_hat, eq.beta_hat, self.delta)
        if self.mask_kind == "none":
            mask = ones_mask(self.channels)
        elif not training:
            mask = inference_mask(p, self.threshold)
        elif self.mask_kind == "ste":
            mask = ste_mask(p)
        else:
            if rng is None and noise is None:
                raise ParameterError("training with Gumbel masks needs an rng")
            mask = gumbel_softmax_mask(p, self.tau, rng, noise=noise)
        self.cache.update(std=std, eq=eq, mask=mask)
        self.mask = mask
        return xhat, mask

    def backward(self, grad_xhat, grad_mask):
        """Backprop to the layer input; accumulates grad_gamma / grad_beta."""
        g_xbar, g_gamma, g_beta = _backward_to_xbar(self, grad_xhat, grad_mask)
        self.grad_gamma += g_gamma
        self.grad_beta += g_beta
        c = self.cache
        xbar = c["xbar"]
        std = c["std"][None, :, None, None]
        if c["mode"] == "eval":
            return g_xbar / std
        mean_g = g_xbar.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (g_xbar * xbar).mean(axis=(0, 2, 3), keepdims=True)
        return (g_xbar - mean_g - xbar * mean_gx) / std

    def zero_grad(self):
        self.grad_gamma[:] = 0.0
        self.grad_beta[:] = 0.0


def equivalent_params(layer, rinv):
    """gamma_hat = rinv @ gamma, beta_hat = rinv @ beta."""
    rinv = np.asarray(rinv, dtype=np.float64)
    c = layer.gamma.shape[0]
    if rinv.shape != (c, c):
        raise DimensionError(f"whitening matrix has shape {rinv.shape}, expected {(c, c)}")
    return EquivalentParams(rinv @ layer.gamma, rinv @ layer.beta)


def bw_forward(layer, xbar, mode="train"):
    """x_hat[n, :, i, j] = W (gamma * xbar[n, :, i, j] + beta).

    In train mode W is the batch Newton-Schulz result and the running
    estimate is updated; in eval mode W is the running estimate.
    """
    xbar = np.asarray(xbar, dtype=np.float64)
    if xbar.ndim != 4 or xbar.shape[1] != layer.channels:
        raise DimensionError(f"layer expects {layer.channels} channels, got shape {xbar.shape}")
    cache = {"mode": mode, "xbar": xbar, "parts": None}
    if mode == "train" and layer.whiten:
        rho, s, d = pearson_from_standardized(xbar)
        w, parts = layer.batch_whitening_matrix(rho)
        layer.running_rinv = linalg.update_running_root_inverse(layer.running_rinv, w)
        cache.update(rho=rho, s=s, d=d, parts=parts)
    elif mode == "train":
        w = np.eye(layer.channels)
        layer.running_rinv = linalg.update_running_root_inverse(layer.running_rinv, w)
    elif mode == "eval":
        w = layer.eval_matrix()
    else:
        raise ParameterError(f"unknown mode {mode!r}")
    u = layer.gamma[None, :, None, None] * xbar + layer.beta[None, :, None, None]
    xhat = np.einsum("cd,ndhw->nchw", w, u, optimize=True)
    cache.update(w=w, u=u, xhat=xhat)
    layer.cache = cache
    return xhat


def _backward_to_xbar(layer, grad_xhat, grad_mask):
    c = layer.cache
    if c is None or "mask" not in c:
        raise InvalidStateError("backward called without a matching forward pass")
    grad_xhat = np.asarray(grad_xhat, dtype=np.float64)
    if grad_xhat.shape != c["xhat"].shape:
        raise DimensionError("upstream gradient does not match the cached output shape")
    w, u, xbar = c["w"], c["u"], c["xbar"]
    gamma, beta = layer.gamma, layer.beta
    n, ch, h, wd = xbar.shape
    m_count = n * h * wd

    gx = grad_xhat.transpose(1, 0, 2, 3).reshape(ch, m_count)
    uf = u.transpose(1, 0, 2, 3).reshape(ch, m_count)
    xf = xbar.transpose(1, 0, 2, 3).reshape(ch, m_count)

    g_w = gx @ uf.T
    g_u = w.T @ gx
    g_gamma = np.sum(g_u * xf, axis=1)
    g_beta = np.sum(g_u, axis=1)
    g_xf = gamma[:, None] * g_u

    # mask path: m depends on (gamma_hat, beta_hat) = (W gamma, W beta)
    mask = c["mask"]
    if grad_mask is not None and mask.kind in ("gumbel", "ste"):
        eq = c["eq"]
        g_p = np.asarray(grad_mask, dtype=np.float64) * mask_grad_wrt_probability(mask)
        dpg, dpb = _probability_partials(eq.gamma_hat, eq.beta_hat, layer.delta)
        g_gh = g_p * dpg
        g_bh = g_p * dpb
        g_w += np.outer(g_gh, gamma) + np.outer(g_bh, beta)
        g_gamma += w.T @ g_gh
        g_beta += w.T @ g_bh

    if c["mode"] == "train" and layer.whiten:
        rho, s, d = c["rho"], c["s"], c["d"]
        g_rho = np.zeros((ch, ch))
        for sl, sigma_n, iterates in c["parts"]:
            g_sig = linalg.newton_schulz_backward(iterates, sigma_n, g_w[sl, sl])
            g_sig = 0.5 * (g_sig + g_sig.T)
            gs = gamma[sl]
            norm2 = float(gs @ gs)
            outer = np.outer(gs, gs)
            r = rho[sl, sl]
            g_rho[sl, sl] = outer * g_sig / norm2
            g_p_mat = g_sig / norm2
            g_norm2 = -float(np.sum(g_sig * outer * r)) / norm2 ** 2
            g_gamma[sl] += (2.0 * g_p_mat * r) @ gs + 2.0 * gs * g_norm2
        # rho = S / (d d^T) off the diagonal, with d = sqrt(diag S)
        np.fill_diagonal(g_rho, 0.0)
        g_s = g_rho / np.outer(d, d)
        sd = np.diag(s)
        # constant channels have a fixed unit-diagonal rho row and no gradient
        diag = np.where(sd > 0, -np.sum(g_rho * rho, axis=1) / np.where(sd > 0, sd, 1.0), 0.0)
        g_s[np.diag_indices(ch)] += diag
        g_xf += (g_s + g_s.T) @ xf / m_count

    g_xbar = g_xf.reshape(ch, n, h, wd).transpose(1, 0, 2, 3)
    return g_xbar, g_gamma, g_beta


def bw_backward(layer, upstream):
    """Gradients of a standalone layer whose output is x_hat * m.

    Returns (dL/dxbar, dL/dgamma, dL/dbeta).
    """
    c = layer.cache
    if c is None or "mask" not in c:
        raise InvalidStateError("backward called without a matching forward pass")
    upstream = np.asarray(upstream, dtype=np.float64)
    m = c["mask"].values
    g_xhat = upstream * m[None, :, None, None]
    g_mask = np.sum(upstream * c["xhat"], axis=(0, 2, 3))
    return _backward_to_xbar(layer, g_xhat, g_mask)
