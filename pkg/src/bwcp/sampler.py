"""Turning activation probabilities into channel masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError

P_CLAMP = 1e-6


@dataclass
class ChannelMask:
    values: np.ndarray
    probabilities: np.ndarray
    tau: float = 0.5
    kind: str = "gumbel"
    # logistic noise g1 - g0; only set for Gumbel masks
    noise: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.values.shape != self.probabilities.shape:
            raise DimensionError("mask values and probabilities differ in length")

    @property
    def is_hard(self):
        return bool(np.all((self.values == 0.0) | (self.values == 1.0)))

    def __len__(self):
        return self.values.shape[0]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gumbel_softmax_mask(p, tau, rng, noise=None):
    """Binary-concrete relaxation of Bernoulli(p).

    m = sigmoid((log p - log(1 - p) + g1 - g0) / tau) with g0, g1 standard
    Gumbel draws; p is clamped to [1e-6, 1 - 1e-6] first. Pass ``noise``
    (the g1 - g0 difference) to replay a previous draw.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    if noise is None:
        g = rng.gumbel(size=(2, p.shape[0]))
        noise = g[1] - g[0]
    logit = np.log(pc) - np.log1p(-pc)
    m = _sigmoid((logit + noise) / tau)
    return ChannelMask(m, p, float(tau), "gumbel", np.asarray(noise))


def ste_mask(p):
    """Hard mask 1[p >= 0.5]; its gradient is passed straight through."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    return ChannelMask((p >= 0.5).astype(np.float64), p, 0.5, "ste")


def inference_mask(p, threshold=0.5):
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    return ChannelMask((p >= threshold).astype(np.float64), p, 0.5, "hard")


def ones_mask(c):
    return ChannelMask(np.ones(c), np.ones(c), 0.5, "none")


def mask_grad_wrt_probability(mask):
    """dm/dp for each channel of ``mask``."""
    if mask.kind == "ste":
        return np.ones_like(mask.values)
    if mask.kind != "gumbel":
        return np.zeros_like(mask.values)
    p = mask.probabilities
    m = mask.values
    inside = (p > P_CLAMP) & (p < 1.0 - P_CLAMP)
    grad = np.zeros_like(p)
    pi = p[inside]
    grad[inside] = m[inside] * (1.0 - m[inside]) / (mask.tau * pi * (1.0 - pi))
    return grad


def apply_mask(xhat, mask):
    """Broadcast-multiply an (N, C, H, W) tensor by a per-channel mask."""
    values = mask.values if isinstance(mask, ChannelMask) else np.asarray(mask, dtype=np.float64)
    xhat = np.asarray(xhat)
    if xhat.ndim != 4 or xhat.shape[1] != values.shape[0]:
        raise DimensionError(
            f"mask of length {values.shape[0]} does not fit tensor of shape {xhat.shape}")
    return xhat * values[None, :, None, None]
