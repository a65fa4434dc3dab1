"""Activation-probability and channel-correlation diagnostics."""
from __future__ import annotations

import numpy as np

from .layer import activation_probability


def analyze_probabilities(model, data=None):
    """Per layer, BN-equivalent vs post-whitening activation probabilities.

    Returns {unit name: list of row dicts sorted by the BN probability}. The
    BN column uses raw (gamma, beta); the BW column uses the equivalent
    parameters from the running whitening estimate. ``data`` is accepted for
    interface symmetry and not needed: both quantities are parametric.
    """
    table = {}
    for u in model.units():
        bw = u.bw
        p_bn = activation_probability(bw.gamma, bw.beta, bw.delta)
        eq = bw.equivalent()
        p_bw = activation_probability(eq.gamma_hat, eq.beta_hat, bw.delta)
        order = np.argsort(p_bn, kind="stable")
        table[u.name] = [
            {"rank": r, "channel": int(c), "gamma": float(bw.gamma[c]), "beta": float(bw.beta[c]),
             "gamma_hat": float(eq.gamma_hat[c]), "beta_hat": float(eq.beta_hat[c]),
             "p_bn": float(p_bn[c]), "p_bw": float(p_bw[c])}
            for r, c in enumerate(order)
        ]
    return table


def mean_abs_offdiag_correlation(features):
    """Mean |Pearson correlation| over channel pairs c != d of an (N, C, H, W) tensor."""
    n, c, h, w = features.shape
    if c < 2:
        raise ValueError("correlation score needs at least two channels")
    flat = features.transpose(1, 0, 2, 3).reshape(c, -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.mean(flat * flat, axis=1))
    live = sd > 1e-12
    flat = flat[live] / sd[live, None]
    k = flat.shape[0]
    if k < 2:
        return 0.0
    rho = flat @ flat.T / flat.shape[1]
    off = np.abs(rho[~np.eye(k, dtype=bool)])
    return float(off.mean())


class _Moments:
    """Streaming channel covariance; sums are taken around the first batch's
    mean so near-constant channels with a large offset do not cancel badly."""

    def __init__(self):
        self.n = 0
        self.shift = None
        self.s1 = None
        self.s2 = None

    def add(self, x):
        c = x.shape[1]
        flat = x.transpose(1, 0, 2, 3).reshape(c, -1)
        if self.s1 is None:
            self.shift = flat.mean(axis=1)
            self.s1 = np.zeros(c)
            self.s2 = np.zeros((c, c))
        flat = flat - self.shift[:, None]
        self.n += flat.shape[1]
        self.s1 += flat.sum(axis=1)
        self.s2 += flat @ flat.T

    def score(self):
        mean = self.s1 / self.n
        cov = self.s2 / self.n - np.outer(mean, mean)
        sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        live = sd > 1e-9 * np.maximum(1.0, np.abs(mean + self.shift))
        if np.count_nonzero(live) < 2:
            return 0.0
        rho = cov[np.ix_(live, live)] / np.outer(sd[live], sd[live])
        k = rho.shape[0]
        return float(np.abs(rho[~np.eye(k, dtype=bool)]).mean())


def correlation_score(model, data, batch_size=256):
    """Per layer mean |rho| of the normalization output (before masking).

    Each entry holds ``pre`` (channels of gamma * xbar + beta, i.e. what a BN
    layer would emit) and ``post`` (the whitened output x_hat). Layers with a
    single channel are skipped.
    """
    units = [u for u in model.units() if u.bw.channels >= 2]
    acc = {u.name: (_Moments(), _Moments()) for u in units}
    for i in range(0, len(data), batch_size):
        model.forward(data[i:i + batch_size], training=False)
        for u in units:
            acc[u.name][0].add(u.bw.cache["u"])
            acc[u.name][1].add(u.bw.cache["xhat"])
    return {name: {"pre": a.score(), "post": b.score()} for name, (a, b) in acc.items()}
