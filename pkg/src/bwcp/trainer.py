"""Training: cross-entropy plus the sparsity regularizer, SGD with momentum,
and a finite-difference gradient checker for the whole network."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ParameterError

log = logging.getLogger(__name__)


@dataclass
class RegConfig:
    lambda1: float = 4e-5
    lambda2: float = 8e-5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ParameterError("regularization weights must be non-negative")


@dataclass
class OptimConfig:
    lr: float = 0.1
    lr_decay_epochs: list = field(default_factory=list)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    affine_lr_scale: float = 1.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ParameterError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError("momentum must lie in [0, 1)")

    def lr_at(self, epoch):
        """Piecewise-constant schedule; ``epoch`` counts from 0."""
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay ** drops


def sparse_loss(layers, cfg):
    """sum over layers and channels of lambda1 |gamma_c| + lambda2 beta_c (beta signed)."""
    total = 0.0
    for l in layers:
        total += cfg.lambda1 * float(np.sum(np.abs(l.gamma))) + cfg.lambda2 * float(np.sum(l.beta))
    return total


def sparse_loss_grad(layers, cfg):
    """Subgradient of ``sparse_loss`` as [(d/dgamma, d/dbeta)] per layer, sign(0) = 0."""
    return [(cfg.lambda1 * np.sign(l.gamma), np.full_like(l.beta, cfg.lambda2)) for l in layers]


def softmax_cross_entropy(logits, y):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


class SGD:
    """Heavy-ball SGD; weight decay applies to conv/linear weights only.

    ``affine_lr_scale`` multiplies the step size of the BWCP gamma/beta.
    """

    def __init__(self, model, momentum=0.9, weight_decay=1e-4, affine_lr_scale=1.0):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.affine_lr_scale = affine_lr_scale
        self.velocity = {name: np.zeros_like(v) for name, v, _, _ in model.named_parameters()}

    def step(self, lr):
        for name, value, grad, kind in self.model.named_parameters():
            g = grad
            if kind == "weight" and self.weight_decay:
                g = g + self.weight_decay * value
            v = self.velocity[name]
            v *= self.momentum
            v += g
            if kind in ("gamma", "beta"):
                value -= (lr * self.affine_lr_scale) * v
            else:
                value -= lr * v


def add_sparse_grads(model, reg):
    layers = model.bw_layers()
    for l, (gg, gb) in zip(layers, sparse_loss_grad(layers, reg)):
        l.grad_gamma += gg
        l.grad_beta += gb


def _mean_mask(model):
    vals = [u.bw.mask.values for u in model.units()]
    probs = [u.bw.mask.probabilities for u in model.units()]
    return float(np.mean(np.concatenate(vals))), float(np.mean(np.concatenate(probs)))


def train_step(model, batch, optim, reg, rng, lr):
    """One forward/backward/update; returns a dict of step metrics."""
    x, y = batch
    if x.shape[0] < 2:
        raise ParameterError("batch statistics need at least two samples")
    model.zero_grad()
    logits = model.forward(x, training=True, rng=rng)
    ce, g_logits = softmax_cross_entropy(logits, y)
    sp = sparse_loss(model.bw_layers(), reg)
    total = ce + sp
    if not np.isfinite(total):
        raise DivergenceError(
            f"loss became non-finite (ce={ce}, sparse={sp})",
            {"ce": ce, "sparse": sp,
             "finite_logit_fraction": float(np.mean(np.isfinite(logits))),
             "gamma_abs_max": {u.name: float(np.max(np.abs(u.bw.gamma))) for u in model.units()}})
    model.backward(g_logits)
    add_sparse_grads(model, reg)
    optim.step(lr)
    mean_mask, mean_prob = _mean_mask(model)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return {"ce_loss": ce, "sparse_loss": sp, "total_loss": total, "accuracy": acc,
            "mean_mask": mean_mask, "mean_probability": mean_prob}


def evaluate(model, x, y, batch_size=250, threshold=None):
    """Eval-mode (hard-mask) accuracy and mean cross-entropy."""
    correct = 0
    ce = 0.0
    for i in range(0, len(x), batch_size):
        logits = model.forward(x[i:i + batch_size], training=False)
        l, _ = softmax_cross_entropy(logits, y[i:i + batch_size])
        ce += l * len(logits)
        correct += int(np.sum(np.argmax(logits, axis=1) == y[i:i + batch_size]))
    return correct / len(x), ce / len(x)


class _ChannelMoments:
    """Per-channel mean/variance accumulated around the first batch's mean."""

    def __init__(self):
        self.n = 0
        self.shift = None
        self.s1 = 0.0
        self.s2 = 0.0

    def add(self, x):
        if self.shift is None:
            self.shift = x.mean(axis=(0, 2, 3))
        d = x - self.shift[None, :, None, None]
        self.n += x.shape[0] * x.shape[2] * x.shape[3]
        self.s1 = self.s1 + d.sum(axis=(0, 2, 3))
        self.s2 = self.s2 + (d * d).sum(axis=(0, 2, 3))

    def result(self):
        m = self.s1 / self.n
        return self.shift + m, np.maximum(self.s2 / self.n - m * m, 0.0)


def recalibrate_bn(model, x, batch_size=250):
    """Re-estimate every BN running mean/var under the inference masks.

    Running statistics gathered during training average over random soft
    masks upstream; the pruned network sees one fixed set of channels. Each
    layer is re-measured in forward order, so it sees its upstream layers
    already recalibrated. Whitening estimates, gamma/beta and therefore the
    masks themselves are left untouched.
    """
    if len(x) == 0:
        raise ParameterError("recalibration needs at least one sample")
    for unit in model.units():
        layer = unit.bw
        sink = _ChannelMoments()
        layer.stat_sink = sink
        try:
            for i in range(0, len(x), batch_size):
                model.forward(x[i:i + batch_size], training=False)
        finally:
            layer.stat_sink = None
        mean, var = sink.result()
        layer.running_mean[:] = mean
        layer.running_var[:] = var


# -- gradient check ------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_tensor: dict
    max_rel_error: float
    tolerance: float
    skipped_kinks: dict
    checked: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def per_layer(self):
        out = {}
        for name, err in self.per_tensor.items():
            layer = name.rsplit(".", 2)[0] if (".conv." in name or ".bw." in name) else name
            out[layer] = max(out.get(layer, 0.0), err)
        return out


def relative_errors(analytic, numeric, floor_frac=1e-3):
    """|a - n| / max(|a|, |n|, floor_frac * max|n|) componentwise.

    The floor keeps components that are tiny compared to the rest of the
    tensor from being judged against finite-difference round-off.
    """
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    scale = max(float(np.max(np.abs(n))) if n.size else 0.0, float(np.max(np.abs(a))) if a.size else 0.0)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor_frac * scale, 1e-12))
    return np.abs(a - n) / denom


def grad_check(model, batch, tolerance=1e-5, reg=None, h=1e-5, noise_seed=0, max_per_tensor=None,
               sample_seed=0):
    """Compare backprop against central differences for every trainable array.

    Gumbel noise is replayed from ``noise_seed`` on every evaluation so the
    loss is a deterministic function of the parameters. Components of gamma
    within h of zero sit on the |gamma| kink and are reported, not compared.
    ``max_per_tensor`` optionally subsamples large tensors.
    """
    reg = reg or RegConfig(0.0, 0.0)
    x, y = batch
    saved = {name: np.array(b, copy=True) for name, b in model.named_buffers()}
    saved_flags = [(u.bw, copy.deepcopy(u.bw.running_rinv)) for u in model.units()]

    def loss():
        logits = model.forward(x, training=True, rng=np.random.default_rng(noise_seed))
        ce, g = softmax_cross_entropy(logits, y)
        return ce + sparse_loss(model.bw_layers(), reg), g

    model.zero_grad()
    total, g_logits = loss()
    if not np.isfinite(total):
        raise DivergenceError("loss is not finite at the check point")
    model.backward(g_logits)
    add_sparse_grads(model, reg)
    analytic = {name: np.array(grad, copy=True) for name, _, grad, _ in model.named_parameters()}
    for name, a in analytic.items():
        if not np.all(np.isfinite(a)):
            raise DivergenceError(f"analytic gradient of {name} is not finite")

    rs = np.random.default_rng(sample_seed)
    per_tensor, kinks, checked = {}, {}, 0
    for name, value, _, kind in model.named_parameters():
        idx = list(np.ndindex(value.shape))
        if max_per_tensor is not None and len(idx) > max_per_tensor:
            pick = rs.choice(len(idx), size=max_per_tensor, replace=False)
            idx = [idx[i] for i in sorted(pick)]
        a_vals, n_vals = [], []
        for i in idx:
            if kind == "gamma" and reg.lambda1 > 0 and abs(value[i]) < h:
                kinks.setdefault(name, []).append(int(np.ravel_multi_index(i, value.shape)))
                continue
            old = value[i]
            value[i] = old + h
            fp, _ = loss()
            value[i] = old - h
            fm, _ = loss()
            value[i] = old
            a_vals.append(analytic[name][i])
            n_vals.append((fp - fm) / (2 * h))
        checked += len(a_vals)
        if a_vals:
            per_tensor[name] = float(np.max(relative_errors(a_vals, n_vals)))

    # restore running statistics touched by the extra forward passes
    for name, b in model.named_buffers():
        b[...] = saved[name]
    for layer, rr in saved_flags:
        layer.running_rinv = rr
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return GradCheckReport(per_tensor, worst, tolerance, kinks, checked)
