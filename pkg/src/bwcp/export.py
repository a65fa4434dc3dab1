"""Fold whitening into convolutions and physically remove pruned channels."""
from __future__ import annotations

import logging

import numpy as np

from .errors import InvalidStateError, StructuralError
from .network import Conv2d, Linear, count_flops_params, effective_masks, relu

log = logging.getLogger(__name__)

# int.from_bytes(b"BWCP", "big")
PROBE_SEED = 0x42574350
EQUIVALENCE_TOL = 1e-4


def fold_whitening(conv, layer):
    """Compose the eval-mode BN + whitening of ``layer`` into ``conv``.

    The result computes W diag(gamma/sigma) (conv(z)) + W (beta - gamma mu / sigma),
    i.e. the layer's eval output before masking, as a single biased conv.
    """
    if not layer.stats_initialized:
        raise InvalidStateError("cannot fold a layer whose running statistics were never updated")
    w = layer.eval_matrix()
    std = np.sqrt(layer.running_var + layer.eps)
    scale = layer.gamma / std
    a = w * scale[None, :]
    weight = np.tensordot(a, conv.weight, axes=([1], [0]))
    shift = layer.beta - layer.gamma * layer.running_mean / std
    bias = w @ shift
    if conv.bias is not None:
        bias = bias + a @ conv.bias
    return Conv2d(conv.in_channels, conv.out_channels, conv.kernel, conv.stride,
                  conv.padding, weight=weight, bias=bias)


def _select(conv, out_idx, in_idx):
    return Conv2d(len(in_idx), len(out_idx), conv.kernel, conv.stride, conv.padding,
                  weight=conv.weight[np.ix_(out_idx, in_idx)],
                  bias=conv.bias[out_idx])


class PrunedUnit:
    def __init__(self, name, conv, kept):
        self.name = name
        self.conv = conv
        self.kept = np.asarray(kept, dtype=np.int64)


class PrunedBlock:
    def __init__(self, kind, units, shortcut=None):
        self.kind = kind
        self.units = units
        self.shortcut = shortcut

    def all_units(self):
        return self.units + ([self.shortcut] if self.shortcut is not None else [])

    def forward(self, x):
        h = x
        for u in self.units[:-1]:
            h = relu(u.conv.forward(h))
        out = self.units[-1].conv.forward(h)
        if self.kind == "identity":
            out = out + x
        elif self.kind == "downsample":
            out = out + self.shortcut.conv.forward(x)
        return relu(out)


class PrunedModel:
    """Inference-only network of biased convs; no normalization layers left."""

    def __init__(self, blocks, classifier, input_shape):
        self.blocks = blocks
        self.classifier = classifier
        self.input_shape = tuple(input_shape)

    def units(self):
        return [u for b in self.blocks for u in b.all_units()]

    def forward(self, x, training=False, rng=None):
        h = np.asarray(x, dtype=np.float64)
        for b in self.blocks:
            h = b.forward(h)
        return self.classifier.forward(h.mean(axis=(2, 3)))


def export_pruned(model, threshold=0.5, n_probes=100, seed=PROBE_SEED, tol=EQUIVALENCE_TOL):
    """Hard-prune ``model`` at ``threshold`` and verify the result.

    Returns (pruned model, report); ``report.residual`` is the largest
    absolute logit difference against the masked full model on random probes.
    """
    masks = model.eval_masks(threshold)
    applied, outputs = effective_masks(model, masks)
    for name, m in applied.items():
        if not np.any(m):
            raise StructuralError(f"every channel of {name} would be pruned")

    blocks = []
    cur = np.arange(model.input_shape[0])
    for b, out_mask in zip(model.blocks, outputs):
        block_in = cur
        units = []
        for u in b.units:
            keep = np.flatnonzero(applied[u.name])
            units.append(PrunedUnit(u.name, _select(fold_whitening(u.conv, u.bw), keep, cur), keep))
            cur = keep
        shortcut = None
        if b.shortcut is not None:
            u = b.shortcut
            keep = np.flatnonzero(applied[u.name])
            shortcut = PrunedUnit(u.name, _select(fold_whitening(u.conv, u.bw), keep, block_in), keep)
        blocks.append(PrunedBlock(b.kind, units, shortcut))
        cur = np.flatnonzero(out_mask)
    cls = model.classifier
    classifier = Linear(len(cur), cls.out_features, weight=cls.weight[:, cur], bias=cls.bias.copy())
    pruned = PrunedModel(blocks, classifier, model.input_shape)

    report = count_flops_params(model, masks)
    probes = np.random.default_rng(seed).standard_normal((n_probes,) + model.input_shape)
    saved = [(l, l.threshold) for l in model.bw_layers()]
    try:
        for l, _ in saved:
            l.threshold = threshold
        ref = model.forward(probes, training=False)
    finally:
        for l, t in saved:
            l.threshold = t
    got = pruned.forward(probes)
    report.residual = float(np.max(np.abs(ref - got)))
    report.verified = report.residual < tol
    if not report.verified:
        log.warning("pruned model deviates from the masked model by %.3e", report.residual)
    return pruned, report


def recount(pruned):
    """Weight/MAC counts of an exported network, from its own shapes."""
    return count_flops_params(pruned, None)
