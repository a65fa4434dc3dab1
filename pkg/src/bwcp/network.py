"""A small convolutional network built from conv -> BWCP -> ReLU units.

Blocks come in three kinds. ``plain`` is one unit. ``identity`` is a residual
block whose last unit is masked with the mask of the layer that produced the
block input. ``downsample`` has a conv+BWCP shortcut, and the last main-path
unit and the shortcut share the product of their two masks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError, PreconditionError
from .layer import BWCPLayer
from .sampler import ChannelMask

BLOCK_KINDS = ("plain", "identity", "downsample")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d:
    """Bias-free (unless ``bias`` is given) cross-correlation, im2col based."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=None,
                 weight=None, bias=None, rng=None):
        if kernel < 1:
            raise ParameterError("kernel size must be >= 1")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = kernel // 2 if padding is None else int(padding)
        shape = (out_channels, in_channels, kernel, kernel)
        if weight is None:
            rng = rng or np.random.default_rng(0)
            fan_in = in_channels * kernel * kernel
            weight = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != shape:
            raise DimensionError(f"weight shape {weight.shape} does not match {shape}")
        self.weight = weight
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.grad_weight = np.zeros_like(weight)
        self._cache = None

    def output_shape(self, h, w):
        return (conv_output_size(h, self.kernel, self.stride, self.padding),
                conv_output_size(w, self.kernel, self.stride, self.padding))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv expects {self.in_channels} input channels, got shape {x.shape}")
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = self.output_shape(h, w)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        # (n, ho, wo, c, k, k) -> rows of the patch matrix
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ self.weight.reshape(self.out_channels, -1).T
        if self.bias is not None:
            out += self.bias
        self._cache = (cols, x.shape, ho, wo)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad_out):
        cols, xshape, ho, wo = self._cache
        n, c, h, w = xshape
        k, s, p = self.kernel, self.stride, self.padding
        g = np.asarray(grad_out).transpose(0, 2, 3, 1).reshape(n * ho * wo, self.out_channels)
        self.grad_weight += (g.T @ cols).reshape(self.weight.shape)
        gcols = (g @ self.weight.reshape(self.out_channels, -1)).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + w] if p else gxp

    def zero_grad(self):
        self.grad_weight[:] = 0.0


def conv2d_forward(spec, x):
    return spec.forward(x)


def relu(x):
    return np.maximum(x, 0.0)


def residual_mask_combine(m_last, m_shortcut):
    """Elementwise product of the main-path and shortcut masks."""
    a = m_last.values if isinstance(m_last, ChannelMask) else np.asarray(m_last, dtype=np.float64)
    b = m_shortcut.values if isinstance(m_shortcut, ChannelMask) else np.asarray(m_shortcut, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot combine masks of lengths {a.shape} and {b.shape}")
    if isinstance(m_last, ChannelMask) and isinstance(m_shortcut, ChannelMask):
        return ChannelMask(a * b, m_last.probabilities * m_shortcut.probabilities,
                           m_last.tau, "combined")
    return a * b


class Linear:
    def __init__(self, in_features, out_features, rng=None, weight=None, bias=None):
        rng = rng or np.random.default_rng(0)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if weight is None:
            weight = rng.standard_normal((out_features, in_features)) * np.sqrt(1.0 / in_features)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(out_features) if bias is None else np.asarray(bias, dtype=np.float64)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.weight.T + self.bias

    def backward(self, g):
        self.grad_weight += g.T @ self._x
        self.grad_bias += g.sum(axis=0)
        return g @ self.weight

    def zero_grad(self):
        self.grad_weight[:] = 0.0
        self.grad_bias[:] = 0.0


# -- mask routing ------------------------------------------------------------
# A mask used somewhere in the graph must send its gradient back to the
# layer(s) that produced it; these tiny nodes do that bookkeeping.

class LayerMaskRef:
    def __init__(self, layer, name):
        self.layer = layer
        self.name = name

    @property
    def values(self):
        return self.layer.mask.values

    def accumulate(self, g):
        self.layer.mask_grad_acc += g


class ProductMaskRef:
    def __init__(self, a, b):
        self.a = a
        self.b = b
        self.values = a.values * b.values

    def accumulate(self, g):
        self.a.accumulate(g * self.b.values)
        self.b.accumulate(g * self.a.values)


@dataclass
class Unit:
    """conv followed by its BWCP layer."""

    conv: Conv2d
    bw: BWCPLayer
    name: str = ""

    def forward(self, x, training, rng):
        pre = self.conv.forward(x)
        self.bw.mask_grad_acc = np.zeros(self.bw.channels)
        xhat, _ = self.bw.forward(pre, training, rng)
        return xhat

    def backward(self, g_xhat):
        g_pre = self.bw.backward(g_xhat, self.bw.mask_grad_acc)
        return self.conv.backward(g_pre)


def _mask4(v):
    return v[None, :, None, None]


class Block:
    def __init__(self, kind, units, shortcut=None):
        if kind not in BLOCK_KINDS:
            raise ParameterError(f"unknown block kind {kind!r}")
        if kind == "downsample" and shortcut is None:
            raise ParameterError("downsample blocks need a shortcut unit")
        if kind != "downsample" and shortcut is not None:
            raise ParameterError(f"{kind} blocks take no shortcut unit")
        if kind == "plain" and len(units) != 1:
            raise ParameterError("plain blocks hold exactly one unit")
        if kind == "downsample" and units[-1].conv.out_channels != shortcut.conv.out_channels:
            raise DimensionError("main path and shortcut disagree on output channels")
        self.kind = kind
        self.units = list(units)
        self.shortcut = shortcut
        self._cache = None

    @property
    def out_channels(self):
        return self.units[-1].conv.out_channels

    def forward(self, x, stream, training, rng):
        """Returns (output, mask ref describing the output's live channels)."""
        if self.kind == "identity" and stream is None:
            raise ParameterError("an identity block needs a preceding masked layer")
        h = x
        inner = []
        for u in self.units[:-1]:
            xhat = u.forward(h, training, rng)
            ref = LayerMaskRef(u.bw, u.name)
            pre = xhat * _mask4(ref.values)
            inner.append((u, xhat, ref, pre))
            h = relu(pre)
        last = self.units[-1]
        xhat_last = last.forward(h, training, rng)
        if self.kind == "plain":
            ref = LayerMaskRef(last.bw, last.name)
            pre = xhat_last * _mask4(ref.values)
            self._cache = (inner, xhat_last, ref, None, pre)
            return relu(pre), ref
        if self.kind == "identity":
            ref = stream
            if ref.values.shape[0] != last.conv.out_channels:
                raise DimensionError("identity block changes the channel count")
            pre = xhat_last * _mask4(ref.values) + x
            self._cache = (inner, xhat_last, ref, None, pre)
            return relu(pre), ref
        xhat_s = self.shortcut.forward(x, training, rng)
        ref = ProductMaskRef(LayerMaskRef(last.bw, last.name),
                             LayerMaskRef(self.shortcut.bw, self.shortcut.name))
        m = _mask4(ref.values)
        pre = xhat_last * m + xhat_s * m
        self._cache = (inner, xhat_last, ref, xhat_s, pre)
        return relu(pre), ref

    def backward(self, g_out):
        inner, xhat_last, ref, xhat_s, pre = self._cache
        g_pre = g_out * (pre > 0)
        m = _mask4(ref.values)
        g_x = None
        if self.kind == "downsample":
            ref.accumulate(np.sum(g_pre * (xhat_last + xhat_s), axis=(0, 2, 3)))
            g_x = self.shortcut.backward(g_pre * m)
        else:
            ref.accumulate(np.sum(g_pre * xhat_last, axis=(0, 2, 3)))
            if self.kind == "identity":
                g_x = g_pre
        g_h = self.units[-1].backward(g_pre * m)
        for u, xhat, uref, upre in reversed(inner):
            g = g_h * (upre > 0)
            uref.accumulate(np.sum(g * xhat, axis=(0, 2, 3)))
            g_h = u.backward(g * _mask4(uref.values))
        return g_h if g_x is None else g_h + g_x

    def all_units(self):
        return self.units + ([self.shortcut] if self.shortcut is not None else [])


class Model:
    """Blocks, then global average pooling and a linear classifier."""

    def __init__(self, blocks, classifier, input_shape):
        if not blocks:
            raise ParameterError("a model needs at least one block")
        self.blocks = list(blocks)
        self.classifier = classifier
        self.input_shape = tuple(input_shape)
        self._pool_shape = None

    def units(self):
        return [u for b in self.blocks for u in b.all_units()]

    def bw_layers(self):
        return [u.bw for u in self.units()]

    def forward(self, x, training=False, rng=None):
        h = np.asarray(x, dtype=np.float64)
        stream = None
        for b in self.blocks:
            h, stream = b.forward(h, stream, training, rng)
        self._pool_shape = h.shape
        feats = h.mean(axis=(2, 3))
        return self.classifier.forward(feats)

    def backward(self, g_logits):
        g_feats = self.classifier.backward(g_logits)
        n, c, hh, ww = self._pool_shape
        g = np.broadcast_to(g_feats[:, :, None, None] / (hh * ww), self._pool_shape).copy()
        for b in reversed(self.blocks):
            g = b.backward(g)
        return g

    def zero_grad(self):
        for u in self.units():
            u.conv.zero_grad()
            u.bw.zero_grad()
        self.classifier.zero_grad()

    def named_parameters(self):
        """(name, value array, grad array, kind) for every trainable array."""
        out = []
        for u in self.units():
            out.append((f"{u.name}.conv.weight", u.conv.weight, u.conv.grad_weight, "weight"))
            out.append((f"{u.name}.bw.gamma", u.bw.gamma, u.bw.grad_gamma, "gamma"))
            out.append((f"{u.name}.bw.beta", u.bw.beta, u.bw.grad_beta, "beta"))
        out.append(("classifier.weight", self.classifier.weight, self.classifier.grad_weight, "weight"))
        out.append(("classifier.bias", self.classifier.bias, self.classifier.grad_bias, "bias"))
        return out

    def named_buffers(self):
        out = []
        for u in self.units():
            out.append((f"{u.name}.bw.running_mean", u.bw.running_mean))
            out.append((f"{u.name}.bw.running_var", u.bw.running_var))
            out.append((f"{u.name}.bw.running_rinv", u.bw.running_rinv.value))
        return out

    def eval_masks(self, threshold=None):
        """Hard per-layer masks keyed by unit name."""
        return {u.name: u.bw.eval_mask(threshold) for u in self.units()}


# -- construction ------------------------------------------------------------

DEFAULT_TOPOLOGY = [
    {"kind": "plain", "out": 16, "stride": 2},
    {"kind": "plain", "out": 16, "stride": 1},
    {"kind": "plain", "out": 32, "stride": 2},
    {"kind": "identity", "out": 32, "stride": 1},
    {"kind": "downsample", "out": 64, "stride": 2},
]


def build_model(topology, input_shape, num_classes, layer_kwargs, rng, whiten="all",
                block_depth=2):
    """Build a Model from a list of block dicts ``{"kind", "out", "stride"}``.

    ``whiten`` selects which BWCP layers whiten: "all", "last" (the last
    unit of each block and every shortcut) or "none".
    """
    if whiten not in ("all", "last", "none"):
        raise ParameterError(f"unknown whiten selection {whiten!r}")
    c_in = input_shape[0]
    blocks = []
    for bi, spec in enumerate(topology):
        kind = spec["kind"]
        out = int(spec["out"])
        stride = int(spec.get("stride", 1))
        kernel = int(spec.get("kernel", 3))
        depth = 1 if kind == "plain" else int(spec.get("depth", block_depth))
        if kind == "identity" and (out != c_in or stride != 1):
            raise ParameterError(f"block {bi}: identity blocks keep channels and resolution")
        units = []
        ch = c_in
        for li in range(depth):
            last = li == depth - 1
            wh = whiten == "all" or (whiten == "last" and last)
            conv = Conv2d(ch, out, kernel, stride if li == 0 else 1, rng=rng)
            bw = BWCPLayer(out, whiten=wh, **layer_kwargs)
            units.append(Unit(conv, bw, f"blocks.{bi}.units.{li}"))
            ch = out
        shortcut = None
        if kind == "downsample":
            conv = Conv2d(c_in, out, 1, stride, padding=0, rng=rng)
            bw = BWCPLayer(out, whiten=whiten != "none", **layer_kwargs)
            shortcut = Unit(conv, bw, f"blocks.{bi}.shortcut")
        blocks.append(Block(kind, units, shortcut))
        c_in = out
    classifier = Linear(c_in, num_classes, rng=rng)
    return Model(blocks, classifier, input_shape)


# -- accounting --------------------------------------------------------------

@dataclass
class ConvCount:
    name: str
    kernel: int
    in_kept: int
    in_total: int
    out_kept: int
    out_total: int
    out_hw: tuple
    macs: int
    params: int
    macs_full: int
    params_full: int


@dataclass
class PruneReport:
    kept: dict
    convs: List[ConvCount]
    params_before: int
    params_after: int
    macs_before: int
    macs_after: int
    residual: Optional[float] = None
    verified: Optional[bool] = None
    flop_convention: str = "1 MAC = 2 FLOPs"

    @property
    def flops_before(self):
        return 2 * self.macs_before

    @property
    def flops_after(self):
        return 2 * self.macs_after

    @property
    def params_reduction(self):
        return 100.0 * (1.0 - self.params_after / self.params_before)

    @property
    def flops_reduction(self):
        return 100.0 * (1.0 - self.macs_after / self.macs_before)

    @property
    def channel_fraction_kept(self):
        total = sum(c.out_total for c in self.convs)
        return sum(c.out_kept for c in self.convs) / total

    def to_dict(self):
        return {
            "flop_convention": self.flop_convention,
            "kept_channels": {k: [int(i) for i in v] for k, v in self.kept.items()},
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "macs_before": self.macs_before,
            "macs_after": self.macs_after,
            "params_reduction_pct": self.params_reduction,
            "flops_reduction_pct": self.flops_reduction,
            "equivalence_residual": self.residual,
            "verified": self.verified,
            "layers": [c.__dict__ | {"out_hw": list(c.out_hw)} for c in self.convs],
        }


def effective_masks(model, masks):
    """Resolve residual sharing: the mask actually applied to each unit's output.

    ``masks`` maps unit name -> hard mask (ChannelMask or 0/1 array). Returns
    (per-unit applied masks, per-block output masks).
    """
    def vals(m):
        return m.values if isinstance(m, ChannelMask) else np.asarray(m, dtype=np.float64)

    applied = {}
    outputs = []
    stream = None
    for b in model.blocks:
        for u in b.units[:-1]:
            applied[u.name] = vals(masks[u.name])
        last = b.units[-1]
        if b.kind == "plain":
            m = vals(masks[last.name])
        elif b.kind == "identity":
            m = stream
        else:
            m = vals(masks[last.name]) * vals(masks[b.shortcut.name])
            applied[b.shortcut.name] = m
        applied[last.name] = m
        stream = m
        outputs.append(m)
    return applied, outputs


def count_flops_params(model, masks=None):
    """Multiply-accumulate and weight counts of every conv plus the classifier.

    A conv costs K^2 * C_in_kept * C_out_kept * H_out * W_out MACs; ``masks``
    must be hard (0/1). ``None`` means nothing is pruned.
    """
    units = model.units()
    if masks is None:
        masks = {u.name: np.ones(u.conv.out_channels) for u in units}
    for name, m in masks.items():
        v = m.values if isinstance(m, ChannelMask) else np.asarray(m)
        if not np.all((v == 0) | (v == 1)):
            raise PreconditionError(f"mask for {name} is not hard 0/1")
    applied, outputs = effective_masks(model, masks)
    c, h, w = model.input_shape
    in_mask = np.ones(c)
    convs = []
    kept = {}
    for b, out_mask in zip(model.blocks, outputs):
        block_in = in_mask
        block_hw = (h, w)
        cur = in_mask
        for u in b.units:
            conv = u.conv
            h, w = conv.output_shape(h, w)
            om = applied[u.name]
            convs.append(_conv_count(u.name, conv, cur, om, (h, w)))
            kept[u.name] = np.flatnonzero(om)
            cur = om
        if b.shortcut is not None:
            u = b.shortcut
            hw = u.conv.output_shape(*block_hw)
            om = applied[u.name]
            convs.append(_conv_count(u.name, u.conv, block_in, om, hw))
            kept[u.name] = np.flatnonzero(om)
        in_mask = out_mask
    feats = int(np.count_nonzero(in_mask))
    cls = model.classifier
    cls_params = feats * cls.out_features
    cls_full = cls.in_features * cls.out_features
    return PruneReport(
        kept=kept,
        convs=convs,
        params_before=sum(x.params_full for x in convs) + cls_full,
        params_after=sum(x.params for x in convs) + cls_params,
        macs_before=sum(x.macs_full for x in convs) + cls_full,
        macs_after=sum(x.macs for x in convs) + cls_params,
    )


def _conv_count(name, conv, in_mask, out_mask, hw):
    k2 = conv.kernel * conv.kernel
    ik = int(np.count_nonzero(in_mask))
    ok = int(np.count_nonzero(out_mask))
    pos = hw[0] * hw[1]
    return ConvCount(
        name=name, kernel=conv.kernel,
        in_kept=ik, in_total=conv.in_channels,
        out_kept=ok, out_total=conv.out_channels,
        out_hw=tuple(hw),
        macs=k2 * ik * ok * pos, params=k2 * ik * ok,
        macs_full=k2 * conv.in_channels * conv.out_channels * pos,
        params_full=k2 * conv.in_channels * conv.out_channels,
    )
