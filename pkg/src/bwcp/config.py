"""Experiment configuration: one flat JSON document per experiment.

Every key has a default; unknown keys and out-of-range values are rejected
with the line of the offending key in the message.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .network import BLOCK_KINDS, DEFAULT_TOPOLOGY


@dataclass
class ExperimentConfig:
    # model
    topology: list = field(default_factory=lambda: copy.deepcopy(DEFAULT_TOPOLOGY))
    in_channels: int = 3
    image_size: int = 32
    num_classes: int = 10
    block_depth: int = 2
    # BWCP layer
    T: int = 2
    g: float = 0.1
    tau: float = 0.5
    delta: float = 0.05
    eps: float = 1e-5
    group_size: int = 0
    whiten: str = "all"
    mask: str = "gumbel"
    threshold: float = 0.5
    # sparse regularizer, effective weights are lambda * lambda_scale
    lambda1: float = 4e-5
    lambda2: float = 8e-5
    lambda_scale: float = 1.0
    # optimization
    lr: float = 0.1
    lr_decay_epochs: list = field(default_factory=list)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    affine_lr_scale: float = 1.0
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    # BN statistics re-measured under the inference masks after each epoch
    recalibrate_samples: int = 0
    # data and output
    dataset: str = "synthetic"
    data_dir: str = ""
    n_train: int = 4000
    n_test: int = 1000
    data_seed: int = 1234
    out_dir: str = "runs/default"

    @property
    def effective_lambda1(self):
        return self.lambda1 * self.lambda_scale

    @property
    def effective_lambda2(self):
        return self.lambda2 * self.lambda_scale

    @property
    def input_shape(self):
        return (self.in_channels, self.image_size, self.image_size)

    def layer_kwargs(self):
        return {"T": self.T, "eps": self.eps, "momentum": self.g, "delta": self.delta,
                "tau": self.tau, "group_size": self.group_size or None, "mask": self.mask,
                "threshold": self.threshold}

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _range_checks(cfg):
    """Yield (key, message) for every out-of-range field."""
    pos_int = ("in_channels", "image_size", "num_classes", "block_depth", "T", "n_train")
    for k in pos_int:
        if getattr(cfg, k) < 1:
            yield k, "must be >= 1"
    if cfg.num_classes < 2:
        yield "num_classes", "must be >= 2"
    if cfg.batch_size < 2:
        yield "batch_size", "must be >= 2 (batch statistics)"
    for k in ("epochs", "group_size", "n_test", "seed", "data_seed", "recalibrate_samples"):
        if getattr(cfg, k) < 0:
            yield k, "must be >= 0"
    if not 0.0 < cfg.g <= 1.0:
        yield "g", "must lie in (0, 1]"
    if not 0.0 <= cfg.momentum < 1.0:
        yield "momentum", "must lie in [0, 1)"
    if not 0.0 < cfg.threshold < 1.0:
        yield "threshold", "must lie in (0, 1)"
    for k in ("tau", "eps"):
        if not getattr(cfg, k) > 0:
            yield k, "must be > 0"
    for k in ("delta", "lambda1", "lambda2", "lambda_scale", "lr", "weight_decay",
              "affine_lr_scale"):
        if not getattr(cfg, k) >= 0:
            yield k, "must be >= 0"
    if not 0.0 < cfg.lr_decay <= 1.0:
        yield "lr_decay", "must lie in (0, 1]"
    if any((not isinstance(e, int)) or e < 0 for e in cfg.lr_decay_epochs):
        yield "lr_decay_epochs", "must be a list of non-negative integers"
    if cfg.whiten not in ("all", "last", "none"):
        yield "whiten", "must be one of all, last, none"
    if cfg.mask not in ("gumbel", "ste", "none"):
        yield "mask", "must be one of gumbel, ste, none"
    if cfg.dataset not in ("synthetic", "directory"):
        yield "dataset", "must be synthetic or directory"
    if cfg.dataset == "directory" and not cfg.data_dir:
        yield "data_dir", "is required when dataset is directory"
    if not isinstance(cfg.topology, list) or not cfg.topology:
        yield "topology", "must be a non-empty list of blocks"
        return
    for i, b in enumerate(cfg.topology):
        if not isinstance(b, dict) or b.get("kind") not in BLOCK_KINDS:
            yield "topology", f"block {i} needs kind in {BLOCK_KINDS}"
        elif not isinstance(b.get("out"), int) or b["out"] < 1:
            yield "topology", f"block {i} needs a positive integer 'out'"
        elif set(b) - {"kind", "out", "stride", "kernel", "depth"}:
            yield "topology", f"block {i} has unknown keys {sorted(set(b) - {'kind', 'out', 'stride', 'kernel', 'depth'})}"


def _coerce(key, value):
    want = _TYPES[key]
    if want == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if want == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError("expected a number")
        return float(value)
    if want == "str":
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if want == "list":
        if not isinstance(value, list):
            raise TypeError("expected a list")
        return value
    return value


def _key_lines(text):
    """Line number of the first top-level occurrence of each key."""
    lines = {}
    for no, line in enumerate(text.splitlines(), start=1):
        m = re.match(r'\s*"([^"]+)"\s*:', line)
        if m and m.group(1) not in lines:
            lines[m.group(1)] = no
    return lines


def from_dict(data, lines=None):
    lines = lines or {}
    cfg = ExperimentConfig()
    for key, value in data.items():
        line = lines.get(key)
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", line)
        try:
            setattr(cfg, key, _coerce(key, value))
        except TypeError as e:
            raise ConfigError(f"{key}: {e}, got {value!r}", line) from None
    for key, msg in _range_checks(cfg):
        raise ConfigError(f"{key} {msg}", lines.get(key))
    return cfg


def parse_config(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e.msg}", e.lineno) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", 1)
    return from_dict(data, _key_lines(text))


def load_config(path, overrides=None):
    """Read a config file; ``overrides`` is a dict of key -> value applied on top."""
    text = Path(path).read_text()
    cfg = parse_config(text)
    if overrides:
        data = cfg.to_dict()
        for k in overrides:
            if k not in _TYPES:
                raise ConfigError(f"unknown override key {k!r}")
        data.update(overrides)
        cfg = from_dict(data)
    return cfg


def parse_override(item):
    """``key=value`` with value parsed as JSON, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
