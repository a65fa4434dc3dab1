"""Training runs on disk: metrics.csv, per-epoch checkpoints, resume, and
(de)serialization of full and pruned models."""
from __future__ import annotations

import csv
import io
import logging
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import from_dict
from .data import load_dataset
from .errors import CheckpointError
from .export import PrunedBlock, PrunedModel, PrunedUnit
from .network import Conv2d, Linear, build_model, count_flops_params
from .trainer import SGD, OptimConfig, RegConfig, evaluate, recalibrate_bn, train_step

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "ce_loss", "sparse_loss", "total_loss", "accuracy", "mean_mask",
                  "active_channel_fraction"]


def model_from_config(cfg, rng):
    return build_model(cfg.topology, cfg.input_shape, cfg.num_classes, cfg.layer_kwargs(), rng,
                       whiten=cfg.whiten, block_depth=cfg.block_depth)


def optim_config(cfg):
    return OptimConfig(lr=cfg.lr, lr_decay_epochs=list(cfg.lr_decay_epochs), lr_decay=cfg.lr_decay,
                       momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       affine_lr_scale=cfg.affine_lr_scale, epochs=cfg.epochs,
                       batch_size=cfg.batch_size, seed=cfg.seed)


def reg_config(cfg):
    return RegConfig(cfg.effective_lambda1, cfg.effective_lambda2)


def active_channel_fraction(model, threshold=None):
    """Fraction of channels surviving hard pruning (residual sharing applied)."""
    return count_flops_params(model, model.eval_masks(threshold)).channel_fraction_kept


def _format_row(row):
    return [str(row[0])] + [repr(float(v)) for v in row[1:]]


def _write_metrics(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow(r)
    Path(path).write_text(buf.getvalue())


def read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def save_training_checkpoint(path, model, optimizer, cfg, rng, epoch, rows):
    meta = {"kind": "bwcp", "config": cfg.to_dict(), "epoch": epoch,
            "rng_state": ckpt.rng_state(rng), "flags": ckpt.model_flags(model),
            "metrics": rows}
    ckpt.save(path, ckpt.model_tensors(model, optimizer), meta)


def load_training_checkpoint(path):
    """Returns (model, optimizer, config, rng, epoch, metric rows)."""
    tensors, meta = ckpt.load(path)
    if meta.get("kind") != "bwcp":
        raise CheckpointError(f"{path} is a {meta.get('kind')!r} checkpoint, expected 'bwcp'")
    cfg = from_dict(meta["config"])
    model = model_from_config(cfg, np.random.default_rng(0))
    optimizer = SGD(model, cfg.momentum, cfg.weight_decay, cfg.affine_lr_scale)
    ckpt.restore_model(model, tensors, meta["flags"], optimizer)
    rng = ckpt.rng_from_state(meta["rng_state"])
    return model, optimizer, cfg, rng, meta["epoch"], meta["metrics"]


def load_any(path):
    """Load either checkpoint kind; returns (model, config, kind)."""
    _, meta = ckpt.load(path)
    if meta.get("kind") == "pruned":
        model, cfg, _ = load_pruned(path)
        return model, cfg, "pruned"
    model, _, cfg, _, _, _ = load_training_checkpoint(path)
    return model, cfg, "bwcp"


def checkpoint_name(epoch):
    return f"checkpoint_epoch{epoch:03d}.bwcp"


def train(cfg, out_dir=None, resume=False, data=None):
    """Run (or resume) a training experiment; returns (model, metric rows).

    Writes ``metrics.csv``, ``config.json``, ``checkpoint_epochNNN.bwcp`` for
    every epoch including 0, and ``final.bwcp``.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else load_dataset(cfg)
    start = 0
    rows = []
    model = optimizer = rng = None
    if resume:
        done = sorted(out.glob("checkpoint_epoch*.bwcp"))
        if done:
            model, optimizer, saved_cfg, rng, start, rows = load_training_checkpoint(done[-1])
            loose = {"epochs", "out_dir"}
            a = {k: v for k, v in saved_cfg.to_dict().items() if k not in loose}
            b = {k: v for k, v in cfg.to_dict().items() if k not in loose}
            if a != b:
                raise CheckpointError("resume config differs from the checkpointed one")
            log.info("resuming from %s (epoch %d)", done[-1], start)
    if model is None:
        rng = np.random.default_rng(cfg.seed)
        model = model_from_config(cfg, rng)
        optimizer = SGD(model, cfg.momentum, cfg.weight_decay, cfg.affine_lr_scale)
    (out / "config.json").write_text(cfg.dumps())

    oc, reg = optim_config(cfg), reg_config(cfg)
    if start == 0:
        save_training_checkpoint(out / checkpoint_name(0), model, optimizer, cfg, rng, 0, rows)
    _write_metrics(out / "metrics.csv", rows)
    n = len(data.x_train)
    bs = cfg.batch_size
    for epoch in range(start, cfg.epochs):
        lr = oc.lr_at(epoch)
        order = rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for i in range(0, n - bs + 1, bs):
            idx = order[i:i + bs]
            m = train_step(model, (data.x_train[idx], data.y_train[idx]), optimizer, reg, rng, lr)
            sums += (m["ce_loss"], m["sparse_loss"], m["total_loss"], m["mean_mask"])
            steps += 1
        means = sums / max(steps, 1)
        if cfg.recalibrate_samples:
            recalibrate_bn(model, data.x_train[:cfg.recalibrate_samples])
        acc, _ = evaluate(model, data.x_test, data.y_test)
        row = _format_row([epoch + 1, means[0], means[1], means[2], acc, means[3],
                           active_channel_fraction(model)])
        rows.append(row)
        log.info("epoch %d: ce %.4f acc %.4f active %.3f", epoch + 1, means[0], acc, float(row[-1]))
        save_training_checkpoint(out / checkpoint_name(epoch + 1), model, optimizer, cfg, rng,
                                 epoch + 1, rows)
        _write_metrics(out / "metrics.csv", rows)
    save_training_checkpoint(out / "final.bwcp", model, optimizer, cfg, rng, cfg.epochs, rows)
    return model, rows


# -- pruned models ----------------------------------------------------------------

def _unit_meta(u):
    c = u.conv
    return {"name": u.name, "kernel": c.kernel, "stride": c.stride, "padding": c.padding,
            "in": c.in_channels, "out": c.out_channels}


def save_pruned(path, pruned, cfg, report):
    tensors, blocks = {}, []
    for b in pruned.blocks:
        for u in b.all_units():
            tensors[f"{u.name}.weight"] = u.conv.weight
            tensors[f"{u.name}.bias"] = u.conv.bias
            tensors[f"{u.name}.kept"] = u.kept
        blocks.append({"kind": b.kind, "units": [_unit_meta(u) for u in b.units],
                       "shortcut": _unit_meta(b.shortcut) if b.shortcut else None})
    tensors["classifier.weight"] = pruned.classifier.weight
    tensors["classifier.bias"] = pruned.classifier.bias
    meta = {"kind": "pruned", "config": cfg.to_dict(), "blocks": blocks,
            "input_shape": list(pruned.input_shape), "report": report.to_dict()}
    ckpt.save(path, tensors, meta)


def load_pruned(path):
    """Returns (pruned model, config, stored report dict)."""
    tensors, meta = ckpt.load(path)
    if meta.get("kind") != "pruned":
        raise CheckpointError(f"{path} is not a pruned checkpoint")

    def unit(m):
        conv = Conv2d(m["in"], m["out"], m["kernel"], m["stride"], m["padding"],
                      weight=tensors[f"{m['name']}.weight"], bias=tensors[f"{m['name']}.bias"])
        return PrunedUnit(m["name"], conv, tensors[f"{m['name']}.kept"])

    blocks = [PrunedBlock(b["kind"], [unit(m) for m in b["units"]],
                          unit(b["shortcut"]) if b["shortcut"] else None) for b in meta["blocks"]]
    w = tensors["classifier.weight"]
    cls = Linear(w.shape[1], w.shape[0], weight=w, bias=tensors["classifier.bias"])
    return PrunedModel(blocks, cls, meta["input_shape"]), from_dict(meta["config"]), meta["report"]
