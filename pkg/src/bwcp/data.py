"""Datasets: a seeded synthetic teacher task and an on-disk npz layout.

Directory layout for ``dataset = "directory"``::

    <data_dir>/train.npz   arrays x (N, C, H, W) float, y (N,) int
    <data_dir>/test.npz    same keys
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

CHUNK = 500


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def input_shape(self):
        return self.x_train.shape[1:]


def worker_count():
    """Thread cap for data preparation, from BWCP_THREADS (default 1)."""
    raw = os.environ.get("BWCP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


class _Teacher:
    """Frozen random conv -> ReLU -> pool -> linear labeller."""

    def __init__(self, rng, in_channels, num_classes, hidden=12, kernel=5):
        fan_in = in_channels * kernel * kernel
        self.w = rng.standard_normal((hidden, in_channels, kernel, kernel)) / np.sqrt(fan_in)
        self.b = 0.3 * rng.standard_normal(hidden)
        self.head = rng.standard_normal((num_classes, 2 * hidden))
        self.kernel = kernel

    def features(self, x):
        from numpy.lib.stride_tricks import sliding_window_view
        k = self.kernel
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::2, ::2]
        act = np.maximum(np.einsum("nchwij,ocij->nohw", win, self.w, optimize=True)
                         + self.b[None, :, None, None], 0.0)
        # global mean and max pooling
        return np.concatenate([act.mean(axis=(2, 3)), act.max(axis=(2, 3))], axis=1)


def _smooth_images(rng, n, c, size):
    """Gaussian noise low-pass filtered in Fourier space (natural-ish spectra)."""
    noise = rng.standard_normal((n, c, size, size))
    f = np.fft.fftfreq(size)
    r = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    spectrum = 1.0 / (1.0 + (r / 0.12) ** 2)
    img = np.fft.ifft2(np.fft.fft2(noise) * spectrum).real
    img /= img.std(axis=(1, 2, 3), keepdims=True)
    return img


def synthetic_dataset(n_train, n_test, image_size=32, in_channels=3, num_classes=10,
                      seed=1234, margin=0.5, oversample=3):
    """Random smooth images labelled by a frozen random teacher network.

    Teacher logits are standardized per class over a candidate pool
    ``oversample`` times larger than needed, then only samples whose top two
    logits differ by at least ``margin`` are kept (in pool order), so labels
    are balanced-ish and not dominated by boundary noise.
    """
    total = n_train + n_test
    pool = oversample * total
    root = np.random.SeedSequence(seed)
    teacher_seq, *chunk_seqs = root.spawn(1 + -(-pool // CHUNK))
    teacher = _Teacher(np.random.default_rng(teacher_seq), in_channels, num_classes)
    sizes = [min(CHUNK, pool - i * CHUNK) for i in range(len(chunk_seqs))]

    def make(args):
        seq, size = args
        x = _smooth_images(np.random.default_rng(seq), size, in_channels, image_size)
        return x, teacher.features(x)

    with ThreadPoolExecutor(max_workers=worker_count()) as ex:
        parts = list(ex.map(make, zip(chunk_seqs, sizes)))
    x = np.concatenate([p[0] for p in parts])
    feats = np.concatenate([p[1] for p in parts])
    feats = (feats - feats.mean(axis=0)) / (feats.std(axis=0) + 1e-12)
    logits = feats @ teacher.head.T
    logits = (logits - logits.mean(axis=0)) / logits.std(axis=0)
    top2 = np.sort(logits, axis=1)[:, -2:]
    keep = np.flatnonzero(top2[:, 1] - top2[:, 0] >= margin)
    if len(keep) < total:
        raise ConfigError(f"only {len(keep)} of {pool} candidates clear the label margin {margin}; "
                          f"raise oversample or lower margin")
    keep = keep[:total]
    x, y = x[keep], np.argmax(logits[keep], axis=1)
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def load_directory(path):
    path = Path(path)
    out = []
    for split in ("train", "test"):
        f = path / f"{split}.npz"
        if not f.exists():
            raise ConfigError(f"data directory {path} has no {split}.npz")
        with np.load(f) as z:
            out += [np.asarray(z["x"], dtype=np.float64), np.asarray(z["y"], dtype=np.int64)]
    return Dataset(*out)


def load_dataset(cfg):
    if cfg.dataset == "synthetic":
        return synthetic_dataset(cfg.n_train, cfg.n_test, cfg.image_size, cfg.in_channels,
                                 cfg.num_classes, cfg.data_seed)
    return load_directory(cfg.data_dir)
