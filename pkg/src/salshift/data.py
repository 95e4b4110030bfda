"""Datasets: a synthetic planted-shift task and the CIFAR-10 binary format."""
from __future__ import annotations

import glob
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .shift import ShiftLayer, ShiftTable, shift_forward
from .tensor import Rng

CIFAR_RECORD = 3073
CIFAR_MEAN_STD_EPS = 1e-8


# --------------------------------------------------------------------------
# planted shifts


@dataclass
class PlantedShiftSpec:
    """Synthetic task whose ideal first layer is a known shift table.

    Samples are C x S x S patches of unit-normal noise. Class ``d`` scores
    ``sum_c w[d, c] * x[c, planted_table[d, c]]`` (the single valid output of
    a shift layer); the label is the highest-scoring class and samples whose
    top two scores are closer than ``margin`` are redrawn.

    With two classes only the score difference is observable, so the rows
    share their positions and carry weights +1 and -1; distinct rows would be
    interchangeable with their sign-flipped swap. With three or more classes
    every channel gets distinct positions per class and unit weights.
    """

    C: int = 8
    S: int = 3
    classes: int = 2
    noise_sigma: float = 0.0
    seed: int = 0
    margin: float = 0.5
    planted_table: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.classes > self.S * self.S:
            raise ValueError("need classes <= S*S so planted positions differ on every channel")
        if self.C < 1 or self.S < 1 or self.S % 2 == 0:
            raise ValueError(f"need C >= 1 and odd S, got C={self.C}, S={self.S}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.planted_table is None:
            self.planted_table = self._draw_table()
        self.planted_table = np.asarray(self.planted_table, dtype=np.int64)
        if self.planted_table.shape != (self.classes, self.C):
            raise ValueError(f"planted_table must have shape {(self.classes, self.C)}")
        if self.planted_table.min() < 0 or self.planted_table.max() >= self.S * self.S:
            raise ValueError(f"planted positions must lie in [0, {self.S * self.S})")

    def _draw_table(self) -> np.ndarray:
        rng = Rng(self.seed + 7919)
        s2 = self.S * self.S
        if self.classes == 2:
            row = rng.integers(0, s2, self.C)
            return np.stack([row, row])
        return np.stack([rng.permutation(s2)[: self.classes] for _ in range(self.C)], axis=1)

    @property
    def H(self) -> int:
        return self.S

    @property
    def W(self) -> int:
        return self.S

    @property
    def table(self) -> ShiftTable:
        return ShiftTable(self.planted_table, self.S)

    @property
    def planted_weights(self) -> np.ndarray:
        if self.classes == 2:
            return np.stack([np.ones(self.C), -np.ones(self.C)])
        return np.ones((self.classes, self.C))

    def oracle(self) -> ShiftLayer:
        """The planted classifier as an unpadded shift layer."""
        return ShiftLayer(self.table, self.planted_weights, padding=0)


def planted_scores(x: np.ndarray, spec: PlantedShiftSpec) -> np.ndarray:
    """Class scores (N, classes) of the planted shift classifier."""
    x = np.asarray(x, dtype=np.float64)
    return shift_forward(x, spec.oracle()).reshape(len(x), spec.classes)


def gen_planted(spec: PlantedShiftSpec, n: int, seed: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """``n`` samples (N, C, S, S) float32 with int64 labels; deterministic per seed."""
    rng = Rng(spec.seed if seed is None else seed)
    shape = (spec.C, spec.S, spec.S)
    xs, ys, have = [], [], 0
    while have < n:
        batch = max(2 * (n - have), 64)
        x = rng.normal(size=(batch,) + shape, dtype=np.float64)
        scores = planted_scores(x, spec)
        top2 = np.sort(scores, axis=1)[:, -2:]
        keep = (top2[:, 1] - top2[:, 0]) > spec.margin
        xs.append(x[keep])
        ys.append(scores[keep].argmax(axis=1))
        have += int(keep.sum())
    x = np.concatenate(xs)[:n]
    labels = np.concatenate(ys)[:n]
    if spec.noise_sigma:
        x = x + spec.noise_sigma * rng.normal(size=x.shape, dtype=np.float64)
    return x.astype(np.float32), labels.astype(np.int64)


# --------------------------------------------------------------------------
# CIFAR-10 binary format: 1 label byte + 3072 pixel bytes (R, G, B planes, 32x32 row-major)


def read_cifar_records(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """Raw (labels uint8 (N,), pixels uint8 (N, 3, 32, 32)) from one binary file."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    recs = raw.reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0].copy()
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    return labels, recs[:, 1:].reshape(-1, 3, 32, 32).copy()


def write_cifar_records(path: str, labels, pixels) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    if pixels.shape[1] != CIFAR_RECORD - 1:
        raise ValueError(f"expected 3072 pixel bytes per record, got {pixels.shape[1]}")
    np.concatenate([labels, pixels], axis=1).tofile(path)


def cifar_files(path: str, train: bool = True):
    if os.path.isfile(path):
        return [path]
    pattern = "data_batch_*.bin" if train else "test_batch.bin"
    files = sorted(glob.glob(os.path.join(path, pattern)))
    if not files:
        raise FileNotFoundError(f"no CIFAR-10 binary files matching {pattern} under {path}")
    return files


def load_cifar10(path: str, count: Optional[int] = None, normalize: str = "unit", train: bool = True,
                 seed: Optional[int] = None, stats: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """Load CIFAR-10 records as float32 (N, 3, 32, 32) and int64 labels.

    ``count`` keeps the first ``count`` records, or a random subset when a
    ``seed`` is given. ``normalize='unit'`` scales to [0, 1];
    ``'standardize'`` subtracts per-channel mean and divides by std, taken
    from ``stats`` or else from the loaded subset.
    """
    labels, pixels = [], []
    for f in cifar_files(path, train):
        lab, pix = read_cifar_records(f)
        labels.append(lab)
        pixels.append(pix)
        if count is not None and seed is None and sum(len(v) for v in labels) >= count:
            break
    labels = np.concatenate(labels) if labels else np.zeros(0, np.uint8)
    pixels = np.concatenate(pixels) if pixels else np.zeros((0, 3, 32, 32), np.uint8)
    if count is not None:
        if count > len(labels):
            raise ValueError(f"requested {count} records but only {len(labels)} available")
        idx = np.sort(Rng(seed).permutation(len(labels))[:count]) if seed is not None else np.arange(count)
        labels, pixels = labels[idx], pixels[idx]
    x = pixels.astype(np.float32) / 255.0
    if normalize == "standardize" and len(x):
        mean, std = stats if stats is not None else channel_stats(x)
        x = (x - mean.reshape(1, 3, 1, 1)) / std.reshape(1, 3, 1, 1)
    elif normalize not in ("unit", "standardize"):
        raise ValueError(f"unknown normalization {normalize!r}")
    return x.astype(np.float32), labels.astype(np.int64)


def channel_stats(x: np.ndarray):
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3)) + CIFAR_MEAN_STD_EPS
    return mean.astype(np.float32), std.astype(np.float32)


# --------------------------------------------------------------------------
# augmentation: zero-pad by 4, random 32x32 crop, horizontal flip with p = 1/2


def hflip(x: np.ndarray) -> np.ndarray:
    return x[..., ::-1].copy()


def crop(x: np.ndarray, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Crop of the zero-padded image at offset (dy, dx) in [0, 2*pad]."""
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)])
    return xp[..., dy : dy + h, dx : dx + w].copy()


def augment(x: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    n, c, h, w = x.shape
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i in range(n):
        dy, dx = offs[i]
        img = xp[i, :, dy : dy + h, dx : dx + w]
        out[i] = img[..., ::-1] if flips[i] else img
    return out


# --------------------------------------------------------------------------
# dataset container: magic, uint32 N/C/H/W, uint32 labels, float32 samples (little-endian)

_MAGIC = b"SALDATA1"


def save_dataset(path: str, x: np.ndarray, labels: np.ndarray) -> None:
    x = np.asarray(x, dtype="<f4")
    if x.ndim != 4 or len(labels) != len(x):
        raise ValueError("expected (N, C, H, W) samples and N labels")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<4I", *x.shape))
        fh.write(np.asarray(labels, dtype="<u4").tobytes())
        fh.write(x.tobytes())


def load_dataset(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a salshift dataset file")
    n, c, h, w = struct.unpack_from("<4I", blob, 8)
    off = 8 + 16
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    expected = off + 4 * n * c * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    x = np.frombuffer(blob, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    return x.astype(np.float32), labels
