"""Synthetic data generation and composite watermark construction.

The task is a 10-class classification problem over tiny 8x8 single-channel
"images" (flattened to 64 floats in [0, 1]). Each class is a Gaussian blob
around a seeded mean pattern; the scale is deliberately small enough that a
full train/attack/verify cycle runs in seconds while spatial operations
(half-image masks, quarter-turn rotations) stay meaningful.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .numerics import RandomSource, read_tensor, write_tensor

DATASET_MAGIC = b"NHTD"
WATERMARK_MAGIC = b"NHTW"


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.labels) != len(self.inputs):
            raise ValueError("inputs must be n x D with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def class_rows(self, c: int) -> np.ndarray:
        return self.inputs[self.labels == c]


def _box_blur(grid: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge clamping; adds spatial correlation so the
    mean patterns look image-like rather than per-pixel noise."""
    padded = np.pad(grid, 1, mode="edge")
    out = np.zeros_like(grid)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            out += padded[dy : dy + grid.shape[0], dx : dx + grid.shape[1]]
    return out / 9.0


def _class_means(classes: int, dim: int, rng: RandomSource, image_mode: bool) -> np.ndarray:
    means = np.empty((classes, dim))
    side = int(math.isqrt(dim))
    for c in range(classes):
        raw = rng.uniform(0.0, 1.0, dim)
        if image_mode and side * side == dim:
            grid = _box_blur(raw.reshape(side, side))
            lo, hi = grid.min(), grid.max()
            if hi > lo:
                # blur shrinks contrast; rescale so class means stay well
                # separated relative to the sampling spread
                grid = 0.1 + 0.8 * (grid - lo) / (hi - lo)
            raw = grid.ravel()
        else:
            raw = 0.1 + 0.8 * raw
        means[c] = raw
    return means


def gen_blobs(
    classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    split: str = "train",
    image_mode: bool = True,
    mean_shift: float = 0.0,
) -> Dataset:
    """Gaussian class blobs around seeded mean patterns, clipped to [0, 1].

    Splits generated from the same seed share the same class means but draw
    independent sample noise, so "train"/"test"/"holdout" behave like splits
    of one distribution. `mean_shift` > 0 perturbs every class mean by a
    seeded per-coordinate Gaussian offset of that RMS size, producing an
    out-of-distribution cousin of the dataset (the attacker's query pool).
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    root = RandomSource(seed, "blobs")
    means = _class_means(classes, dim, root.derive("means"), image_mode)
    if mean_shift > 0.0:
        offsets = root.derive("shift").normal(0.0, mean_shift, (classes, dim))
        means = np.clip(means + offsets, 0.0, 1.0)
    # class means are distinct with probability 1; make it an invariant
    for a in range(classes):
        for b in range(a + 1, classes):
            if not np.any(means[a] != means[b]):
                raise RuntimeError("degenerate class means")
    noise_rng = root.derive(f"noise-{split}-shift{mean_shift!r}")
    inputs = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        if spread > 0.0:
            samples = means[c] + noise_rng.normal(0.0, spread, (per_class, dim))
        else:
            samples = np.tile(means[c], (per_class, 1))
        inputs[block] = np.clip(samples, 0.0, 1.0)
        labels[block] = c
    return Dataset(inputs, labels, classes, split=split, seed=seed)


# ---------------------------------------------------------------------------
# composite watermarks
# ---------------------------------------------------------------------------


@dataclass
class WatermarkSet:
    """Registered triggers spliced from two source classes via a binary mask.

    Trigger i takes the class-k sample where mask == 1 and the class-j
    sample where mask == 0; probing a suspicious model with these (or with
    inputs blended toward them) should elicit the target class.
    """

    triggers: np.ndarray
    mask: np.ndarray
    source_k: int
    source_j: int
    target: int

    def __post_init__(self):
        self.triggers = np.asarray(self.triggers, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.triggers.ndim != 2:
            raise ValueError("triggers must be n x D")
        if self.mask.shape != (self.triggers.shape[1],):
            raise ValueError("mask dimension must match triggers")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask must be binary")

    @property
    def trigger_count(self) -> int:
        return self.triggers.shape[0]

    @property
    def dim(self) -> int:
        return self.triggers.shape[1]


def left_half_mask(dim: int) -> np.ndarray:
    """Default composite mask: the left half of the square grid."""
    side = int(math.isqrt(dim))
    if side * side != dim:
        raise ValueError("left_half_mask needs a square input dimension")
    mask = np.zeros((side, side))
    mask[:, : side // 2] = 1.0
    return mask.ravel()


def gen_composite_watermarks(
    data: Dataset,
    source_k: int,
    source_j: int,
    mask: np.ndarray,
    count: int,
    seed: int,
    target: int,
) -> WatermarkSet:
    """Build `count` triggers by splicing class-k and class-j samples.

    Samples are drawn without replacement whenever a class has enough rows;
    otherwise the draw falls back to sampling with replacement.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (data.dim,):
        raise ValueError("mask dimension must match the dataset")
    rng = RandomSource(seed, "composite")
    rows_k = data.class_rows(source_k)
    rows_j = data.class_rows(source_j)
    if len(rows_k) == 0 or len(rows_j) == 0:
        raise ValueError("source class has zero samples")

    def pick(rows: np.ndarray, label: str) -> np.ndarray:
        r = rng.derive(label)
        if count <= len(rows):
            return rows[r.permutation(len(rows))[:count]]
        return rows[r.integers(len(rows), size=count)]

    xk = pick(rows_k, "k")
    xj = pick(rows_j, "j")
    triggers = xk * mask + xj * (1.0 - mask)
    return WatermarkSet(triggers, mask, source_k, source_j, target)


def apply_trigger(
    x: np.ndarray,
    wm: WatermarkSet,
    strength: float,
    trigger_index: int = 0,
) -> np.ndarray:
    """Blend `x` toward a trigger's masked content.

    Off-mask coordinates are untouched; masked coordinates move linearly
    from x (strength 0) to the trigger values (strength 1).
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (wm.dim,):
        raise ValueError("input dimension does not match the watermark set")
    trig = wm.triggers[trigger_index % wm.trigger_count]
    out = x.copy()
    m = wm.mask == 1.0
    out[m] = (1.0 - strength) * x[m] + strength * trig[m]
    return out


def rotate90(x: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact quarter-turn rotation of a flattened square grid.

    Orientation is pinned by the 2x2 case: [a, b, c, d] -> [c, a, d, b]
    after one turn, and four turns compose to the identity bit-exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("rotate90 expects a flat vector")
    side = int(math.isqrt(x.size))
    if side * side != x.size:
        raise ValueError("rotate90 needs a perfect-square dimension")
    grid = x.reshape(side, side)
    return np.ascontiguousarray(np.rot90(grid, k=-(int(quarter_turns) % 4))).ravel()


def rotate_batch(batch: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.stack([rotate90(row, quarter_turns) for row in batch])


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_dataset(fh: BinaryIO, data: Dataset) -> None:
    fh.write(DATASET_MAGIC)
    fh.write(struct.pack("<I", data.num_classes))
    tag = data.split.encode("utf-8")
    fh.write(struct.pack("<B", len(tag)))
    fh.write(tag)
    fh.write(struct.pack("<Q", data.seed & 0xFFFFFFFFFFFFFFFF))
    write_tensor(fh, data.inputs)
    fh.write(struct.pack("<Q", len(data.labels)))
    fh.write(np.asarray(data.labels, dtype="<u4").tobytes())


def read_dataset(fh: BinaryIO) -> Dataset:
    if fh.read(4) != DATASET_MAGIC:
        raise ValueError("bad dataset magic")
    (num_classes,) = struct.unpack("<I", fh.read(4))
    (taglen,) = struct.unpack("<B", fh.read(1))
    split = fh.read(taglen).decode("utf-8")
    (seed,) = struct.unpack("<Q", fh.read(8))
    inputs = read_tensor(fh)
    (n,) = struct.unpack("<Q", fh.read(8))
    labels = np.frombuffer(fh.read(n * 4), dtype="<u4").astype(np.int64)
    return Dataset(inputs, labels, num_classes, split=split, seed=seed)


def save_dataset(path, data: Dataset) -> None:
    with open(path, "wb") as fh:
        write_dataset(fh, data)


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return read_dataset(fh)


def write_watermarks(fh: BinaryIO, wm: WatermarkSet) -> None:
    fh.write(WATERMARK_MAGIC)
    fh.write(
        struct.pack(
            "<IIIII", wm.trigger_count, wm.dim, wm.source_k, wm.source_j, wm.target
        )
    )
    write_tensor(fh, wm.mask)
    write_tensor(fh, wm.triggers)


def read_watermarks(fh: BinaryIO) -> WatermarkSet:
    if fh.read(4) != WATERMARK_MAGIC:
        raise ValueError("bad watermark file magic")
    n, dim, k, j, t = struct.unpack("<IIIII", fh.read(20))
    mask = read_tensor(fh)
    triggers = read_tensor(fh)
    if triggers.shape != (n, dim):
        raise ValueError("watermark payload inconsistent with header")
    return WatermarkSet(triggers, mask, k, j, t)


def save_watermarks(path, wm: WatermarkSet) -> None:
    with open(path, "wb") as fh:
        write_watermarks(fh, wm)


def load_watermarks(path) -> WatermarkSet:
    with open(path, "rb") as fh:
        return read_watermarks(fh)
