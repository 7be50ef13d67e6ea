"""Shared numeric primitives.

Everything downstream leans on this module for three things: dense float64
arrays with a small binary container format, deterministic counter-based
random streams that can be split by label, and a handful of statistical
functions (softmax, normal quantiles, moments).
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"NHT1"

_SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# array helpers
# ---------------------------------------------------------------------------


def as_tensor(values) -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    require_finite(arr)
    return arr


def require_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction, so adding a constant to all
    logits (or feeding very large magnitudes) cannot overflow."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("softmax of empty input")
    require_finite(arr, "logits")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("log_softmax of empty input")
    shifted = arr - np.max(arr, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def clip01(x: float) -> float:
    """Clamp a scalar to [0, 1]. NaN is rejected rather than silently kept."""
    x = float(x)
    if math.isnan(x):
        raise ValueError("clip01 of NaN")
    return min(1.0, max(0.0, x))


def mean_var(samples) -> tuple[float, float]:
    """Arithmetic mean and population variance (divisor n).

    The population convention matches the signal-power definition used by
    the channel calculator, where power = mu^2 + sigma^2.
    """
    arr = np.asarray(samples, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValueError("mean_var of empty input")
    require_finite(arr, "samples")
    mu = float(np.mean(arr))
    var = float(np.mean((arr - mu) ** 2))
    return mu, var


# ---------------------------------------------------------------------------
# normal distribution
# ---------------------------------------------------------------------------


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function.

    erfc keeps full relative precision in the lower tail, where the naive
    0.5*(1+erf(x/sqrt(2))) form loses digits to cancellation.
    """
    return 0.5 * math.erfc(-float(x) / _SQRT2)


def z_quantile(p: float) -> float:
    """Upper-tail critical value: the z with normal_cdf(z) = 1 - p.

    Inverted by plain bisection against normal_cdf; 200 halvings of the
    bracket [-40, 40] take the interval far below float64 resolution.
    """
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"tail probability must lie in (0, 1), got {p}")
    target = 1.0 - p
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if normal_cdf(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 0.0:
            break
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------


class RandomSource:
    """Counter-based random stream keyed by (seed, label path).

    Two sources built with the same seed and label produce bit-identical
    streams; sources derived with distinct labels are statistically
    independent (the 128-bit Philox key is a SHA-256 of the label chain).
    A source is cheap to derive, so parallel workers each get their own
    stream instead of sharing one.
    """

    __slots__ = ("seed", "label", "_key", "_gen")

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        digest = hashlib.sha256(
            b"NHT-rng:" + self.seed.to_bytes(8, "little") + label.encode("utf-8")
        ).digest()
        self._key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=self._key))

    def derive(self, label: str) -> "RandomSource":
        """Child stream for a sub-task; independent of the parent."""
        return RandomSource(self.seed, f"{self.label}/{label}")

    def child_seed(self, label: str) -> int:
        """A stable 63-bit seed for APIs that take plain integer seeds."""
        digest = hashlib.sha256(
            b"NHT-seed:" + self.seed.to_bytes(8, "little") + f"{self.label}/{label}".encode("utf-8")
        ).digest()
        return int.from_bytes(digest[:8], "little") >> 1

    # Draw methods intentionally mirror numpy.random.Generator.
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: float, size=None):
        return self._gen.uniform(0.0, 1.0, size) < p

    def token_bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RandomSource(seed={self.seed}, label={self.label!r})"


# ---------------------------------------------------------------------------
# binary tensor container
# ---------------------------------------------------------------------------
# Layout: magic "NHT1", rank as u32 LE, each dimension as u64 LE, then the
# row-major float64 LE payload.


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor container magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = tuple(
        struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
    )
    count = int(np.prod(shape)) if shape else 1
    payload = _read_exact(fh, count * 8)
    arr = np.frombuffer(payload, dtype="<f8", count=count).astype(np.float64)
    return arr.reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated tensor container")
    return buf


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    import io

    return read_tensor(io.BytesIO(data))
