"""Watermark-transmission arithmetic.

Treats the defended endpoint as a communication channel: the watermark
similarity score is the source, the served predictions are the channel,
and attacker-side response processing is channel noise. These functions
quantify when that channel can carry the watermark at all (source entropy
vs. capacity), how hard-label serving strangles it, and why aggregating
the signal across N queries (capacity N*C, noise variance sigma^2/N)
restores it.

All entropies and capacities are in bits (base 2).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np
from scipy.special import erfc


def _normal_cdf_vec(x: np.ndarray) -> np.ndarray:
    return 0.5 * erfc(-x / math.sqrt(2.0))


def quantized_gaussian_entropy(sigma: float, precision: float) -> float:
    """Entropy (bits) of a Gaussian quantized to bins of width `precision`.

    Computed by direct summation of -p*log2(p) over bins covering +-8
    standard deviations, with bin masses taken from CDF differences. In the
    fine-quantization regime (sigma/precision >= 10) this agrees with the
    differential-entropy approximation

        0.5*log2(2*pi*e*sigma^2) + log2(1/precision)

    to within 0.01 bit; halving the precision adds one bit.
    """
    sigma = float(sigma)
    precision = float(precision)
    if sigma <= 0 or precision <= 0:
        raise ValueError("sigma and precision must be positive")
    half_bins = int(math.ceil(8.0 * sigma / precision))
    edges = (np.arange(-half_bins, half_bins + 1) * precision) / sigma
    cdf = _normal_cdf_vec(edges)
    p = np.diff(cdf)
    p = p[p > 0]
    return float(-np.sum(p * np.log2(p)))


def gaussian_entropy_closed_form(sigma: float, precision: float) -> float:
    """Fine-quantization approximation used as the cross-check."""
    if sigma <= 0 or precision <= 0:
        raise ValueError("sigma and precision must be positive")
    return 0.5 * math.log2(2.0 * math.pi * math.e * sigma**2) + math.log2(1.0 / precision)


def discrete_entropy(dist) -> float:
    """Shannon entropy (bits) of a probability row; 0*log(0) := 0."""
    p = np.asarray(dist, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty distribution")
    if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError("entries must be nonnegative and sum to 1 within 1e-9")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log2(nz)))


def hard_label_capacity(num_classes: int) -> float:
    """Capacity (bits per query) when only argmax labels are served."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return math.log2(num_classes)


def quantize_outputs(rows: np.ndarray, precision: float) -> Counter:
    """Histogram of output rows after rounding to multiples of `precision`."""
    if precision <= 0:
        raise ValueError("precision must be positive")
    rows = np.asarray(rows, dtype=np.float64)
    keys = np.round(rows / precision).astype(np.int64)
    return Counter(map(tuple, keys))


def soft_label_capacity(histogram) -> float:
    """Capacity (bits per query) of a soft-label channel, estimated as the
    entropy of the empirical distribution over quantized output vectors.

    For a deterministic response channel the output entropy is exactly the
    mutual information between input and output, so no maximization over
    input distributions is needed.
    """
    if isinstance(histogram, Mapping):
        counts = np.array(list(histogram.values()), dtype=np.float64)
    else:
        counts = np.asarray(histogram, dtype=np.float64).ravel()
    if counts.size == 0 or counts.sum() <= 0:
        raise ValueError("empty histogram")
    if np.any(counts < 0):
        raise ValueError("histogram counts must be nonnegative")
    return discrete_entropy(counts / counts.sum())


def binary_entropy(e: float) -> float:
    """Base-2 binary entropy with the endpoint limits set to 0."""
    e = float(e)
    if not 0.0 <= e <= 1.0:
        raise ValueError("error rate must lie in [0, 1]")
    if e == 0.0 or e == 1.0:
        return 0.0
    return float(-(e * math.log2(e) + (1.0 - e) * math.log2(1.0 - e)))


def rate_under_error(capacity: float, e: float) -> float:
    """Maximum transmission rate achievable at tolerated error rate `e`:
    capacity / (1 - Q(e)). Diverges as e -> 0.5, where any rate passes."""
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    if not 0.0 <= e < 0.5:
        raise ValueError("error rate must lie in [0, 0.5)")
    q = binary_entropy(e)
    if q >= 1.0:
        raise ValueError("rate is unbounded at e = 0.5")
    return capacity / (1.0 - q)


def awgn_capacity(
    bandwidth: float,
    mu_s: float,
    sigma_s: float,
    mu_n: float = 0.0,
    sigma_n: float = 0.0,
) -> tuple[float, float]:
    """(snr, capacity) of the noisy channel an adaptive attacker induces.

    Powers are mu^2 + sigma^2 for signal and noise. Attack noise is
    zero-mean in practice (a biased recovery would sabotage the attack
    itself), so harness-facing callers leave mu_n at 0.
    """
    noise_power = mu_n**2 + sigma_n**2
    if noise_power <= 0:
        raise ValueError("noise power is zero: capacity is unbounded")
    snr = (mu_s**2 + sigma_s**2) / noise_power
    return snr, bandwidth * math.log2(1.0 + snr)


def multi_step_aggregate(capacity: float, sigma_n: float, n: int) -> tuple[float, float]:
    """Effective (capacity, noise variance) when one watermark message is
    spread across n queries: capacity n*C, noise variance sigma^2/n."""
    if n < 1:
        raise ValueError("aggregation count must be >= 1")
    return n * capacity, (sigma_n**2) / n


def feasible(source_entropy_bits: float, capacity_bits: float) -> bool:
    """Can the channel carry the watermark source at all?"""
    return capacity_bits >= source_entropy_bits


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class ChannelReport:
    """The channel-side quantities of one experiment, in bits.

    Noisy-channel fields are None when the attack added no measurable
    response noise (the capacity would be unbounded).
    """

    source_entropy_bits: float
    label_entropy_bits: float
    capacity_bits: float
    error_rate: float
    binary_entropy_bits: float
    max_rate_at_error: float
    precision: float
    aggregation_count: int
    effective_capacity_bits: float
    noise_variance: float | None = None
    effective_noise_variance: float | None = None
    snr: float | None = None
    noisy_capacity_bits: float | None = None
    feasible_single_query: bool = False
    feasible_multi_step: bool = False

    def validate(self) -> None:
        if min(self.source_entropy_bits, self.label_entropy_bits, self.capacity_bits) < 0:
            raise ValueError("entropies must be nonnegative")
        if not 0.0 <= self.binary_entropy_bits <= 1.0:
            raise ValueError("binary entropy out of range")
        if self.effective_capacity_bits != self.aggregation_count * self.capacity_bits:
            raise ValueError("effective capacity must equal N * C exactly")
        if self.noise_variance is not None and self.effective_noise_variance is not None:
            if self.effective_noise_variance != self.noise_variance / self.aggregation_count:
                raise ValueError("effective noise variance must equal sigma^2 / N exactly")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"{key} = {value}" for key, value in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def build_report(
    similarity_sigma: float,
    num_classes: int,
    label_distribution,
    mode: str,
    output_histogram=None,
    precision: float = 0.01,
    error_rate: float = 0.05,
    noise_sigma: float | None = None,
    aggregation_count: int = 1,
    bandwidth: float = 1.0,
) -> ChannelReport:
    """Assemble a ChannelReport from measured experiment statistics.

    The watermark source entropy comes from the measured spread of
    similarity scores quantized at `precision` (0 when the defense is off
    or the scores are constant); capacity is the label entropy bound in
    hard mode and the quantized-output entropy in soft mode.
    """
    if similarity_sigma > 1e-12:
        h_source = quantized_gaussian_entropy(similarity_sigma, precision)
    else:
        h_source = 0.0
    h_label = discrete_entropy(label_distribution)
    if mode == "hard" or output_histogram is None:
        capacity = hard_label_capacity(num_classes)
    else:
        capacity = soft_label_capacity(output_histogram)
    q = binary_entropy(error_rate)
    rate = rate_under_error(capacity, error_rate)
    c_star, sigma_star_sq = multi_step_aggregate(
        capacity, noise_sigma if noise_sigma else 0.0, aggregation_count
    )
    snr = None
    noisy_capacity = None
    noise_var = None
    if noise_sigma is not None and noise_sigma > 0:
        noise_var = noise_sigma**2
        snr, noisy_capacity = awgn_capacity(
            bandwidth, 0.0, similarity_sigma, 0.0, noise_sigma
        )
    report = ChannelReport(
        source_entropy_bits=h_source,
        label_entropy_bits=h_label,
        capacity_bits=capacity,
        error_rate=error_rate,
        binary_entropy_bits=q,
        max_rate_at_error=rate,
        precision=precision,
        aggregation_count=aggregation_count,
        effective_capacity_bits=c_star,
        noise_variance=noise_var,
        effective_noise_variance=sigma_star_sq if noise_var is not None else None,
        snr=snr,
        noisy_capacity_bits=noisy_capacity,
        feasible_single_query=feasible(h_source, capacity),
        feasible_multi_step=feasible(h_source, c_star),
    )
    report.validate()
    return report
