"""Ownership verification: sample-size planning and the claim test.

Planning uses the classic two-sided normal sample-size formula
N = 2*(z_{alpha/2} + z_beta)^2 / effect^2, with the critical values taken
at four decimal places (the precision of standard normal tables, which is
what published sample-size figures are computed from). The live verdict
uses the exact binomial tail, since per-probe watermark successes are
Bernoulli; the normal approximation is reported alongside it.

The effect size here is the expected watermark-success-rate gap over the
baseline; it is unrelated to the similarity margin of the defense.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import binom

from .datagen import WatermarkSet, apply_trigger
from .nn import Mlp, predict_labels
from .numerics import RandomSource, normal_cdf, z_quantile


@dataclass
class ClaimPlan:
    alpha: float
    beta: float
    effect_size: float
    sample_size: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0 or not 0.0 < self.beta < 1.0:
            raise ValueError("alpha and beta must lie in (0, 1)")
        if not 0.0 < self.effect_size <= 1.0:
            raise ValueError("effect size must lie in (0, 1]")


def required_sample_size(alpha: float, beta: float, effect_size: float) -> int:
    """Probes needed to claim ownership at false-positive rate alpha and
    false-negative rate beta, given an expected WSR gap of effect_size."""
    if not 0.0 < alpha < 1.0 or not 0.0 < beta < 1.0:
        raise ValueError("alpha and beta must lie in (0, 1)")
    if effect_size <= 0.0:
        raise ValueError("effect size must be positive; zero is unclaimable")
    z_a = round(z_quantile(alpha / 2.0), 4)
    z_b = round(z_quantile(beta), 4)
    raw = 2.0 * (z_a + z_b) ** 2 / effect_size**2
    # guard against float crumbs pushing an exact integer over the ceiling
    return int(math.ceil(raw - 1e-9))


def plan_claim(alpha: float, beta: float, effect_size: float) -> ClaimPlan:
    return ClaimPlan(alpha, beta, effect_size, required_sample_size(alpha, beta, effect_size))


def claim_curve(alpha: float, beta: float, wsr_grid) -> list[tuple[float, int]]:
    """Required sample size over a WSR grid; strictly decreasing in WSR."""
    return [(float(w), required_sample_size(alpha, beta, w)) for w in wsr_grid]


def write_claim_curve_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("wsr,required_samples\n")
        for w, n in curve:
            fh.write(f"{w},{n}\n")


# ---------------------------------------------------------------------------
# watermark success rate
# ---------------------------------------------------------------------------


def build_probes(
    wm: WatermarkSet,
    holdout_inputs: np.ndarray,
    n_probes: int,
    strength: float = 1.0,
    rng: RandomSource | None = None,
) -> np.ndarray:
    """Probe set: held-out inputs with triggers applied.

    Cycles deterministically through holdout rows and registered triggers;
    an optional rng shuffles the holdout order first.
    """
    holdout_inputs = np.asarray(holdout_inputs, dtype=np.float64)
    if n_probes < 1:
        raise ValueError("need at least one probe")
    if len(holdout_inputs) == 0:
        raise ValueError("empty holdout pool")
    if rng is not None:
        holdout_inputs = holdout_inputs[rng.permutation(len(holdout_inputs))]
    probes = np.empty((n_probes, wm.dim))
    for i in range(n_probes):
        probes[i] = apply_trigger(
            holdout_inputs[i % len(holdout_inputs)], wm, strength, trigger_index=i
        )
    return probes


def count_wsr(
    suspicious: Mlp,
    reference: Mlp,
    wm: WatermarkSet,
    probes: np.ndarray,
) -> tuple[int, int]:
    """(successes, probes): probes the suspicious model sends to the
    watermark target while the unprotected reference does not."""
    sus = predict_labels(suspicious, probes)
    ref = predict_labels(reference, probes)
    hits = int(np.sum((sus == wm.target) & (ref != wm.target)))
    return hits, len(probes)


def measure_wsr(
    suspicious: Mlp,
    reference: Mlp,
    wm: WatermarkSet,
    probes: np.ndarray,
) -> float:
    hits, n = count_wsr(suspicious, reference, wm, probes)
    return hits / n


def dawn_wsr(
    suspicious: Mlp,
    reference: Mlp,
    records,
) -> float:
    """Fraction of recorded flipped (query, label) pairs the suspicious
    model reproduces while the reference does not."""
    if not records:
        return 0.0
    queries = np.stack([rec.query for rec in records])
    labels = np.array([rec.label for rec in records])
    sus = predict_labels(suspicious, queries)
    ref = predict_labels(reference, queries)
    return float(np.mean((sus == labels) & (ref != labels)))


# ---------------------------------------------------------------------------
# the claim test
# ---------------------------------------------------------------------------


@dataclass
class ClaimResult:
    queries: int
    successes: int
    wsr: float
    baseline: float
    p_exact: float
    p_normal: float
    alpha: float
    claimed: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        verdict = "CLAIM" if self.claimed else "NO CLAIM"
        return (
            f"{verdict}: {self.successes}/{self.queries} watermark hits "
            f"(wsr={self.wsr:.4f}, baseline={self.baseline:.4f}, "
            f"exact p={self.p_exact:.3g}, normal p={self.p_normal:.3g}, "
            f"alpha={self.alpha:g})"
        )


def ownership_claim(successes: int, queries: int, baseline: float, alpha: float) -> ClaimResult:
    """One-sided test of 'watermark success rate exceeds the baseline'.

    The null is that the suspicious model carries no watermark and hits the
    target at the baseline false-trigger rate. Both the exact binomial tail
    and a continuity-corrected normal-approximation z-test are computed. The
    verdict is taken from the exact tail: in the deep-tail region where
    claims are decided, the normal approximation understates the p-value by
    an unbounded relative factor (the two agree closely only at moderate
    significance levels).
    """
    if queries < 1:
        raise ValueError("need at least one query")
    if not 0 <= successes <= queries:
        raise ValueError("successes must lie in [0, queries]")
    if not 0.0 <= baseline < 1.0:
        raise ValueError("baseline rate must lie in [0, 1)")
    wsr = successes / queries
    p_exact = float(binom.sf(successes - 1, queries, baseline))
    se = math.sqrt(baseline * (1.0 - baseline) / queries)
    if se == 0.0:
        p_normal = 0.0 if successes > 0 else 1.0
    else:
        z = ((successes - 0.5) / queries - baseline) / se
        p_normal = 1.0 - normal_cdf(z)
    return ClaimResult(
        queries=queries,
        successes=successes,
        wsr=wsr,
        baseline=baseline,
        p_exact=p_exact,
        p_normal=p_normal,
        alpha=alpha,
        claimed=bool(p_exact < alpha),
    )
