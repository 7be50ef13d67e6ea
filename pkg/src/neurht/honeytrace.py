"""Training-free output watermarking.

The defense never touches model parameters. Per query it scores the
feature-space similarity between the query and a set of registered
composite triggers, blends the output logits toward reference logits of
the watermark target class in proportion to that similarity, and flips the
served label outright with probability similarity**beta. The flip channel
is what survives hard-label serving and response-averaging attackers: the
watermark rides on the label *distribution* across many queries rather
than on any single response.

Also here: a keyed label-flipping baseline (deterministic pseudorandom
flips with a record log) and the endpoint wrappers the attack harness
queries against.
"""

from __future__ import annotations

import hashlib
import hmac
import threading
from dataclasses import dataclass

import numpy as np

from .datagen import Dataset, WatermarkSet, gen_composite_watermarks
from .nn import Mlp
from .numerics import RandomSource, clip01, softmax


@dataclass(frozen=True)
class ProtectionParams:
    """Knobs of the watermark pipeline.

    margin_d offsets the similarity score (larger -> stronger watermark,
    lower availability); alpha shapes the logit-mixing weight s**alpha;
    beta shapes the flip probability s**beta; epsilon_scale bounds the
    random jitter added to flipped logits (None derives a safe value from
    the reference-logit gap at wrap time).
    """

    margin_d: float = 0.85
    alpha: float = 2.0
    beta: float = 3.0
    confidence_threshold: float = 0.95
    epsilon_scale: float | None = None
    mode: str = "soft"
    feature_scale: str | float = "auto"
    # similarity is computed on the penultimate activations by default; the
    # raw logits are a switchable alternative for sensitivity analysis
    feature_source: str = "penultimate"

    def __post_init__(self):
        if self.alpha <= 1.0:
            raise ValueError("alpha must be > 1")
        if self.beta <= 1.0:
            raise ValueError("beta must be > 1")
        if not 0.0 < self.confidence_threshold <= 1.0:
            raise ValueError("confidence threshold must lie in (0, 1]")
        if self.epsilon_scale is not None and self.epsilon_scale < 0.0:
            raise ValueError("epsilon scale must be >= 0")
        if self.mode not in ("soft", "hard"):
            raise ValueError("mode must be 'soft' or 'hard'")
        if self.feature_source not in ("penultimate", "logits"):
            raise ValueError("feature source must be 'penultimate' or 'logits'")


@dataclass
class PredictionOut:
    """One served prediction. In hard mode only the label is exposed to
    clients; similarity and the flip flag are kept for audit logging and
    never cross the serving boundary."""

    label: int
    logits: np.ndarray | None
    probs: np.ndarray | None
    similarity: float
    flipped: bool


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def similarity(features_x: np.ndarray, wm_features: np.ndarray, margin_d: float) -> float:
    """Similarity of query features to the registered trigger features.

    Per trigger the distance is the per-dimension mean of squared feature
    differences (so margin_d keeps its meaning across feature widths); the
    score is margin_d minus the mean distance over triggers, clamped to
    [0, 1].
    """
    features_x = np.asarray(features_x, dtype=np.float64)
    wm_features = np.asarray(wm_features, dtype=np.float64)
    if wm_features.ndim != 2 or wm_features.shape[0] == 0:
        raise ValueError("need at least one registered trigger")
    if features_x.shape != (wm_features.shape[1],):
        raise ValueError("feature widths do not match")
    dists = np.mean((wm_features - features_x) ** 2, axis=1)
    return clip01(margin_d - float(np.mean(dists)))


def confidence_gate(s: float, clean_probs: np.ndarray, threshold: float) -> float:
    """Square the similarity when the model is already confident.

    Confident queries are overwhelmingly benign in-distribution traffic;
    damping them preserves availability without touching the uncertain
    queries extraction attacks rely on.
    """
    if np.max(clean_probs) >= threshold:
        return s * s
    return s


def mix_logits(l_ori: np.ndarray, l_ref: np.ndarray, s: float, alpha: float) -> np.ndarray:
    """Affine blend toward the reference logits with weight s**alpha."""
    if not 0.0 <= s <= 1.0:
        raise ValueError("similarity must lie in [0, 1]")
    w = s**alpha
    return (1.0 - w) * np.asarray(l_ori, dtype=np.float64) + w * np.asarray(
        l_ref, dtype=np.float64
    )


def flip_label(
    l_mix: np.ndarray,
    l_ref: np.ndarray,
    s: float,
    beta: float,
    eps_scale: float,
    rng: RandomSource,
) -> tuple[np.ndarray, bool]:
    """With probability s**beta, replace the response by l_ref plus a small
    per-coordinate uniform[0, eps_scale] jitter; otherwise pass l_mix
    through untouched. Returns (logits, flipped).

    The jitter keeps flipped responses from being byte-identical without
    ever moving the argmax: eps_scale must stay below the reference-logit
    gap between the top class and the runner-up (the wrapper guarantees
    this at construction; re-checked here defensively).
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("similarity must lie in [0, 1]")
    l_ref = np.asarray(l_ref, dtype=np.float64)
    if l_ref.size >= 2:
        top2 = np.partition(l_ref, -2)[-2:]
        if eps_scale >= top2[1] - top2[0] and eps_scale > 0.0:
            raise ValueError("epsilon scale could change the reference argmax")
    if rng.uniform() < s**beta:
        eps = rng.uniform(0.0, eps_scale, size=l_ref.shape)
        return l_ref + eps, True
    return l_mix, False


# ---------------------------------------------------------------------------
# protection wrapper
# ---------------------------------------------------------------------------


class _State:
    """Immutable snapshot of the swap-sensitive pieces. protect() reads the
    snapshot once, so a concurrent swap is observed entirely or not at all."""

    __slots__ = ("watermarks", "wm_features", "ref_pool", "eps_scale")

    def __init__(self, watermarks, wm_features, ref_pool, eps_scale):
        self.watermarks = watermarks
        self.wm_features = wm_features
        self.ref_pool = ref_pool
        self.eps_scale = eps_scale


class ProtectedModel:
    """Plug-and-play watermarking wrapper around a trained model.

    Wrapping costs two forward passes (trigger features and the reference
    pool); the inner model's parameters are never modified, which is the
    whole point: watermarks can be installed, swapped, or removed on a live
    deployment. Swaps are atomic with respect to concurrent protect()
    calls.

    Query randomness is drawn from a per-query stream derived from the base
    source and a monotonically increasing sequence number, in a fixed
    order: (1) reference-pool index, (2) flip decision uniform, (3) the
    epsilon jitter vector, drawn only when the flip fires. Concurrent
    callers therefore never contend on a shared stream.
    """

    def __init__(
        self,
        model: Mlp,
        watermarks: WatermarkSet,
        params: ProtectionParams,
        reference_data: Dataset,
        rng: RandomSource,
    ):
        self.model = model
        self.params = params
        self._rng = rng
        self._reference_data = reference_data
        self._counter = 0
        self._lock = threading.Lock()
        if params.feature_scale == "auto":
            raw = self._raw_features(reference_data.inputs)
            scale = float(np.sqrt(np.mean(raw**2)))
            self.feature_scale = scale if scale > 0 else 1.0
        else:
            self.feature_scale = float(params.feature_scale)
            if self.feature_scale <= 0:
                raise ValueError("feature scale must be positive")
        self._state = self._build_state(watermarks)

    # -- state construction --------------------------------------------------

    def _raw_features(self, batch: np.ndarray) -> np.ndarray:
        feats, logits = self.model.forward(batch)
        return logits if self.params.feature_source == "logits" else feats

    def _features(self, batch: np.ndarray) -> np.ndarray:
        return self._raw_features(batch) / self.feature_scale

    def _build_state(self, watermarks: WatermarkSet) -> _State:
        if watermarks.dim != self.model.input_dim:
            raise ValueError("watermark dimension does not match the model")
        target = watermarks.target
        labels = self._reference_data.labels
        candidates = self._reference_data.inputs[labels == target]
        if len(candidates) == 0:
            raise ValueError(f"reference data has no samples of class {target}")
        _, logits = self.model.forward(candidates)
        keep = np.argmax(logits, axis=1) == target
        pool = candidates[keep]
        pool_logits = logits[keep]
        if len(pool) == 0:
            raise ValueError(
                f"model never predicts target class {target} on the reference pool"
            )
        top2 = np.partition(pool_logits, -2, axis=1)[:, -2:]
        gap = float(np.min(top2[:, 1] - top2[:, 0]))
        eps_scale = (
            0.05 * gap if self.params.epsilon_scale is None else self.params.epsilon_scale
        )
        if eps_scale >= gap:
            raise ValueError(
                f"epsilon scale {eps_scale:g} is not below the reference-logit gap {gap:g}"
            )
        wm_features = self._features(watermarks.triggers)
        return _State(watermarks, wm_features, pool, eps_scale)

    # -- public surface -------------------------------------------------------

    @property
    def watermarks(self) -> WatermarkSet:
        return self._state.watermarks

    @property
    def eps_scale(self) -> float:
        return self._state.eps_scale

    def swap_watermarks(self, watermarks: WatermarkSet) -> None:
        """Install a new watermark set atomically; zero retraining."""
        state = self._build_state(watermarks)
        with self._lock:
            self._state = state

    def gated_similarity(self, query_features: np.ndarray, clean_probs: np.ndarray) -> float:
        state = self._state
        s = similarity(query_features, state.wm_features, self.params.margin_d)
        return confidence_gate(s, clean_probs, self.params.confidence_threshold)

    def protect(self, query: np.ndarray) -> PredictionOut:
        """Full pipeline for one query: similarity, gate, mix, flip."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape != (self.model.input_dim,):
            raise ValueError("query dimension does not match the model")
        with self._lock:
            seq = self._counter
            self._counter += 1
            state = self._state
        rng = self._rng.derive(f"q{seq}")
        return self._protect_with(state, query, rng)

    def _protect_with(self, state: _State, query: np.ndarray, rng: RandomSource) -> PredictionOut:
        feats, logits = self.model.forward(query[None, :])
        l_ori = logits[0]
        clean_probs = softmax(l_ori)
        source = logits if self.params.feature_source == "logits" else feats
        s = similarity(
            source[0] / self.feature_scale, state.wm_features, self.params.margin_d
        )
        s = confidence_gate(s, clean_probs, self.params.confidence_threshold)
        pool_idx = int(rng.integers(len(state.ref_pool)))
        _, ref_logits = self.model.forward(state.ref_pool[pool_idx][None, :])
        l_ref = ref_logits[0]
        l_mix = mix_logits(l_ori, l_ref, s, self.params.alpha)
        l_out, flipped = flip_label(
            l_mix, l_ref, s, self.params.beta, state.eps_scale, rng
        )
        label = int(np.argmax(l_out))
        if self.params.mode == "hard":
            return PredictionOut(label, None, None, s, flipped)
        return PredictionOut(label, l_out, softmax(l_out), s, flipped)

    def protect_batch(self, queries: np.ndarray) -> list[PredictionOut]:
        return [self.protect(q) for q in np.asarray(queries, dtype=np.float64)]

    def similarity_scores(self, queries: np.ndarray) -> np.ndarray:
        """Gated similarity per row, with no randomness consumed. Used for
        reporting the watermark-source statistics of a query workload."""
        queries = np.asarray(queries, dtype=np.float64)
        state = self._state
        feats, logits = self.model.forward(queries)
        source = logits if self.params.feature_source == "logits" else feats
        source = source / self.feature_scale
        probs = softmax(logits)
        diffs = source[:, None, :] - state.wm_features[None, :, :]
        raw = self.params.margin_d - np.mean(diffs**2, axis=(1, 2))
        raw = np.clip(raw, 0.0, 1.0)
        confident = np.max(probs, axis=1) >= self.params.confidence_threshold
        return np.where(confident, raw**2, raw)


def select_watermark_set(
    model: Mlp,
    data: Dataset,
    params: ProtectionParams,
    source_k: int,
    source_j: int,
    target: int,
    mask: np.ndarray,
    count: int,
    seed: int,
    candidates: int = 12,
) -> WatermarkSet:
    """Draw several candidate composite sets and keep the cheapest one.

    Cost is the expected flip mass the set would inflict on the model's own
    in-distribution data (mean s**beta over `data`): the candidate whose
    trigger region sits farthest from benign traffic costs the least
    availability. Selection uses forward passes only, so the wrap stays
    training-free.
    """
    if candidates < 1:
        raise ValueError("need at least one candidate set")
    rng = RandomSource(seed, "wm-select")
    best = None
    best_cost = None
    for c in range(candidates):
        wm = gen_composite_watermarks(
            data, source_k, source_j, mask, count, rng.child_seed(f"cand{c}"), target=target
        )
        pm = ProtectedModel(model, wm, params, data, rng.derive(f"score{c}"))
        scores = pm.similarity_scores(data.inputs)
        cost = float(np.mean(scores**params.beta))
        if best_cost is None or cost < best_cost:
            best, best_cost = wm, cost
    return best


# ---------------------------------------------------------------------------
# keyed label-flipping baseline
# ---------------------------------------------------------------------------


@dataclass
class DawnRecord:
    digest: str
    label: int
    query: np.ndarray


def _query_digest(query: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(query, dtype="<f8").tobytes()).hexdigest()


def dawn_protect(
    inner_logits: np.ndarray,
    query: np.ndarray,
    flip_ratio: float,
    key: bytes,
) -> tuple[int, bool, str]:
    """Keyed pseudorandom label flipping.

    A PRF of the query bytes deterministically assigns each query to the
    flipped subset of measure flip_ratio; flipped queries get a keyed wrong
    label (never the true argmax). Returns (label, flipped, digest): the
    same query always yields the same decision under the same key.
    """
    if not 0.0 <= flip_ratio <= 1.0:
        raise ValueError("flip ratio must lie in [0, 1]")
    inner_logits = np.asarray(inner_logits, dtype=np.float64)
    k = inner_logits.shape[-1]
    digest = _query_digest(query)
    raw = bytes.fromhex(digest)
    u = int.from_bytes(hmac.new(key, raw + b"flip", hashlib.sha256).digest()[:8], "little")
    base = int(np.argmax(inner_logits))
    if u / 2.0**64 < flip_ratio:
        h2 = hmac.new(key, raw + b"label", hashlib.sha256).digest()
        offset = 1 + int.from_bytes(h2[:8], "little") % (k - 1)
        return (base + offset) % k, True, digest
    return base, False, digest


class DawnProtector:
    """Label-flipping defense wrapper with an in-memory watermark record.

    Flipped (query digest, label) pairs are the defender's watermark: a
    stolen model that reproduces the wrong labels on re-query betrays that
    it was trained on this endpoint's responses. Unflipped queries are
    served faithfully (full probabilities in soft mode).
    """

    def __init__(self, model: Mlp, flip_ratio: float, key: bytes, mode: str = "soft"):
        if mode not in ("soft", "hard"):
            raise ValueError("mode must be 'soft' or 'hard'")
        if model.num_classes < 2:
            raise ValueError("need at least two classes to flip labels")
        self.model = model
        self.flip_ratio = float(flip_ratio)
        self.key = key
        self.mode = mode
        self.records: list[DawnRecord] = []
        self._lock = threading.Lock()

    def predict(self, query: np.ndarray) -> PredictionOut:
        query = np.asarray(query, dtype=np.float64)
        _, logits = self.model.forward(query[None, :])
        label, flipped, digest = dawn_protect(logits[0], query, self.flip_ratio, self.key)
        if flipped:
            with self._lock:
                self.records.append(DawnRecord(digest, label, query.copy()))
            onehot = np.zeros(self.model.num_classes)
            onehot[label] = 1.0
            if self.mode == "hard":
                return PredictionOut(label, None, None, 0.0, True)
            return PredictionOut(label, None, onehot, 0.0, True)
        if self.mode == "hard":
            return PredictionOut(label, None, None, 0.0, False)
        return PredictionOut(label, logits[0], softmax(logits[0]), 0.0, False)

    def save_records(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(f"{rec.digest} {rec.label}\n")


def load_dawn_records(path) -> list[tuple[str, int]]:
    out = []
    with open(path) as fh:
        for line in fh:
            digest, label = line.split()
            out.append((digest, int(label)))
    return out


# ---------------------------------------------------------------------------
# query endpoints
# ---------------------------------------------------------------------------
# All endpoints answer batches with one response row per query: probability
# rows in soft mode, one-hot rows in hard mode. This is the only surface the
# attack harness sees.


def _one_hot(label: int, k: int) -> np.ndarray:
    row = np.zeros(k)
    row[label] = 1.0
    return row


class UnprotectedEndpoint:
    def __init__(self, model: Mlp, mode: str = "soft"):
        self.model = model
        self.mode = mode
        self.num_classes = model.num_classes
        self.queries_served = 0

    def query(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        _, logits = self.model.forward(batch)
        self.queries_served += len(batch)
        if self.mode == "hard":
            labels = np.argmax(logits, axis=1)
            return np.eye(self.num_classes)[labels]
        return softmax(logits)


class HoneytraceEndpoint:
    def __init__(self, protected: ProtectedModel):
        self.protected = protected
        self.mode = protected.params.mode
        self.num_classes = protected.model.num_classes
        self.queries_served = 0

    def query(self, batch: np.ndarray) -> np.ndarray:
        rows = []
        for out in self.protected.protect_batch(batch):
            if self.mode == "hard":
                rows.append(_one_hot(out.label, self.num_classes))
            else:
                rows.append(out.probs)
        self.queries_served += len(rows)
        return np.stack(rows)


class DawnEndpoint:
    def __init__(self, protector: DawnProtector):
        self.protector = protector
        self.mode = protector.mode
        self.num_classes = protector.model.num_classes
        self.queries_served = 0

    def query(self, batch: np.ndarray) -> np.ndarray:
        rows = []
        for q in np.asarray(batch, dtype=np.float64):
            out = self.protector.predict(q)
            if self.mode == "hard" or out.probs is None:
                rows.append(_one_hot(out.label, self.num_classes))
            else:
                rows.append(out.probs)
        self.queries_served += len(rows)
        return np.stack(rows)
