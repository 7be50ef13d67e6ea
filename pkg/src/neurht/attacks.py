"""Model-extraction query strategies and attacker-side response processing.

Every attack is a pure function of (endpoint behavior, seed): it produces
an AttackTrace of queries sent, raw responses, and recovered responses
(after whatever cleanup the attacker applies), which is then handed to
`extract` to train the surrogate. Adaptive attacks differ only in how they
choose queries (jacobian-guided synthesis), spend budget (response
averaging), or post-process responses (hard-labeling, lookup-table and
learned denoising recovery).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import BinaryIO, Callable

import numpy as np

from .datagen import rotate_batch
from .nn import (
    Mlp,
    TrainConfig,
    TrainingDiverged,
    accuracy,
    backprop,
    forward_cached,
    grad,
    loss_and_dlogits,
    predict_labels,
    train,
)
from .numerics import RandomSource, read_tensor, write_tensor

TRACE_MAGIC = b"NHTA"


@dataclass
class QueryBudget:
    total: int
    initial_pool: int = 0
    n_aug: int = 1

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("budget must be positive")
        if self.initial_pool < 0 or self.total < self.initial_pool:
            raise ValueError("total budget must cover the initial pool")
        if self.n_aug < 1:
            raise ValueError("augmentation count must be >= 1")


@dataclass
class AttackTrace:
    kind: str
    seed: int
    queries: np.ndarray
    raw: np.ndarray
    recovered: np.ndarray

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.recovered = np.asarray(self.recovered, dtype=np.float64)
        if not (len(self.queries) == len(self.raw) == len(self.recovered)):
            raise ValueError("trace fields must have aligned rows")
        if self.raw.shape != self.recovered.shape:
            raise ValueError("recovered responses must match raw response arity")

    def __len__(self) -> int:
        return len(self.queries)


# ---------------------------------------------------------------------------
# query strategies
# ---------------------------------------------------------------------------


def knockoff_query(endpoint, pool: np.ndarray, budget: int, seed: int) -> AttackTrace:
    """Query a seeded uniform sample (without replacement) of the pool."""
    pool = np.asarray(pool, dtype=np.float64)
    if budget > len(pool):
        raise ValueError("budget exceeds the surrogate pool size")
    rng = RandomSource(seed, "knockoff")
    idx = rng.permutation(len(pool))[:budget]
    queries = pool[idx]
    raw = endpoint.query(queries)
    return AttackTrace("knockoff", seed, queries, raw, raw.copy())


def _input_grad_signs(model: Mlp, batch: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Row-wise sign of d CE(logits_i, target_i) / d input_i."""
    acts, pres = forward_cached(model, batch)
    _, dlogits = loss_and_dlogits(acts[-1], targets, "hard")
    _, dinput = backprop(model, acts, pres, dlogits)
    return np.sign(dinput)


def jbda_tr_query(
    endpoint,
    seed_pool: np.ndarray,
    mu: float,
    steps: int,
    budget: int,
    surrogate_widths,
    interim_config: TrainConfig,
    seed: int,
) -> AttackTrace:
    """Jacobian-guided synthesis with a random target class per sample.

    Alternates interim surrogate training with synthesis rounds: each new
    sample starts from a parent in the current pool and takes `steps` moves
    of size mu along the loss-gradient sign toward a random target class,
    clipped to the valid input range [0, 1]. Each round at most doubles the
    pool, until the query budget is exhausted. steps == 0 skips synthesis
    entirely and the trace is the seed pool alone.
    """
    seed_pool = np.asarray(seed_pool, dtype=np.float64)
    if budget < len(seed_pool):
        raise ValueError("budget must cover the seed pool")
    rng = RandomSource(seed, "jbda")
    queries = seed_pool.copy()
    raw = endpoint.query(queries)
    k = endpoint.num_classes
    if steps == 0:
        return AttackTrace("jbda_tr", seed, queries, raw, raw.copy())
    round_no = 0
    while len(queries) < budget:
        interim = Mlp.initialize(surrogate_widths, rng.derive(f"init{round_no}"))
        interim_cfg = replace(
            interim_config, seed=rng.child_seed(f"train{round_no}")
        )
        interim, _ = train(interim, queries, np.argmax(raw, axis=1), interim_cfg)
        n_new = min(len(queries), budget - len(queries))
        parent_idx = rng.permutation(len(queries))[:n_new]
        synth = queries[parent_idx].copy()
        targets = np.asarray(rng.integers(k, size=n_new))
        for _ in range(steps):
            signs = _input_grad_signs(interim, synth, targets)
            synth = np.clip(synth - mu * signs, 0.0, 1.0)
        new_raw = endpoint.query(synth)
        queries = np.concatenate([queries, synth])
        raw = np.concatenate([raw, new_raw])
        round_no += 1
    return AttackTrace("jbda_tr", seed, queries, raw, raw.copy())


# ---------------------------------------------------------------------------
# response processing
# ---------------------------------------------------------------------------


def top1_attack(trace: AttackTrace) -> AttackTrace:
    """Keep only the hard labels: recovered rows become one-hot argmax of
    the raw responses. Idempotent."""
    labels = np.argmax(trace.raw, axis=1)
    recovered = np.eye(trace.raw.shape[1])[labels]
    return AttackTrace(f"{trace.kind}+top1", trace.seed, trace.queries, trace.raw, recovered)


def smoothing_attack(
    endpoint,
    samples: np.ndarray,
    n_aug: int = 3,
    jitter: float = 0.05,
    rotate: bool = False,
    seed: int = 0,
) -> AttackTrace:
    """Average the endpoint's responses over n_aug augmented copies.

    Copy 0 is the sample itself; the others add seeded Gaussian jitter
    (and, optionally, a random quarter-turn rotation). Averaging divides
    the variance of any per-response perturbation by n_aug, which is
    exactly what it buys the attacker against randomized defenses.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if n_aug < 1:
        raise ValueError("n_aug must be >= 1")
    rng = RandomSource(seed, "smoothing")
    n, d = samples.shape
    copies = np.empty((n, n_aug, d))
    copies[:, 0] = samples
    for a in range(1, n_aug):
        jittered = samples + rng.normal(0.0, jitter, (n, d)) if jitter > 0 else samples.copy()
        if rotate:
            turns = np.asarray(rng.integers(4, size=n))
            jittered = np.stack([
                rotate_batch(jittered[i : i + 1], int(turns[i]))[0] for i in range(n)
            ])
        copies[:, a] = np.clip(jittered, 0.0, 1.0)
    flat = copies.reshape(n * n_aug, d)
    responses = endpoint.query(flat).reshape(n, n_aug, -1)
    raw = responses[:, 0].copy()
    recovered = responses.mean(axis=1)
    return AttackTrace("smoothing", seed, samples, raw, recovered)


# ---------------------------------------------------------------------------
# self-supervised auxiliary training
# ---------------------------------------------------------------------------


@dataclass
class RotationHead:
    """4-way linear classifier on the trunk features predicting which
    quarter-turn was applied to the input."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def initialize(cls, feature_dim: int, rng: RandomSource) -> "RotationHead":
        scale = np.sqrt(2.0 / feature_dim)
        return cls(rng.normal(0.0, scale, (feature_dim, 4)), np.zeros(4))


def rotation_loss_and_grads(model: Mlp, head: RotationHead, batch: np.ndarray):
    """Mean rotation-prediction cross-entropy over all four quarter-turns
    of every sample (the 1/(4N) normalization), with exact gradients for
    both the head and the trunk."""
    n = len(batch)
    rotated = np.concatenate([rotate_batch(batch, j) for j in range(4)])
    rot_labels = np.repeat(np.arange(4), n)
    acts, pres = forward_cached(model, rotated)
    features = acts[-2]
    rot_logits = features @ head.weights + head.bias
    loss, dlogits = loss_and_dlogits(rot_logits, rot_labels, "hard")
    d_weights = features.T @ dlogits
    d_bias = dlogits.sum(axis=0)
    dfeatures = dlogits @ head.weights.T
    trunk_grads, _ = backprop(
        model, acts, pres, np.zeros_like(acts[-1]), dfeatures=dfeatures
    )
    return loss, trunk_grads, (d_weights, d_bias)


def s4l_train(
    model: Mlp,
    head: RotationHead,
    inputs: np.ndarray,
    targets,
    config: TrainConfig,
    aux_weight: float = 1.0,
) -> tuple[Mlp, RotationHead, list[float]]:
    """Surrogate training with a rotation-prediction auxiliary loss.

    Mirrors the plain SGD loop exactly (same shuffle stream, same update
    order), so aux_weight == 0 reproduces plain training bit for bit while
    still returning the untouched head.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets)
    n = len(inputs)
    model = model.copy()
    head = RotationHead(head.weights.copy(), head.bias.copy())
    vel_w = [np.zeros_like(w) for w in model.weights]
    vel_b = [np.zeros_like(b) for b in model.biases]
    vel_hw = np.zeros_like(head.weights)
    vel_hb = np.zeros_like(head.bias)
    rng = RandomSource(config.seed, "train-shuffle")
    trace: list[float] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_decay_step > 0:
            lr = lr * config.lr_decay_factor ** (epoch // config.lr_decay_step)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = inputs[idx]
            loss, grads = grad(model, batch, targets[idx], config.loss)
            if aux_weight != 0.0:
                rot_loss, rot_grads, (dhw, dhb) = rotation_loss_and_grads(model, head, batch)
                loss = loss + aux_weight * rot_loss
                grads = [
                    (gw + aux_weight * rw, gb + aux_weight * rb)
                    for (gw, gb), (rw, rb) in zip(grads, rot_grads)
                ]
                vel_hw = config.momentum * vel_hw - lr * aux_weight * dhw
                vel_hb = config.momentum * vel_hb - lr * aux_weight * dhb
                head.weights += vel_hw
                head.bias += vel_hb
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss * len(idx)
            for l, (dw, db) in enumerate(grads):
                vel_w[l] = config.momentum * vel_w[l] - lr * dw
                vel_b[l] = config.momentum * vel_b[l] - lr * db
                model.weights[l] += vel_w[l]
                model.biases[l] += vel_b[l]
        trace.append(epoch_loss / n)
    return model, head, trace


# ---------------------------------------------------------------------------
# recovery mechanisms
# ---------------------------------------------------------------------------


@dataclass
class PerturbationTable:
    """Attacker-built lookup of (clean, perturbed) response pairs probed
    from shadow models running the suspected defense."""

    clean: np.ndarray
    perturbed: np.ndarray

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=np.float64)
        self.perturbed = np.asarray(self.perturbed, dtype=np.float64)
        if len(self.clean) == 0:
            raise ValueError("empty perturbation table")
        if self.clean.shape != self.perturbed.shape:
            raise ValueError("table sides must align")


def pbayes_recover(trace: AttackTrace, table: PerturbationTable, radius: float = 0.05) -> AttackTrace:
    """Estimate clean responses from the lookup table.

    For each raw response, average the clean entries of all table rows
    whose perturbed entry lies within `radius` (L2); when none match, fall
    back to the single nearest neighbor.
    """
    recovered = np.empty_like(trace.raw)
    for i, row in enumerate(trace.raw):
        dists = np.linalg.norm(table.perturbed - row, axis=1)
        near = dists <= radius
        if not np.any(near):
            near = np.zeros(len(dists), dtype=bool)
            near[int(np.argmin(dists))] = True
        recovered[i] = table.clean[near].mean(axis=0)
    return AttackTrace(f"{trace.kind}+pbayes", trace.seed, trace.queries, trace.raw, recovered)


def ddae_recover_train(
    shadow_count: int,
    pairs_per_shadow: int,
    defense_simulator: Callable[[int, int, RandomSource], tuple[np.ndarray, np.ndarray]],
    seed: int,
    hidden: tuple[int, int] = (64, 64),
    config: TrainConfig | None = None,
) -> tuple[Mlp, float]:
    """Train a denoising network mapping perturbed responses to clean ones.

    The simulator produces (clean, perturbed) response pairs from shadow
    model `i`; pairs from all shadows are pooled, split 80/20, and a
    three-layer MLP is fit with MSE loss. Returns (network, held-out MSE).
    """
    if shadow_count < 1 or pairs_per_shadow < 1:
        raise ValueError("need at least one shadow and one pair")
    rng = RandomSource(seed, "ddae")
    cleans, perturbeds = [], []
    for i in range(shadow_count):
        clean, perturbed = defense_simulator(i, pairs_per_shadow, rng.derive(f"shadow{i}"))
        cleans.append(np.asarray(clean, dtype=np.float64))
        perturbeds.append(np.asarray(perturbed, dtype=np.float64))
    clean = np.concatenate(cleans)
    perturbed = np.concatenate(perturbeds)
    k = clean.shape[1]
    order = rng.permutation(len(clean))
    clean, perturbed = clean[order], perturbed[order]
    n_train = max(1, int(0.8 * len(clean)))
    if config is None:
        config = TrainConfig(
            epochs=60, batch_size=128, learning_rate=0.05, momentum=0.9, loss="mse"
        )
    config = replace(config, loss="mse", seed=rng.child_seed("train"))
    net = Mlp.initialize([k, hidden[0], hidden[1], k], rng.derive("init"))
    net, _ = train(net, perturbed[:n_train], clean[:n_train], config)
    _, pred = net.forward(perturbed[n_train:])
    heldout_mse = float(np.mean((pred - clean[n_train:]) ** 2)) if n_train < len(clean) else 0.0
    return net, heldout_mse


def apply_recovery(trace: AttackTrace, net: Mlp) -> AttackTrace:
    """Run every raw response through a trained recovery network."""
    _, recovered = net.forward(trace.raw)
    return AttackTrace(f"{trace.kind}+ddae", trace.seed, trace.queries, trace.raw, recovered)


# ---------------------------------------------------------------------------
# surrogate training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class ExtractionResult:
    surrogate: Mlp
    e_acc: float
    fidelity: float


def _sanitize_soft_targets(rows: np.ndarray) -> np.ndarray:
    """Recovered responses can leave the simplex (denoising nets, table
    averaging); clamp and renormalize before using them as soft targets."""
    rows = np.clip(rows, 0.0, None)
    sums = rows.sum(axis=1, keepdims=True)
    bad = sums[:, 0] <= 0
    if np.any(bad):
        rows[bad] = 1.0
        sums = rows.sum(axis=1, keepdims=True)
    return rows / sums


def extract(
    trace: AttackTrace,
    victim: Mlp,
    test_inputs: np.ndarray,
    test_labels: np.ndarray,
    surrogate_widths,
    config: TrainConfig,
    mode: str = "soft",
) -> ExtractionResult:
    """Train the surrogate on recovered responses and score it.

    E-Acc is the surrogate's clean test accuracy; fidelity is its argmax
    agreement rate with the victim on the same test inputs.
    """
    rng = RandomSource(config.seed, "extract-init")
    surrogate = Mlp.initialize(surrogate_widths, rng)
    if mode == "soft":
        targets = _sanitize_soft_targets(trace.recovered.copy())
        config = replace(config, loss="soft")
    elif mode == "hard":
        targets = np.argmax(trace.recovered, axis=1)
        config = replace(config, loss="hard")
    else:
        raise ValueError("mode must be 'soft' or 'hard'")
    surrogate, _ = train(surrogate, trace.queries, targets, config)
    e_acc = accuracy(surrogate, test_inputs, test_labels)
    fidelity = float(
        np.mean(predict_labels(surrogate, test_inputs) == predict_labels(victim, test_inputs))
    )
    return ExtractionResult(surrogate, e_acc, fidelity)


# ---------------------------------------------------------------------------
# trace files: header (kind, seed, rows) + queries/raw/recovered tensors
# ---------------------------------------------------------------------------


def write_trace(fh: BinaryIO, trace: AttackTrace) -> None:
    fh.write(TRACE_MAGIC)
    tag = trace.kind.encode("utf-8")
    fh.write(struct.pack("<B", len(tag)))
    fh.write(tag)
    fh.write(struct.pack("<Q", trace.seed & 0xFFFFFFFFFFFFFFFF))
    fh.write(struct.pack("<Q", len(trace)))
    write_tensor(fh, trace.queries)
    write_tensor(fh, trace.raw)
    write_tensor(fh, trace.recovered)


def read_trace(fh: BinaryIO) -> AttackTrace:
    if fh.read(4) != TRACE_MAGIC:
        raise ValueError("bad trace file magic")
    (taglen,) = struct.unpack("<B", fh.read(1))
    kind = fh.read(taglen).decode("utf-8")
    (seed,) = struct.unpack("<Q", fh.read(8))
    (rows,) = struct.unpack("<Q", fh.read(8))
    queries = read_tensor(fh)
    raw = read_tensor(fh)
    recovered = read_tensor(fh)
    if len(queries) != rows:
        raise ValueError("trace payload inconsistent with header")
    return AttackTrace(kind, seed, queries, raw, recovered)


def save_trace(path, trace: AttackTrace) -> None:
    with open(path, "wb") as fh:
        write_trace(fh, trace)


def load_trace(path) -> AttackTrace:
    with open(path, "rb") as fh:
        return read_trace(fh)
