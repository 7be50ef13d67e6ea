"""Experiment orchestration: configuration, the defense x attack scenario
matrix, persistence, and report emission.

A scenario is fully determined by its config and master seed: every
stochastic stage (data generation, model init, shuffling, attack sampling,
protection randomness) draws from a stream derived from the master seed
and the config digest, so any run record can be regenerated bit for bit.
"""

from __future__ import annotations

import csv
import json
import hashlib
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import attacks as atk
from . import channel as chan
from . import verify as ver
from .datagen import (
    Dataset,
    gen_blobs,
    gen_composite_watermarks,
    left_half_mask,
    save_watermarks,
)
from .honeytrace import (
    DawnEndpoint,
    DawnProtector,
    HoneytraceEndpoint,
    ProtectedModel,
    ProtectionParams,
    UnprotectedEndpoint,
    select_watermark_set,
)
from .nn import Mlp, TrainConfig, accuracy, predict_labels, save_model, train
from .numerics import RandomSource, softmax


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


DEFENSE_KINDS = ("none", "honeytrace", "dawn")
ATTACK_KINDS = ("naive", "top1", "smoothing", "jbda_tr", "s4l", "pbayes", "ddae")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class DataParams:
    classes: int = 10
    dim: int = 64
    per_class_train: int = 500
    per_class_test: int = 200
    per_class_holdout: int = 50
    spread: float = 0.3
    attacker_per_class: int = 450
    attacker_spread: float = 0.45
    attacker_shift: float = 0.25
    attacker_uniform: int = 1500
    attacker_in_distribution: bool = False
    benign_per_class: int = 500

    def attacker_pool_size(self) -> int:
        return self.classes * self.attacker_per_class + self.attacker_uniform


@dataclass
class WatermarkParams:
    source_k: int = 0
    source_j: int = 1
    target: int = 2
    trigger_count: int = 8
    candidates: int = 12
    probe_strength: float = 1.0


@dataclass
class DefenseParams:
    kind: str = "honeytrace"
    mode: str = "soft"
    margin_d: float = 1.0
    alpha: float = 2.0
    beta: float = 3.0
    confidence_threshold: float = 0.95
    epsilon_scale: float | None = None
    dawn_flip_ratio: float = 0.02
    dawn_attacker_fraction: float = 0.1
    dawn_benign_cap: int = 45000

    def protection_params(self) -> ProtectionParams:
        return ProtectionParams(
            margin_d=self.margin_d,
            alpha=self.alpha,
            beta=self.beta,
            confidence_threshold=self.confidence_threshold,
            epsilon_scale=self.epsilon_scale,
            mode=self.mode,
        )


@dataclass
class AttackParams:
    kind: str = "naive"
    budget: int = 5000
    initial_pool: int = 500
    n_aug: int = 3
    jitter: float = 0.05
    mu: float = 0.01
    steps: int = 8
    interim_epochs: int = 10
    s4l_weight: float = 1.0
    pbayes_radius: float = 0.05
    shadow_count: int = 4
    pairs_per_shadow: int = 12500

    def query_budget(self) -> atk.QueryBudget:
        return atk.QueryBudget(self.budget, self.initial_pool, self.n_aug)


@dataclass
class TrainParams:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_decay_step: int = 10
    lr_decay_factor: float = 0.7

    def train_config(self, seed: int, loss: str = "hard") -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            lr_decay_step=self.lr_decay_step,
            lr_decay_factor=self.lr_decay_factor,
            loss=loss,
            seed=seed,
        )


@dataclass
class VerifyParams:
    alpha: float = 1e-4
    beta: float = 0.01
    n_probes: int = 500


@dataclass
class ExperimentConfig:
    data: DataParams = field(default_factory=DataParams)
    watermark: WatermarkParams = field(default_factory=WatermarkParams)
    defense: DefenseParams = field(default_factory=DefenseParams)
    attack: AttackParams = field(default_factory=AttackParams)
    victim: TrainParams = field(default_factory=lambda: TrainParams(epochs=100))
    surrogate: TrainParams = field(default_factory=TrainParams)
    verify: VerifyParams = field(default_factory=VerifyParams)
    victim_widths: list = field(default_factory=lambda: [64, 128, 64, 10])
    surrogate_widths: list = field(default_factory=lambda: [64, 128, 64, 10])
    master_seed: int = 0
    outdir: str | None = None
    tag: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        d, w, a = self.data, self.watermark, self.attack
        if self.defense.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense kind {self.defense.kind!r}")
        if a.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {a.kind!r}")
        if self.defense.mode not in ("soft", "hard"):
            raise ConfigError("defense mode must be 'soft' or 'hard'")
        for name, cls in (("source_k", w.source_k), ("source_j", w.source_j), ("target", w.target)):
            if not 0 <= cls < d.classes:
                raise ConfigError(f"watermark {name}={cls} outside [0, {d.classes})")
        if len({w.source_k, w.source_j, w.target}) != 3:
            raise ConfigError("watermark source and target classes must be distinct")
        if self.victim_widths[0] != d.dim or self.victim_widths[-1] != d.classes:
            raise ConfigError("victim widths must match dataset dim and classes")
        if self.surrogate_widths[0] != d.dim or self.surrogate_widths[-1] != d.classes:
            raise ConfigError("surrogate widths must match dataset dim and classes")
        if a.budget > d.attacker_pool_size():
            raise ConfigError("attack budget exceeds the attacker pool")
        if a.kind == "jbda_tr" and a.initial_pool > a.budget:
            raise ConfigError("jbda initial pool exceeds the budget")
        if self.verify.n_probes < 1:
            raise ConfigError("need at least one verification probe")
        a.query_budget()  # raises on internal inconsistency

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("outdir")
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        sections = {
            "data": DataParams,
            "watermark": WatermarkParams,
            "defense": DefenseParams,
            "attack": AttackParams,
            "victim": TrainParams,
            "surrogate": TrainParams,
            "verify": VerifyParams,
        }
        kwargs = {}
        for name, section_cls in sections.items():
            section = raw.pop(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section [{name}] must be a table")
            known = {f.name for f in section_cls.__dataclass_fields__.values()}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            try:
                kwargs[name] = section_cls(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad [{name}] section: {exc}") from exc
        top_known = {"victim_widths", "surrogate_widths", "master_seed", "outdir", "tag"}
        unknown = set(raw) - top_known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs.update(raw)
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply `section.key=value` strings on top of a config (CLI wins over
    the file). Values are parsed as TOML scalars."""
    raw = config.to_dict()
    raw["outdir"] = config.outdir
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value  # bare string
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {part!r} in override {item!r}")
            node = node[part]
        node[parts[-1]] = parsed
    outdir = raw.pop("outdir", None)
    cfg = ExperimentConfig.from_dict(raw)
    cfg.outdir = outdir
    return cfg


def resolve_output_root(configured: str | None) -> Path:
    env = os.environ.get("NHT_OUT")
    if env:
        return Path(env)
    return Path(configured or "runs")


# ---------------------------------------------------------------------------
# run record
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config_digest: str
    master_seed: int
    defense: str
    attack: str
    tag: str
    victim_accuracy: float
    protected_accuracy: float
    e_acc: float
    fidelity: float
    wsr: float
    wsr_hits: int
    wsr_probes: int
    baseline_rate: float
    claim: dict
    channel: dict
    stage_seconds: dict

    def canonical_dict(self) -> dict:
        """Everything except wall-clock timing; byte-stable across reruns."""
        out = asdict(self)
        out.pop("stage_seconds")
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.canonical_dict(), sort_keys=True, separators=(",", ":"))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# scenario pipeline
# ---------------------------------------------------------------------------


def _gen_all_data(cfg: ExperimentConfig, data_seed: int):
    """Victim-side splits plus the attacker's query pool.

    The attacker pool mimics broad public data: blobs drawn around shifted
    class means with a wider spread than the task distribution (labeled,
    usable for the attacker's own shadow models), topped up with uniform
    noise queries (unlabeled coverage of the input box). The in-distribution
    flag drops the mean shift, reproducing the setting where the attacker
    queries with the victim's own training distribution.
    """
    d = cfg.data
    shift = 0.0 if d.attacker_in_distribution else d.attacker_shift
    train_data = gen_blobs(d.classes, d.dim, d.per_class_train, d.spread, data_seed, "train")
    test_data = gen_blobs(d.classes, d.dim, d.per_class_test, d.spread, data_seed, "test")
    holdout = gen_blobs(d.classes, d.dim, d.per_class_holdout, d.spread, data_seed, "holdout")
    attacker = gen_blobs(
        d.classes, d.dim, d.attacker_per_class, d.attacker_spread, data_seed,
        "attacker", mean_shift=shift,
    )
    if d.attacker_uniform > 0:
        uniform = RandomSource(data_seed, "attacker-uniform").uniform(
            0.0, 1.0, (d.attacker_uniform, d.dim)
        )
        attacker_pool = np.concatenate([attacker.inputs, uniform])
    else:
        attacker_pool = attacker.inputs
    benign = gen_blobs(d.classes, d.dim, d.benign_per_class, d.spread, data_seed, "benign")
    return train_data, test_data, holdout, attacker, attacker_pool, benign


def _build_endpoint(cfg, victim, wm, train_data, root):
    kind = cfg.defense.kind
    if kind == "none":
        return UnprotectedEndpoint(victim, cfg.defense.mode), None, None
    if kind == "honeytrace":
        pm = ProtectedModel(
            victim, wm, cfg.defense.protection_params(), train_data, root.derive("protect")
        )
        return HoneytraceEndpoint(pm), pm, None
    if kind == "dawn":
        key = root.derive("dawn-key").token_bytes(32)
        protector = DawnProtector(victim, cfg.defense.dawn_flip_ratio, key, cfg.defense.mode)
        return DawnEndpoint(protector), None, protector
    raise ConfigError(f"unknown defense kind {kind!r}")


def _shadow_defense_simulator(cfg: ExperimentConfig, attacker: Dataset, root: RandomSource):
    """Adaptive-attacker training data: the attacker trains shadow victims
    on its own labeled pool and wraps them with its own guess of the
    deployed defense (it knows the kind, not the deployment secrets)."""
    widths = list(cfg.surrogate_widths)
    shadow_train = cfg.surrogate.train_config(0, "hard")

    def simulator(index: int, n_pairs: int, rng: RandomSource):
        shadow = Mlp.initialize(widths, rng.derive("init"))
        shadow_cfg = replace(shadow_train, seed=rng.child_seed("train"))
        shadow, _ = train(shadow, attacker.inputs, attacker.labels, shadow_cfg)
        probe_idx = np.asarray(rng.integers(len(attacker.inputs), size=n_pairs))
        probes = attacker.inputs[probe_idx]
        _, clean_logits = shadow.forward(probes)
        clean = softmax(clean_logits)
        if cfg.defense.kind == "dawn":
            protector = DawnProtector(
                shadow, cfg.defense.dawn_flip_ratio, rng.derive("key").token_bytes(32), "soft"
            )
            perturbed = DawnEndpoint(protector).query(probes)
        else:
            guess_wm = gen_composite_watermarks(
                attacker,
                cfg.watermark.source_k,
                cfg.watermark.source_j,
                left_half_mask(cfg.data.dim),
                cfg.watermark.trigger_count,
                rng.child_seed("wm"),
                target=cfg.watermark.target,
            )
            shadow_pm = ProtectedModel(
                shadow,
                guess_wm,
                ProtectionParams(
                    margin_d=cfg.defense.margin_d,
                    alpha=cfg.defense.alpha,
                    beta=cfg.defense.beta,
                    confidence_threshold=cfg.defense.confidence_threshold,
                    mode="soft",
                ),
                attacker,
                rng.derive("protect"),
            )
            perturbed = HoneytraceEndpoint(shadow_pm).query(probes)
        return clean, perturbed

    return simulator


def _run_attack(
    cfg: ExperimentConfig,
    endpoint,
    attacker: Dataset,
    pool: np.ndarray,
    root: RandomSource,
):
    """Produce the attack trace for the configured attack kind."""
    a = cfg.attack
    seed = root.child_seed("attack")
    if a.kind in ("naive", "top1", "s4l", "pbayes", "ddae"):
        trace = atk.knockoff_query(endpoint, pool, a.budget, seed)
    elif a.kind == "smoothing":
        distinct = max(1, a.budget // a.n_aug)
        picker = RandomSource(seed, "smoothing-pick")
        samples = pool[picker.permutation(len(pool))[:distinct]]
        trace = atk.smoothing_attack(endpoint, samples, a.n_aug, a.jitter, seed=seed)
    elif a.kind == "jbda_tr":
        picker = RandomSource(seed, "jbda-pick")
        seed_pool = pool[picker.permutation(len(pool))[:a.initial_pool]]
        interim = TrainConfig(
            epochs=a.interim_epochs,
            batch_size=cfg.surrogate.batch_size,
            learning_rate=cfg.surrogate.learning_rate,
            momentum=cfg.surrogate.momentum,
            loss="hard",
        )
        trace = atk.jbda_tr_query(
            endpoint, seed_pool, a.mu, a.steps, a.budget,
            list(cfg.surrogate_widths), interim, seed,
        )
    else:
        raise ConfigError(f"unknown attack kind {a.kind!r}")

    if a.kind == "top1":
        trace = atk.top1_attack(trace)
    elif a.kind == "pbayes":
        sim = _shadow_defense_simulator(cfg, attacker, root.derive("pbayes-shadows"))
        clean, perturbed = sim(0, a.pairs_per_shadow, root.derive("pbayes-pairs"))
        table = atk.PerturbationTable(clean, perturbed)
        trace = atk.pbayes_recover(trace, table, a.pbayes_radius)
    elif a.kind == "ddae":
        sim = _shadow_defense_simulator(cfg, attacker, root.derive("ddae-shadows"))
        net, _ = atk.ddae_recover_train(
            a.shadow_count, a.pairs_per_shadow, sim, root.child_seed("ddae-train")
        )
        trace = atk.apply_recovery(trace, net)
    return trace


def _train_surrogate(cfg, trace, victim, test_data, seed):
    mode = cfg.defense.mode
    if cfg.attack.kind == "s4l":
        init_rng = RandomSource(seed, "s4l-init")
        model = Mlp.initialize(list(cfg.surrogate_widths), init_rng)
        head = atk.RotationHead.initialize(model.feature_dim, init_rng.derive("rot-head"))
        loss = "soft" if mode == "soft" else "hard"
        targets = (
            atk._sanitize_soft_targets(trace.recovered.copy())
            if loss == "soft"
            else np.argmax(trace.recovered, axis=1)
        )
        train_cfg = cfg.surrogate.train_config(seed, loss)
        model, _, _ = atk.s4l_train(
            model, head, trace.queries, targets, train_cfg, cfg.attack.s4l_weight
        )
        e_acc = accuracy(model, test_data.inputs, test_data.labels)
        fidelity = float(
            np.mean(
                predict_labels(model, test_data.inputs)
                == predict_labels(victim, test_data.inputs)
            )
        )
        return atk.ExtractionResult(model, e_acc, fidelity)
    extraction_mode = "hard" if (mode == "hard" or cfg.attack.kind == "top1") else "soft"
    return atk.extract(
        trace,
        victim,
        test_data.inputs,
        test_data.labels,
        list(cfg.surrogate_widths),
        cfg.surrogate.train_config(seed),
        extraction_mode,
    )


def _channel_report(cfg, pm, trace, train_data):
    if pm is not None:
        sims = pm.similarity_scores(trace.queries)
        sim_sigma = float(np.std(sims))
        aggregation = max(1, int(np.sum(sims > 0)))
    else:
        sim_sigma = 0.0
        aggregation = max(1, len(trace))
    noise = trace.recovered - trace.raw
    noise_sigma = float(np.std(noise))
    label_dist = np.bincount(train_data.labels, minlength=cfg.data.classes) / len(train_data)
    hist = None
    if cfg.defense.mode == "soft":
        hist = chan.quantize_outputs(trace.raw, 0.01)
    return chan.build_report(
        similarity_sigma=sim_sigma,
        num_classes=cfg.data.classes,
        label_distribution=label_dist,
        mode=cfg.defense.mode,
        output_histogram=hist,
        precision=0.01,
        error_rate=0.05,
        noise_sigma=noise_sigma if noise_sigma > 1e-12 else None,
        aggregation_count=aggregation,
    )


def run_scenario(cfg: ExperimentConfig, persist: bool = True) -> RunRecord:
    """Full pipeline: data, victim, defense wrap, attack, extraction,
    verification, channel report. Deterministic from (config, master seed).

    On persist=True all artifacts land under <output root>/<config digest>/;
    a failing stage still writes whatever was produced before the failure.
    """
    digest = cfg.digest()
    root = RandomSource(cfg.master_seed, "scenario").derive(digest)
    timings: dict[str, float] = {}
    run_dir = None
    if persist:
        run_dir = resolve_output_root(cfg.outdir) / digest
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(cfg.canonical_json() + "\n")

    artifacts: dict[str, object] = {}

    def staged(name):
        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timings[name] = time.perf_counter() - self.t0
                if exc is not None and run_dir is not None:
                    _persist_artifacts(run_dir, artifacts)
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc

        return _Timer()

    with staged("data"):
        data_seed = root.child_seed("data")
        train_data, test_data, holdout, attacker, attacker_pool, benign = _gen_all_data(
            cfg, data_seed
        )

    with staged("victim"):
        victim = Mlp.initialize(list(cfg.victim_widths), root.derive("victim-init"))
        vcfg = cfg.victim.train_config(root.child_seed("victim-train"))
        victim, _ = train(victim, train_data.inputs, train_data.labels, vcfg)
        victim_acc = accuracy(victim, test_data.inputs, test_data.labels)
        artifacts["victim.ckpt"] = victim

    with staged("protect"):
        wm = select_watermark_set(
            victim,
            train_data,
            cfg.defense.protection_params(),
            cfg.watermark.source_k,
            cfg.watermark.source_j,
            cfg.watermark.target,
            left_half_mask(cfg.data.dim),
            cfg.watermark.trigger_count,
            root.child_seed("watermarks"),
            candidates=cfg.watermark.candidates,
        )
        artifacts["watermarks.nht"] = wm
        endpoint, pm, dawn = _build_endpoint(cfg, victim, wm, train_data, root)
        responses = endpoint.query(test_data.inputs)
        protected_acc = float(np.mean(np.argmax(responses, axis=1) == test_data.labels))

    with staged("attack"):
        if dawn is not None:
            f = cfg.defense.dawn_attacker_fraction
            benign_n = min(
                cfg.defense.dawn_benign_cap,
                int(cfg.attack.budget * (1.0 - f) / max(f, 1e-9)),
            )
            if benign_n > 0:
                bidx = np.asarray(
                    root.derive("benign-traffic").integers(len(benign.inputs), size=benign_n)
                )
                endpoint.query(benign.inputs[bidx])
        trace = _run_attack(cfg, endpoint, attacker, attacker_pool, root)
        artifacts["trace.nht"] = trace

    with staged("extract"):
        result = _train_surrogate(cfg, trace, victim, test_data, root.child_seed("surrogate"))
        artifacts["surrogate.ckpt"] = result.surrogate

    with staged("control"):
        if cfg.defense.kind == "none":
            control_result = result
        else:
            control_endpoint = UnprotectedEndpoint(victim, cfg.defense.mode)
            control_trace = _run_attack(cfg, control_endpoint, attacker, attacker_pool, root)
            control_result = _train_surrogate(
                cfg, control_trace, victim, test_data, root.child_seed("control")
            )

    with staged("verify"):
        probes = ver.build_probes(
            wm,
            holdout.class_rows(cfg.watermark.source_j),
            cfg.verify.n_probes,
            cfg.watermark.probe_strength,
        )
        if dawn is not None:
            records = dawn.records
            wsr = ver.dawn_wsr(result.surrogate, victim, records)
            baseline = ver.dawn_wsr(control_result.surrogate, victim, records)
            n = max(1, len(records))
            hits = int(round(wsr * n))
        else:
            hits, n = ver.count_wsr(result.surrogate, victim, wm, probes)
            wsr = hits / n
            base_hits, base_n = ver.count_wsr(control_result.surrogate, victim, wm, probes)
            baseline = base_hits / base_n
        claim = ver.ownership_claim(hits, n, min(baseline, 1.0 - 1e-9), cfg.verify.alpha)
        artifacts["claim.json"] = claim

    with staged("channel"):
        report = _channel_report(cfg, pm, trace, train_data)
        artifacts["channel.txt"] = report

    record = RunRecord(
        config_digest=digest,
        master_seed=cfg.master_seed,
        defense=cfg.defense.kind,
        attack=cfg.attack.kind,
        tag=cfg.tag,
        victim_accuracy=victim_acc,
        protected_accuracy=protected_acc,
        e_acc=result.e_acc,
        fidelity=result.fidelity,
        wsr=wsr,
        wsr_hits=hits,
        wsr_probes=n,
        baseline_rate=baseline,
        claim=claim.to_dict(),
        channel=report.to_dict(),
        stage_seconds={k: round(v, 4) for k, v in timings.items()},
    )
    if run_dir is not None:
        artifacts["record.json"] = record
        if dawn is not None:
            artifacts["dawn_records.log"] = dawn
        _persist_artifacts(run_dir, artifacts)
    return record


def _persist_artifacts(run_dir: Path, artifacts: dict) -> None:
    for name, obj in artifacts.items():
        path = run_dir / name
        if name.endswith(".ckpt"):
            save_model(path, obj)
        elif name == "watermarks.nht":
            save_watermarks(path, obj)
        elif name == "trace.nht":
            atk.save_trace(path, obj)
        elif name == "claim.json":
            path.write_text(obj.to_json() + "\n")
        elif name == "channel.txt":
            path.write_text(obj.to_text())
            (run_dir / "channel.json").write_text(obj.to_json() + "\n")
        elif name == "record.json":
            path.write_text(obj.to_json() + "\n")
        elif name == "dawn_records.log":
            obj.save_records(path)


# ---------------------------------------------------------------------------
# matrix
# ---------------------------------------------------------------------------


@dataclass
class MatrixSummary:
    records: list
    aggregates: dict

    def table(self) -> str:
        lines = [
            f"{'defense':<12} {'avg E-Acc':>10} {'max E-Acc':>10} "
            f"{'avg WSR':>10} {'min WSR':>10} {'prot acc':>10}"
        ]
        for defense, agg in self.aggregates.items():
            lines.append(
                f"{defense:<12} {agg['avg_e_acc']:>10.4f} {agg['max_e_acc']:>10.4f} "
                f"{agg['avg_wsr']:>10.4f} {agg['min_wsr']:>10.4f} "
                f"{agg['protected_accuracy']:>10.4f}"
            )
        return "\n".join(lines)


def default_matrix(
    master_seed: int = 0,
    outdir: str | None = None,
    defenses=("honeytrace", "dawn", "none"),
    attack_kinds=("naive", "top1", "smoothing", "jbda_tr"),
) -> list[ExperimentConfig]:
    configs = []
    for defense in defenses:
        for attack_kind in attack_kinds:
            configs.append(
                ExperimentConfig(
                    defense=DefenseParams(kind=defense),
                    attack=AttackParams(kind=attack_kind),
                    master_seed=master_seed,
                    outdir=outdir,
                )
            )
    return configs


def _run_one(args):
    cfg, persist = args
    return run_scenario(cfg, persist=persist)


def run_matrix(configs, persist: bool = True, workers: int = 1) -> MatrixSummary:
    """Run every scenario and aggregate avg/max E-Acc and avg/min WSR per
    defense. Scenarios never share random streams: each derives everything
    from (master seed, its own config digest)."""
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, [(c, persist) for c in configs]))
    else:
        records = [run_scenario(c, persist=persist) for c in configs]
    aggregates: dict[str, dict] = {}
    for defense in dict.fromkeys(r.defense for r in records):
        rows = [r for r in records if r.defense == defense]
        aggregates[defense] = {
            "avg_e_acc": float(np.mean([r.e_acc for r in rows])),
            "max_e_acc": float(np.max([r.e_acc for r in rows])),
            "avg_wsr": float(np.mean([r.wsr for r in rows])),
            "min_wsr": float(np.min([r.wsr for r in rows])),
            "protected_accuracy": float(np.mean([r.protected_accuracy for r in rows])),
        }
    return MatrixSummary(records, aggregates)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

SUMMARY_FIELDS = [
    "config_digest",
    "defense",
    "attack",
    "tag",
    "victim_accuracy",
    "protected_accuracy",
    "e_acc",
    "fidelity",
    "wsr",
    "baseline_rate",
    "claim_p_exact",
    "claimed",
]


def emit_reports(records, outdir, alpha: float = 1e-4, beta: float = 0.01) -> list[Path]:
    """Write summary CSV, per-run JSON, the claim curve, and sweep CSVs.

    Records tagged `sweep:<name>=<value>` additionally land in a
    sweep_<name>.csv with one row per value.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    summary = outdir / "summary.csv"
    with open(summary, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_FIELDS)
        for rec in records:
            writer.writerow(
                [
                    rec.config_digest,
                    rec.defense,
                    rec.attack,
                    rec.tag,
                    rec.victim_accuracy,
                    rec.protected_accuracy,
                    rec.e_acc,
                    rec.fidelity,
                    rec.wsr,
                    rec.baseline_rate,
                    rec.claim["p_exact"],
                    rec.claim["claimed"],
                ]
            )
    written.append(summary)

    records_dir = outdir / "records"
    records_dir.mkdir(exist_ok=True)
    for rec in records:
        path = records_dir / f"{rec.config_digest}.json"
        path.write_text(rec.to_json() + "\n")
        written.append(path)

    curve_path = outdir / "claim_curve.csv"
    grid = [round(0.02 * i, 2) for i in range(1, 51)]
    ver.write_claim_curve_csv(curve_path, ver.claim_curve(alpha, beta, grid))
    written.append(curve_path)

    sweeps: dict[str, list] = {}
    for rec in records:
        if rec.tag.startswith("sweep:") and "=" in rec.tag:
            name, value = rec.tag[len("sweep:") :].split("=", 1)
            sweeps.setdefault(name, []).append((float(value), rec))
    for name, rows in sweeps.items():
        rows.sort(key=lambda item: item[0])
        path = outdir / f"sweep_{name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([name, "wsr", "protected_accuracy", "e_acc", "fidelity"])
            for value, rec in rows:
                writer.writerow(
                    [value, rec.wsr, rec.protected_accuracy, rec.e_acc, rec.fidelity]
                )
        written.append(path)
    return written


def svg_line_chart(series: dict, path, title: str = "", width: int = 640, height: int = 400):
    """Minimal dependency-free SVG line chart; one polyline per series."""
    pad = 50
    points = [pt for pts in series.values() for pt in pts]
    if not points:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xr = (x1 - x0) or 1.0
    yr = (y1 - y0) or 1.0

    def sx(x):
        return pad + (x - x0) / xr * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / yr * (height - 2 * pad)

    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width/2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{pad}" y1="{height-pad}" x2="{width-pad}" y2="{height-pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height-pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height-pad+16}" font-size="10">{x0:g}</text>',
        f'<text x="{width-pad}" y="{height-pad+16}" text-anchor="end" font-size="10">{x1:g}</text>',
        f'<text x="{pad-4}" y="{height-pad}" text-anchor="end" font-size="10">{y0:g}</text>',
        f'<text x="{pad-4}" y="{pad+4}" text-anchor="end" font-size="10">{y1:g}</text>',
    ]
    for i, (name, pts) in enumerate(series.items()):
        color = palette[i % len(palette)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(pts))
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(
            f'<text x="{width-pad}" y="{pad + 14*i}" text-anchor="end" '
            f'font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
    return Path(path)
