"""Command-line interface.

Experiment stages are exposed as subcommands (`gen-data`, `train-victim`,
`protect`, `attack`, `extract`, `verify`, `channel`, `run`, `matrix`,
`claim-curve`), the gateway runs under `serve`, and `predict` is a thin
HTTP client for a running gateway. Exit codes: 0 success, 2 configuration
error, 3 stage failure. The NHT_OUT environment variable overrides the
output root of `run`/`matrix`.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import channel as chan
from . import verify as ver
from .datagen import (
    gen_blobs,
    gen_composite_watermarks,
    left_half_mask,
    load_dataset,
    load_watermarks,
    save_dataset,
    save_watermarks,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    StageError,
    apply_overrides,
    emit_reports,
    resolve_output_root,
    run_matrix,
    run_scenario,
    svg_line_chart,
)
from .honeytrace import (
    DawnEndpoint,
    DawnProtector,
    HoneytraceEndpoint,
    ProtectedModel,
    ProtectionParams,
    UnprotectedEndpoint,
)
from .nn import Mlp, TrainConfig, accuracy, load_model, save_model, train
from .numerics import RandomSource


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neurht", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--spread", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--mean-shift", type=float, default=0.0)

    p = sub.add_parser("train-victim", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--widths", default="64,128,64,10")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--lr-decay-step", type=int, default=10)
    p.add_argument("--lr-decay-factor", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-data", help="optional dataset for accuracy reporting")

    p = sub.add_parser("protect", help="build a composite watermark set for a model")
    p.add_argument("--victim", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-k", type=int, default=0)
    p.add_argument("--source-j", type=int, default=1)
    p.add_argument("--target", type=int, default=2)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--margin-d", type=float, default=0.85)

    p = sub.add_parser("attack", help="run an extraction attack against an endpoint")
    p.add_argument("--victim", required=True)
    p.add_argument("--pool", required=True, help="attacker query pool dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="naive", choices=["naive", "top1", "smoothing", "jbda_tr"])
    p.add_argument("--budget", type=int, default=5000)
    p.add_argument("--defense", default="none", choices=["none", "honeytrace", "dawn"])
    p.add_argument("--watermark", help="watermark file (honeytrace defense)")
    p.add_argument("--reference-data", help="reference pool dataset (honeytrace defense)")
    p.add_argument("--mode", default="soft", choices=["soft", "hard"])
    p.add_argument("--margin-d", type=float, default=0.85)
    p.add_argument("--dawn-flip-ratio", type=float, default=0.02)
    p.add_argument("--initial-pool", type=int, default=500)
    p.add_argument("--n-aug", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("extract", help="train a surrogate from an attack trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--widths", default="64,128,64,10")
    p.add_argument("--mode", default="soft", choices=["soft", "hard"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="measure WSR and run the ownership claim test")
    p.add_argument("--suspicious", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--watermark", required=True)
    p.add_argument("--holdout", required=True, help="held-out dataset for probe construction")
    p.add_argument("--probes", type=int, default=500)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--baseline", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--out", help="optional claim JSON path")

    p = sub.add_parser("channel", help="watermark-transmission calculator")
    p.add_argument("--similarity-sigma", type=float, required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--mode", default="soft", choices=["soft", "hard"])
    p.add_argument("--precision", type=float, default=0.01)
    p.add_argument("--error-rate", type=float, default=0.05)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--steps", type=int, default=1, help="multi-step aggregation count")
    p.add_argument("--trace", help="optional trace file for the soft-label output histogram")
    p.add_argument("--out", help="optional report path (text)")

    p = sub.add_parser("run", help="run one full scenario from a TOML config")
    p.add_argument("--config", help="TOML config file (defaults apply if omitted)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set defense.kind=dawn")
    p.add_argument("--outdir")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-persist", action="store_true")

    p = sub.add_parser("matrix", help="run the defense x attack scenario matrix")
    p.add_argument("--config", help="base TOML config applied to every cell")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--defenses", default="honeytrace,dawn,none")
    p.add_argument("--attacks", default="naive,top1,smoothing,jbda_tr")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default="runs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-persist", action="store_true")

    p = sub.add_parser("claim-curve", help="required sample size over a WSR grid")
    p.add_argument("--alpha", type=float, default=1e-4)
    p.add_argument("--beta", type=float, default=0.01)
    p.add_argument("--grid", default="0.02:1.0:0.02", help="start:stop:step")
    p.add_argument("--out", help="CSV path")
    p.add_argument("--svg", help="optional SVG chart path")

    p = sub.add_parser("serve", help="run the prediction gateway")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--watermark", required=True)
    p.add_argument("--reference-data", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--mode", default="hard", choices=["soft", "hard"])
    p.add_argument("--margin-d", type=float, default=0.85)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("predict", help="thin client: POST inputs to a running gateway")
    p.add_argument("--url", default="http://127.0.0.1:8787")
    p.add_argument("--data", required=True, help="dataset file to send")
    p.add_argument("--limit", type=int, default=10)

    return parser


def _widths(text: str) -> list[int]:
    return [int(w) for w in text.split(",")]


def _train_cfg(args, loss: str = "hard") -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=getattr(args, "batch_size", 64),
        learning_rate=getattr(args, "learning_rate", 0.05),
        momentum=getattr(args, "momentum", 0.9),
        lr_decay_step=getattr(args, "lr_decay_step", 10),
        lr_decay_factor=getattr(args, "lr_decay_factor", 0.7),
        loss=loss,
        seed=args.seed,
    )


def _build_endpoint(args, victim):
    if args.defense == "none":
        return UnprotectedEndpoint(victim, args.mode)
    if args.defense == "honeytrace":
        if not args.watermark or not args.reference_data:
            raise ConfigError("honeytrace defense needs --watermark and --reference-data")
        wm = load_watermarks(args.watermark)
        reference = load_dataset(args.reference_data)
        params = ProtectionParams(margin_d=args.margin_d, mode=args.mode)
        pm = ProtectedModel(victim, wm, params, reference, RandomSource(args.seed, "protect"))
        return HoneytraceEndpoint(pm)
    protector = DawnProtector(
        victim, args.dawn_flip_ratio, RandomSource(args.seed, "dawn-key").token_bytes(32), args.mode
    )
    return DawnEndpoint(protector)


def _cmd_gen_data(args) -> int:
    data = gen_blobs(
        args.classes, args.dim, args.per_class, args.spread, args.seed,
        split=args.split, mean_shift=args.mean_shift,
    )
    save_dataset(args.out, data)
    print(f"wrote {len(data)} samples ({args.classes} classes, dim {args.dim}) -> {args.out}")
    return 0


def _cmd_train_victim(args) -> int:
    data = load_dataset(args.data)
    model = Mlp.initialize(_widths(args.widths), RandomSource(args.seed, "victim-init"))
    model, trace = train(model, data.inputs, data.labels, _train_cfg(args))
    save_model(args.out, model)
    msg = f"trained {args.widths} for {args.epochs} epochs, final loss {trace[-1]:.4g}"
    if args.test_data:
        test = load_dataset(args.test_data)
        msg += f", test accuracy {accuracy(model, test.inputs, test.labels):.4f}"
    print(msg + f" -> {args.out}")
    return 0


def _cmd_protect(args) -> int:
    victim = load_model(args.victim)
    data = load_dataset(args.data)
    wm = gen_composite_watermarks(
        data, args.source_k, args.source_j, left_half_mask(data.dim),
        args.count, args.seed, target=args.target,
    )
    # wrap once to validate the set against the model (reference pool, gap)
    pm = ProtectedModel(
        victim, wm, ProtectionParams(margin_d=args.margin_d), data,
        RandomSource(args.seed, "protect"),
    )
    save_watermarks(args.out, wm)
    print(
        f"wrote {wm.trigger_count} triggers (classes {args.source_k}+{args.source_j} "
        f"-> target {args.target}, epsilon {pm.eps_scale:.4g}) -> {args.out}"
    )
    return 0


def _cmd_attack(args) -> int:
    victim = load_model(args.victim)
    pool = load_dataset(args.pool)
    endpoint = _build_endpoint(args, victim)
    if args.kind in ("naive", "top1"):
        trace = atk.knockoff_query(endpoint, pool.inputs, args.budget, args.seed)
        if args.kind == "top1":
            trace = atk.top1_attack(trace)
    elif args.kind == "smoothing":
        distinct = max(1, args.budget // args.n_aug)
        picker = RandomSource(args.seed, "smoothing-pick")
        samples = pool.inputs[picker.permutation(len(pool.inputs))[:distinct]]
        trace = atk.smoothing_attack(endpoint, samples, args.n_aug, seed=args.seed)
    else:
        picker = RandomSource(args.seed, "jbda-pick")
        seed_pool = pool.inputs[picker.permutation(len(pool.inputs))[:args.initial_pool]]
        interim = TrainConfig(epochs=10, learning_rate=0.05, momentum=0.9)
        trace = atk.jbda_tr_query(
            endpoint, seed_pool, 0.01, 8, args.budget, [pool.dim, 128, 64, pool.num_classes],
            interim, args.seed,
        )
    atk.save_trace(args.out, trace)
    print(f"{trace.kind}: {len(trace)} queries -> {args.out}")
    return 0


def _cmd_extract(args) -> int:
    trace = atk.load_trace(args.trace)
    victim = load_model(args.victim)
    test = load_dataset(args.test_data)
    result = atk.extract(
        trace, victim, test.inputs, test.labels, _widths(args.widths),
        TrainConfig(epochs=args.epochs, learning_rate=0.05, momentum=0.9,
                    lr_decay_step=10, lr_decay_factor=0.7, seed=args.seed),
        args.mode,
    )
    save_model(args.out, result.surrogate)
    print(f"surrogate: E-Acc {result.e_acc:.4f}, fidelity {result.fidelity:.4f} -> {args.out}")
    return 0


def _cmd_verify(args) -> int:
    suspicious = load_model(args.suspicious)
    reference = load_model(args.reference)
    wm = load_watermarks(args.watermark)
    holdout = load_dataset(args.holdout)
    probes = ver.build_probes(
        wm, holdout.class_rows(wm.source_j), args.probes, args.strength
    )
    hits, n = ver.count_wsr(suspicious, reference, wm, probes)
    claim = ver.ownership_claim(hits, n, args.baseline, args.alpha)
    print(claim.summary())
    if args.out:
        Path(args.out).write_text(claim.to_json() + "\n")
    return 0


def _cmd_channel(args) -> int:
    hist = None
    if args.trace and args.mode == "soft":
        hist = chan.quantize_outputs(atk.load_trace(args.trace).raw, args.precision)
    report = chan.build_report(
        similarity_sigma=args.similarity_sigma,
        num_classes=args.classes,
        label_distribution=np.full(args.classes, 1.0 / args.classes),
        mode=args.mode,
        output_histogram=hist,
        precision=args.precision,
        error_rate=args.error_rate,
        noise_sigma=args.noise_sigma,
        aggregation_count=args.steps,
    )
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    if getattr(args, "outdir", None):
        cfg.outdir = args.outdir
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    record = run_scenario(cfg, persist=not args.no_persist)
    print(record.to_json())
    return 0


def _cmd_matrix(args) -> int:
    base = _load_config(args)
    configs = []
    for defense in args.defenses.split(","):
        for attack_kind in args.attacks.split(","):
            configs.append(
                replace(
                    base,
                    defense=replace(base.defense, kind=defense.strip()),
                    attack=replace(base.attack, kind=attack_kind.strip()),
                    master_seed=args.seed,
                    outdir=args.outdir,
                )
            )
    summary = run_matrix(configs, persist=not args.no_persist, workers=args.workers)
    print(summary.table())
    emit_reports(summary.records, resolve_output_root(args.outdir))
    return 0


def _cmd_claim_curve(args) -> int:
    start, stop, step = (float(x) for x in args.grid.split(":"))
    grid = list(np.arange(start, stop + step / 2, step))
    curve = ver.claim_curve(args.alpha, args.beta, grid)
    for w, n in curve:
        print(f"{w:.3f} {n}")
    if args.out:
        ver.write_claim_curve_csv(args.out, curve)
    if args.svg:
        svg_line_chart(
            {"required probes": [(w, n) for w, n in curve]},
            args.svg,
            title="probes required for an ownership claim",
        )
    return 0


def _cmd_serve(args) -> int:
    from .service import serve as run_server

    victim = load_model(args.checkpoint)
    wm = load_watermarks(args.watermark)
    reference = load_dataset(args.reference_data)
    params = ProtectionParams(
        margin_d=args.margin_d, alpha=args.alpha, beta=args.beta, mode=args.mode
    )
    pm = ProtectedModel(victim, wm, params, reference, RandomSource(args.seed, "serve"))
    run_server(pm, host=args.host, port=args.port)
    return 0


def _cmd_predict(args) -> int:
    import httpx

    data = load_dataset(args.data)
    rows = data.inputs[: args.limit].tolist()
    resp = httpx.post(f"{args.url}/v1/predict", json={"inputs": rows}, timeout=30.0)
    resp.raise_for_status()
    print(json.dumps(resp.json()))
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-victim": _cmd_train_victim,
    "protect": _cmd_protect,
    "attack": _cmd_attack,
    "extract": _cmd_extract,
    "verify": _cmd_verify,
    "channel": _cmd_channel,
    "run": _cmd_run,
    "matrix": _cmd_matrix,
    "claim-curve": _cmd_claim_curve,
    "serve": _cmd_serve,
    "predict": _cmd_predict,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
