"""Command-line surface: data generation, training, evaluation, alpha sweep
and the gradient self-check.

Every run writes a JSON manifest next to its primary output recording the
command, resolved configuration, inputs, outputs, seed and wall time, so any
run can be reproduced from its manifest alone. Exit codes: 0 success,
1 runtime/check failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

from . import evalkit, pipeline, selfcheck, synthdata
from .errors import ConfigError, SemiseError


def _fallback_seed() -> int | None:
    raw = os.environ.get("SEMISE_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"SEMISE_SEED must be an integer (got {raw!r})") from exc


def parse_config_file(path) -> dict:
    """Flat key=value lines; '#' starts a comment; errors name the line."""
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            mapping[key.strip()] = value.strip()
    return mapping


def resolve_config(args) -> pipeline.TrainConfig:
    """Defaults < SEMISE_SEED < config file < --set pairs < --seed flag."""
    mapping: dict = {}
    env_seed = _fallback_seed()
    if env_seed is not None:
        mapping["seed"] = env_seed
    if getattr(args, "config", None):
        mapping.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        mapping[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = args.seed
    return pipeline.TrainConfig.from_mapping(mapping)


def parse_alphas(spec: str) -> list[float]:
    """Either 'start:stop:step' (inclusive endpoints) or a comma list."""
    spec = spec.strip()
    try:
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) != 3:
                raise ValueError("range needs start:stop:step")
            start, stop, step = (float(p) for p in parts)
            if step <= 0 or stop < start:
                raise ValueError("need step > 0 and stop >= start")
            n = int(round((stop - start) / step))
            values = [round(start + i * step, 10) for i in range(n + 1)]
            values = [v for v in values if v <= stop + 1e-9]
        else:
            values = [float(p) for p in spec.split(",") if p.strip()]
        if not values:
            raise ValueError("no alpha values")
    except ValueError as exc:
        raise ConfigError(f"bad --alphas spec {spec!r}: {exc}") from exc
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"alpha {v} outside [0, 1]")
    return values


def _atomic_write(path, data: str | bytes) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = f"{path}.tmp"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_manifest(
    primary_output,
    command: str,
    resolved_config: dict,
    inputs: list,
    outputs: list,
    seed,
    exit_status: int,
    wall_time_s: float,
    config_path=None,
) -> str:
    """Atomically write the run manifest; lists only outputs that exist."""
    path = f"{primary_output}.manifest.json"
    payload = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved_config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs if os.path.exists(p)],
        "seed": seed,
        "exit_status": exit_status,
        "wall_time_s": wall_time_s,
    }
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def loss_history_csv(history) -> str:
    lines = ["phase,epoch,loss_total,loss_ntxent,loss_pro"]
    for h in history:
        nt = repr(h.loss_ntxent) if h.loss_ntxent is not None else ""
        pro = repr(h.loss_pro) if h.loss_pro is not None else ""
        lines.append(f"{h.phase},{h.epoch},{h.loss_total!r},{nt},{pro}")
    return "\n".join(lines) + "\n"


# -- subcommands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    start = time.monotonic()
    seed = args.seed if args.seed is not None else (_fallback_seed() or 0)
    records = synthdata.generate_dataset(
        args.per_class, args.classes, args.size, args.size, seed
    )
    synthdata.write_dataset(args.out, records)
    counts = {s: 0 for s in range(args.classes)}
    for r in records:
        counts[r.severity] += 1
    for severity in sorted(counts):
        print(f"severity {severity}: {counts[severity]} records")
    print(f"wrote {args.out} ({os.path.getsize(args.out)} bytes)")
    write_manifest(
        args.out,
        "generate",
        {
            "classes": args.classes,
            "per_class": args.per_class,
            "size": args.size,
            "seed": seed,
        },
        inputs=[],
        outputs=[args.out],
        seed=seed,
        exit_status=0,
        wall_time_s=time.monotonic() - start,
    )
    return 0


def cmd_train(args) -> int:
    start = time.monotonic()
    cfg = resolve_config(args)
    records = synthdata.read_dataset(args.data)
    ckpt = pipeline.train_full(cfg, records)
    pipeline.save_checkpoint(args.out_checkpoint, ckpt)
    losses_path = f"{args.out_checkpoint}.losses.csv"
    _atomic_write(losses_path, loss_history_csv(ckpt.history))
    final = ckpt.history[-1]
    print(
        f"trained {cfg.phase1_epochs}+{cfg.phase2_epochs} epochs; "
        f"final combined loss {final.loss_total:.6f}"
    )
    print(f"checkpoint: {args.out_checkpoint}")
    print(f"losses: {losses_path}")
    write_manifest(
        args.out_checkpoint,
        "train",
        dataclasses.asdict(cfg),
        inputs=[args.data] + ([args.config] if args.config else []),
        outputs=[args.out_checkpoint, losses_path],
        seed=cfg.seed,
        exit_status=0,
        wall_time_s=time.monotonic() - start,
        config_path=args.config,
    )
    return 0


def cmd_eval(args) -> int:
    start = time.monotonic()
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    records = synthdata.read_dataset(args.data)
    if args.task == "classify":
        report = evalkit.classification_report(ckpt, records)
    elif args.task == "segment":
        report = evalkit.segmentation_report(ckpt, records)
    else:
        report = evalkit.ordering_report(ckpt, records)
    csv_path = f"{args.out}.csv"
    json_path = f"{args.out}.json"
    _atomic_write(csv_path, evalkit.metrics_csv(report, ckpt.config.alpha))
    _atomic_write(json_path, evalkit.report_json(report))
    for name in sorted(report.metrics):
        print(f"{name}={report.metrics[name]!r}")
    write_manifest(
        args.out,
        f"eval:{args.task}",
        dataclasses.asdict(ckpt.config),
        inputs=[args.checkpoint, args.data],
        outputs=[csv_path, json_path],
        seed=ckpt.config.seed,
        exit_status=0,
        wall_time_s=time.monotonic() - start,
    )
    return 0


def cmd_sweep(args) -> int:
    start = time.monotonic()
    cfg = resolve_config(args)
    alphas = parse_alphas(args.alphas)
    records = synthdata.read_dataset(args.data)
    rows = evalkit.alpha_sweep(cfg, alphas, records)
    _atomic_write(args.out, evalkit.sweep_csv(rows))
    for row in rows:
        print(
            f"alpha={row['alpha']:.2f} f1={row['f1_macro']:.4f} "
            f"maee={row['maee']:.4f} recall={row['recall_macro']:.4f}"
        )
    print(f"sweep table: {args.out}")
    write_manifest(
        args.out,
        "sweep",
        {**dataclasses.asdict(cfg), "alphas": alphas},
        inputs=[args.data] + ([args.config] if args.config else []),
        outputs=[args.out],
        seed=cfg.seed,
        exit_status=0,
        wall_time_s=time.monotonic() - start,
        config_path=args.config,
    )
    return 0


def cmd_selfcheck(args) -> int:
    results = selfcheck.run_selfcheck(
        tolerance=args.tolerance, instances=args.instances, perturb=args.perturb
    )
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:32s} max_rel_err={r.max_relative_error:.3e} {status}")
    if failed:
        print(f"FAILED components: {', '.join(r.name for r in failed)}")
        return 1
    print(f"all {len(results)} components passed (tolerance {args.tolerance:g})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semise",
        description="severity representation learning on synthetic ordinal images",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset file")
    p.add_argument("--out", required=True, help="output dataset path (.sevd)")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=400, dest="per_class")
    p.add_argument("--size", type=int, default=32, help="image height = width")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run both training phases")
    p.add_argument("--data", required=True)
    p.add_argument("--out-checkpoint", required=True, dest="out_checkpoint")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="train and score a downstream probe")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=("classify", "segment", "ordering"))
    p.add_argument("--out", required=True, help="output prefix for .csv/.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="full pipeline + classifier probe per alpha")
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", required=True, help="START:STOP:STEP or comma list")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("selfcheck", help="finite-difference check of all gradients")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--perturb", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SemiseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
