"""Operator command line: corpus synthesis, gradient verification, staged
training, evaluation, routing analysis, and the efficiency report.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 I/O error.  All artifacts embed the run-config digest and contain no
timestamps, so identical config+seed reruns are byte-identical.  The
COTR_MOE_THREADS environment variable caps parallel evaluation (default 1).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, gradcheck as gc
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .cotr import SCORE_MODES
from .data import TASKS, load_jsonl, save_jsonl, synthesize
from .metrics import (
    ModelGeometry, export_metrics_json, export_usage_csv, prefill_flops,
    token_reduction_ratio,
)
from .mmoe import UsageRecorder, expert_usage
from .stack import (
    MultimodalModel, StagePlan, build_model, evaluate, load_model_params,
    save_model, train_stage,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


def _threads() -> int:
    raw = os.environ.get("COTR_MOE_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"COTR_MOE_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError("COTR_MOE_THREADS must be >= 1")
    return value


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    return load_config(args.config, seed=args.seed, mode=args.mode)


def _split(config: RunConfig, data_path) -> tuple[list, list]:
    if data_path is not None:
        samples = load_jsonl(data_path)
    else:
        samples = synthesize(config.raw["data"]["n_samples"],
                             config.raw["data"]["seed"])
    holdout = config.raw["data"]["holdout"]
    if len(samples) <= holdout:
        raise ConfigError(
            f"dataset has {len(samples)} samples, needs more than the "
            f"holdout size {holdout}")
    return samples[:-holdout], samples[-holdout:]


def _load_model_for_checkpoint(config: RunConfig, path) -> MultimodalModel:
    from . import checkpoint as ckpt
    header, _ = ckpt.load(path)
    model = build_model(config.stack_config(), stage=int(header["stage"]),
                        seed=config.seed, config_digest=config.digest)
    load_model_params(model, path)
    return model


def cmd_synth(args) -> int:
    config = _load(args)
    out = _out_dir(args)
    samples = synthesize(config.raw["data"]["n_samples"], config.raw["data"]["seed"])
    path = out / "corpus.jsonl"
    save_jsonl(samples, path)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = _load(args)
    out = _out_dir(args)
    reports = {"cotr": gc.cotr_report(config), "mmoe-soft": gc.mmoe_report(config)}
    payload = {"config_digest": config.digest, "epsilon": gc.EPSILON,
               "tolerance": gc.TOLERANCE, "groups": {}, "passed": True}
    for name, report in reports.items():
        for group, worst in sorted(gc.group_summary(report).items()):
            status = "PASS" if worst < gc.TOLERANCE else "FAIL"
            print(f"{status}  {group}: worst_rel={worst:.3e}")
            payload["groups"][group] = worst
        payload["passed"] = payload["passed"] and report.passed
    export_metrics_json(payload, out / "gradcheck.json")
    if not payload["passed"]:
        print("gradient verification FAILED", file=sys.stderr)
        return EXIT_VERIFY
    print(f"gradient verification passed "
          f"(worst {max(payload['groups'].values()):.3e} < {gc.TOLERANCE})")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load(args)
    if args.stage in (2, 3) and args.from_checkpoint is None:
        raise ConfigError(f"--stage {args.stage} requires --from <prior checkpoint>")
    out = _out_dir(args)
    train_split, held = _split(config, args.data)
    model = build_model(config.stack_config(), stage=args.stage,
                        seed=config.seed, config_digest=config.digest)
    if args.from_checkpoint is not None:
        load_model_params(model, args.from_checkpoint)
    before = {name: p.data.copy() for name, p in model.named_parameters().items()}
    schedule = config.stage_schedule(args.stage)
    history = train_stage(model, StagePlan.for_stage(args.stage), train_split,
                          steps=schedule["steps"], lr=schedule["lr"],
                          batch_size=schedule["batch_size"], seed=config.seed)
    changed = sorted({
        name.split("/", 1)[0]
        for name, p in model.named_parameters().items()
        if not np.array_equal(before[name], p.data)
    })
    ckpt_path = out / f"stage{args.stage}.ckpt"
    save_model(model, ckpt_path)
    final_eval = evaluate(model, held, max_len=args.max_len,
                          max_workers=_threads())
    metrics = {
        "config_digest": config.digest,
        "stage": args.stage,
        "schedule": schedule,
        "steps": history.steps,
        "freeze_report": {
            "changed_groups": changed,
            "enabled_groups": sorted(StagePlan.for_stage(args.stage).trainable),
        },
        "final_evaluation": final_eval,
    }
    metrics_path = out / f"metrics_stage{args.stage}.json"
    export_metrics_json(metrics, metrics_path)
    print(f"stage {args.stage}: {len(history.steps)} steps, "
          f"final loss {history.final_loss:.4f}, "
          f"held-out exact match {final_eval['overall']['accuracy']:.3f}")
    print(f"wrote {ckpt_path} and {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _load(args)
    out = _out_dir(args)
    samples = load_jsonl(args.data)
    if not samples:
        raise ConfigError(f"dataset {args.data} is empty")
    model = _load_model_for_checkpoint(config, args.checkpoint)
    results = evaluate(model, samples, max_len=args.max_len,
                       max_workers=_threads())
    payload = {"config_digest": config.digest,
               "checkpoint": str(args.checkpoint), "results": results}
    export_metrics_json(payload, out / "eval.json")
    print(f"exact match {results['overall']['accuracy']:.3f} "
          f"({results['overall']['correct']}/{results['overall']['total']})")
    for task in sorted(results["per_task"]):
        bucket = results["per_task"][task]
        print(f"  {task}: {bucket['accuracy']:.3f} "
              f"({bucket['correct']}/{bucket['total']})")
    print(f"wrote {out / 'eval.json'}")
    return EXIT_OK


def cmd_routes(args) -> int:
    config = _load(args)
    out = _out_dir(args)
    samples = load_jsonl(args.data)
    if not samples:
        raise ConfigError(f"dataset {args.data} is empty")
    model = _load_model_for_checkpoint(config, args.checkpoint)
    if model.stage != 3:
        raise ConfigError("routing analysis needs a stage-3 checkpoint")
    n_experts = config.raw["mmoe"]["n_experts"]
    files = {}
    usage_by_task = {}
    for task in TASKS:
        task_samples = [s for s in samples if s.task == task]
        if not task_samples:
            continue
        recorder = UsageRecorder(n_experts)
        evaluate(model, task_samples, max_len=args.max_len, recorder=recorder,
                 max_workers=_threads())
        usage = expert_usage(recorder)
        path = out / f"routes_{task}.csv"
        export_usage_csv(usage, path)
        files[task] = path.name
        usage_by_task[task] = usage
        print(f"wrote {path}")
    if not files:
        raise ConfigError("dataset contains none of the known task tags")
    manifest = {"config_digest": config.digest,
                "checkpoint": str(args.checkpoint), "files": files,
                "max_total_variation": _max_tv(usage_by_task)}
    export_metrics_json(manifest, out / "routes_manifest.json")
    print(f"wrote {out / 'routes_manifest.json'}")
    return EXIT_OK


def _max_tv(usage_by_task: dict[str, dict[int, np.ndarray]]) -> float:
    tasks = sorted(usage_by_task)
    worst = 0.0
    for i in range(len(tasks)):
        for j in range(i + 1, len(tasks)):
            a, b = usage_by_task[tasks[i]], usage_by_task[tasks[j]]
            for layer in set(a) & set(b):
                worst = max(worst, 0.5 * float(np.abs(a[layer] - b[layer]).sum()))
    return worst


def cmd_efficiency(args) -> int:
    config = _load(args)
    out = _out_dir(args)
    eff = config.raw["efficiency"]
    geo = eff["geometry"]
    fraction = token_reduction_ratio(eff["reduced_visual_tokens"],
                                     eff["baseline_visual_tokens"])
    percent = fraction * 100.0

    def geometry(n_visual: int) -> ModelGeometry:
        return ModelGeometry(n_layers=geo["n_layers"], d_model=geo["d_model"],
                             mlp_hidden=geo["mlp_hidden"], n_heads=geo["n_heads"],
                             vocab_size=geo["vocab_size"],
                             n_visual_tokens=n_visual,
                             n_text_tokens=eff["text_tokens"])

    base = prefill_flops(geometry(eff["baseline_visual_tokens"]))
    reduced = prefill_flops(geometry(eff["reduced_visual_tokens"]))
    flops_fraction = 1.0 - reduced.total / base.total
    toy = config.cotr_config()
    payload = {
        "config_digest": config.digest,
        "visual_tokens": {
            "baseline": eff["baseline_visual_tokens"],
            "reduced": eff["reduced_visual_tokens"],
            "reduction_fraction": fraction,
            "reduction_percent": round(percent, 2),
            "reduction_percent_truncated": int(percent * 100) / 100.0,
        },
        "prefill_flops": {
            "baseline": base.as_dict(),
            "reduced": reduced.as_dict(),
            "reduction_fraction": flops_fraction,
            "reduction_percent": round(flops_fraction * 100.0, 2),
        },
        "toy_geometry": {
            "input_tokens": sum(e.n_tokens for e in toy.experts),
            "consolidated_tokens": toy.n_query,
            "reduction_fraction": token_reduction_ratio(
                toy.n_query, sum(e.n_tokens for e in toy.experts)),
        },
    }
    export_metrics_json(payload, out / "efficiency.json")
    print(f"visual tokens {eff['baseline_visual_tokens']} -> "
          f"{eff['reduced_visual_tokens']}: "
          f"{payload['visual_tokens']['reduction_percent']:.2f}% reduction "
          f"(truncated: {payload['visual_tokens']['reduction_percent_truncated']:.2f}%)")
    print(f"prefill FLOPs {base.total:.3e} -> {reduced.total:.3e}: "
          f"{payload['prefill_flops']['reduction_percent']:.2f}% reduction")
    print(f"wrote {out / 'efficiency.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotr-moe",
        description="Token reduction + mixture-of-LoRA-experts toy stack")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None,
                       help="JSON run config (defaults used when omitted)")
        p.add_argument("--out", type=Path, default=Path("out"),
                       help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--mode", choices=list(SCORE_MODES), default=None,
                       help="override the attention-weight normalization mode")

    p = sub.add_parser("synth", help="write the synthetic JSONL corpus")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--from", dest="from_checkpoint", type=Path, default=None,
                   help="prior-stage checkpoint (required for stages 2 and 3)")
    p.add_argument("--data", type=Path, default=None,
                   help="JSONL corpus (synthesized from config when omitted)")
    p.add_argument("--max-len", type=int, default=3,
                   help="generation budget for the held-out evaluation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy exact-match evaluation")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=3)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("routes", help="export per-task expert-usage CSVs")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=3)
    p.set_defaults(func=cmd_routes)

    p = sub.add_parser("efficiency", help="token and FLOPs reduction report")
    common(p)
    p.set_defaults(func=cmd_efficiency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
