"""Command-line entry point.

Every subcommand is deterministic given its flags and input files, never
mutates its inputs, and writes a config echo capturing all resolved
parameters so any result can be reproduced exactly.

Exit codes: 0 success, 1 validation or user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .embeddings import EmbeddingError, read_embeddings
from .harness import (
    HarnessError,
    evaluate,
    load_grid,
    loss_trace_records,
    metric_records,
    prediction_records,
    render_summary,
    run_experiment,
    write_jsonl,
    write_predictions_tsv,
)
from .heads import HeadError, save_checkpoint
from .manifest import (
    NUTRIENT_NAMES,
    EmptyManifest,
    ManifestError,
    Tier,
    aggregate_targets,
    classify_tier,
    distribution_stats,
    load_manifest,
    tier_counts,
)
from .rng import RNG_ALGORITHM, derive_seed
from .sampling import SamplingError, Strategy, build_plan, load_plans, load_score_stream, save_plans
from .synthetic import SyntheticSpec, gen_benchmark

logger = logging.getLogger("nutrivid")

_USER_ERRORS = (ManifestError, EmbeddingError, SamplingError, HeadError, HarnessError,
                FileNotFoundError, NotADirectoryError, ValueError, KeyError,
                json.JSONDecodeError)


def _write_echo(args: argparse.Namespace, out_dir: Path | None) -> None:
    if out_dir is None:
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else v)
                for k, v in vars(args).items() if k != "func"}
    echo = {
        "tool": "nutrivid",
        "version": __version__,
        "rng_algorithm": RNG_ALGORITHM,
        "parameters": resolved,
    }
    path = out_dir / f"{args.command}_config_echo.json"
    path.write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_streams(directory: Path | None, video_ids: set[str], label: str) -> dict | None:
    if directory is None:
        return None
    streams = {}
    for video_id in sorted(video_ids):
        path = directory / f"{video_id}.scores"
        if path.exists():
            streams[video_id] = load_score_stream(path)
    logger.info("loaded %d %s streams from %s", len(streams), label, directory)
    return streams


def _load_store(root: Path, tag: str) -> dict:
    tag_dir = root / tag
    if not tag_dir.is_dir():
        raise HarnessError(f"embedding directory not found: {tag_dir}")
    store = {}
    for path in sorted(tag_dir.glob("*.vnem")):
        seq = read_embeddings(path)
        store[seq.video_id] = seq
    if not store:
        raise HarnessError(f"no .vnem files under {tag_dir}")
    return store


# --- subcommands -------------------------------------------------------------


def cmd_manifest(args: argparse.Namespace) -> int:
    instances = load_manifest(args.path)
    if not instances:
        raise EmptyManifest(f"{args.path}: manifest holds no instances")
    counts = tier_counts(instances)
    print(f"{counts[Tier.ALL]} / {counts[Tier.REGRESSION_READY]} / {counts[Tier.FULLY_COMPLETE]}")
    if args.action == "stats":
        ready = [i for i in instances if classify_tier(i) >= Tier.REGRESSION_READY]
        stats = distribution_stats(ready)
        print(f"instances: {stats.n_instances}  zero-target: {stats.zero_count}")
        print(f"{'nutrient':<12} {'min':>12} {'max':>12} {'mean':>12} {'median':>12}")
        for name in NUTRIENT_NAMES:
            print(f"{name:<12} {getattr(stats.minimum, name):>12.3f} "
                  f"{getattr(stats.maximum, name):>12.3f} {getattr(stats.mean, name):>12.3f} "
                  f"{getattr(stats.median, name):>12.3f}")
    _write_echo(args, args.out_dir)
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec.from_record(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    bench = gen_benchmark(spec, args.out_dir)
    print(f"generated {len(bench.manifest)} instances under {bench.out_dir} "
          f"(backbone_tag {bench.backbone_tag})")
    _write_echo(args, args.out_dir)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    from .sampling import DEFAULT_PRED_ALL_THRESHOLD

    instances = load_manifest(args.manifest)
    strategy = Strategy(args.strategy)
    if strategy is Strategy.PRED_ALL and args.threshold is None:
        args.threshold = DEFAULT_PRED_ALL_THRESHOLD
    video_ids = {i.video_id for i in instances}
    streams = _load_streams(args.scores_dir, video_ids, "selector") or {}
    dish_streams = _load_streams(args.dish_scores_dir, video_ids, "dish selector")

    plans = []
    for inst in instances:
        stream = None
        if strategy in (Strategy.PRED_TOPK, Strategy.PRED_ALL):
            if inst.video_id not in streams:
                raise SamplingError(f"no score stream for video '{inst.video_id}' "
                                    f"(expected under --scores-dir)")
            stream = streams[inst.video_id]
        seed = derive_seed(args.seed, "rand-k", inst.video_id) if strategy is Strategy.RANDOM_K else None
        dish_stream = dish_streams.get(inst.video_id) if dish_streams else None
        plans.append(build_plan(strategy, inst, stream=stream, dish_stream=dish_stream,
                                k=args.k, threshold=args.threshold, seed=seed))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    out_path = args.out_dir / "plans.jsonl"
    save_plans(plans, out_path)
    print(f"wrote {len(plans)} plans to {out_path}")
    _write_echo(args, args.out_dir)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    instances = load_manifest(args.manifest)
    configs = load_grid(args.grid)
    video_ids = {i.video_id for i in instances}
    scores = _load_streams(args.scores_dir, video_ids, "selector")
    dish_scores = _load_streams(args.dish_scores_dir, video_ids, "dish selector")
    stores = {tag: _load_store(args.embeddings_root, tag)
              for tag in sorted({c.backbone_tag for c in configs})}

    result = run_experiment(configs, instances, stores, scores=scores,
                            dish_scores=dish_scores, fold_k=args.fold_k,
                            fold_seed=args.fold_seed, jobs=args.jobs)

    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(metric_records(result), out / "metrics.jsonl")
    write_predictions_tsv(prediction_records(result), out / "predictions.tsv")
    write_jsonl(loss_trace_records(result), out / "loss_traces.jsonl")
    (out / "summary.txt").write_text(render_summary(result), encoding="utf-8")
    folds = {"k": result.fold_assignment.k, "seed": result.fold_assignment.seed,
             "fold_of": result.fold_assignment.fold_of}
    (out / "folds.json").write_text(json.dumps(folds, indent=1, sort_keys=True) + "\n",
                                    encoding="utf-8")
    if args.save_checkpoints:
        for cr in result.results:
            for outcome in cr.folds:
                save_checkpoint(outcome.model,
                                out / "checkpoints" / f"{cr.config.name}__fold{outcome.fold}.ckpt")
    print(render_summary(result), end="")
    _write_echo(args, args.out_dir)
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    instances = load_manifest(args.manifest)
    targets = {i.instance_id: aggregate_targets(i).as_array() for i in instances
               if classify_tier(i) >= Tier.REGRESSION_READY}

    with open(args.predictions, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split("\t")
        rows = [dict(zip(header, line.strip().split("\t"))) for line in fh if line.strip()]
    if not rows:
        raise HarnessError(f"{args.predictions}: no prediction rows")

    grouped: dict[tuple[str, str], list[dict]] = {}
    order: list[tuple[str, str]] = []
    for row in rows:
        key = (row["config"], row["fold"])
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(row)

    records = []
    by_config: dict[str, list[np.ndarray]] = {}
    for config, fold in order:
        preds, trues = [], []
        for row in grouped[(config, fold)]:
            iid = row["instance_id"]
            if iid not in targets:
                raise HarnessError(f"prediction references unknown instance '{iid}'")
            true_row = targets[iid]
            file_true = np.array([float(row[f"{n}_true"]) for n in NUTRIENT_NAMES])
            if not np.allclose(true_row, file_true, atol=1e-9, rtol=0):
                raise HarnessError(
                    f"instance '{iid}': targets in predictions file disagree with manifest")
            preds.append(np.array([float(row[f"{n}_pred"]) for n in NUTRIENT_NAMES]))
            trues.append(true_row)
        report = evaluate(np.stack(preds), np.stack(trues))
        by_config.setdefault(config, []).append(report.mae)
        for j, nutrient in enumerate(NUTRIENT_NAMES):
            records.append({"config": config, "fold": int(fold), "nutrient": nutrient,
                            "mae": float(report.mae[j]), "pearson": report.pearson_r[j],
                            "n": report.n})
    for config, fold_maes in by_config.items():
        mean_mae = np.stack(fold_maes).mean(axis=0)
        for j, nutrient in enumerate(NUTRIENT_NAMES):
            records.append({"config": config, "fold": "mean", "nutrient": nutrient,
                            "mae": float(mean_mae[j]), "pearson": None,
                            "n": sum(len(grouped[(config, f)]) for c, f in order if c == config)})

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(records, args.out_dir / "metrics.jsonl")
    print(f"wrote {len(records)} metric records to {args.out_dir / 'metrics.jsonl'}")
    _write_echo(args, args.out_dir)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    with open(args.metrics, "r", encoding="utf-8") as fh:
        records = [json.loads(line) for line in fh if line.strip()]
    means: dict[str, dict[str, float]] = {}
    order: list[str] = []
    for record in records:
        if record.get("fold") != "mean":
            continue
        config = record["config"]
        if config not in means:
            means[config] = {}
            order.append(config)
        means[config][record["nutrient"]] = record["mae"]
    if not means:
        raise HarnessError(f"{args.metrics}: no fold='mean' records to report")
    header = f"{'config':<44} {'kcal':>10} {'protein_g':>10} {'fat_g':>10} {'carb_g':>10}"
    lines = [header, "-" * len(header)]
    for config in order:
        row = means[config]
        lines.append(f"{config:<44} " + " ".join(f"{row[n]:>10.3f}" for n in NUTRIENT_NAMES))
    table = "\n".join(lines) + "\n"
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / "summary.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    _write_echo(args, args.out_dir)
    return 0


def cmd_eventf1(args: argparse.Namespace) -> int:
    from .sampling import eval_event_f1

    instances = {i.instance_id: i for i in load_manifest(args.manifest)}
    plans = load_plans(args.plans)
    records = []
    for plan in plans:
        if plan.instance_id not in instances:
            raise HarnessError(f"plan references unknown instance '{plan.instance_id}'")
        gt = instances[plan.instance_id].event_timestamps()
        report = eval_event_f1(plan.process_ts, gt, tolerance_s=args.tolerance)
        records.append({"instance_id": plan.instance_id, "n_pred": len(plan.process_ts),
                        "n_gt": len(gt), "n_matched": len(report.matches),
                        "precision": report.precision, "recall": report.recall,
                        "f1": report.f1})
    if not records:
        raise HarnessError("no plans to evaluate")
    macro = {key: sum(r[key] for r in records) / len(records)
             for key in ("precision", "recall", "f1")}
    print(f"instances: {len(records)}  macro precision {macro['precision']:.4f}  "
          f"recall {macro['recall']:.4f}  f1 {macro['f1']:.4f}")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(records + [{"instance_id": "__macro__", **macro}],
                args.out_dir / "eventf1.jsonl")
    _write_echo(args, args.out_dir)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nutrivid",
                                     description="Process-aware nutrition estimation toolkit")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("manifest", help="validate a manifest or print its statistics")
    p.add_argument("action", choices=["validate", "stats"])
    p.add_argument("path", type=Path)
    p.add_argument("--out-dir", type=Path, default=None)
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--spec", type=Path, required=True, help="JSON file of generator settings")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sample", help="produce sampling-plan files for a strategy")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--strategy", required=True, choices=[s.value for s in Strategy])
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--tolerance", type=float, default=1.0,
                   help="recorded for downstream eventf1 runs")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--scores-dir", type=Path, default=None)
    p.add_argument("--dish-scores-dir", type=Path, default=None)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="run a grid of training configurations")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--grid", type=Path, required=True)
    p.add_argument("--embeddings-root", type=Path, required=True,
                   help="directory holding <backbone_tag>/<video_id>.vnem")
    p.add_argument("--scores-dir", type=Path, default=None)
    p.add_argument("--dish-scores-dir", type=Path, default=None)
    p.add_argument("--fold-k", type=int, default=5)
    p.add_argument("--fold-seed", type=int, default=42)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--save-checkpoints", action="store_true")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="recompute metrics from a predictions dump")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a summary table from metric records")
    p.add_argument("--metrics", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eventf1", help="event-detection precision/recall/F1 of a plan file")
    p.add_argument("--plans", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--tolerance", type=float, default=1.0)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_eventf1)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        logger.exception("internal error")
        return 2


if __name__ == "__main__":
    sys.exit(main())
