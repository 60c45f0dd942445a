"""Cross-validation harness: folds, normalization, training, metrics, grids.

Folds are recipe-disjoint and calorie-stratified: recipe groups are
ordered by total calorie target, shuffled within consecutive blocks of k
groups, and dealt round-robin, which spreads the heavy right tail across
folds while keeping repeated cookings together. Targets are z-scored per
fold with training-set statistics only; predictions are denormalized
before metrics.

Training is full batch: with at most a few dozen training instances per
fold, one averaged gradient step per epoch removes batch-size and
ordering as hidden hyper-parameters. The final-epoch model is evaluated;
there is no early stopping.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .embeddings import EmbeddingSequence, frame_index_at, slice_at
from .heads import (
    FusionModel,
    PoolMode,
    Variant,
    adam_step,
    backward,
    forward,
    init_adam,
    init_model,
    smooth_l1,
)
from .manifest import NUTRIENT_NAMES, RecipeInstance, Tier, aggregate_targets, classify_tier
from .rng import derive_seed
from .sampling import DEFAULT_PRED_ALL_THRESHOLD, SamplingPlan, ScoreStream, Strategy, build_plan

logger = logging.getLogger(__name__)


class HarnessError(Exception):
    pass


class TooFewRecipes(HarnessError):
    pass


class MissingEmbeddings(HarnessError):
    pass


class LengthMismatch(HarnessError):
    pass


# --- fold assignment ---------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    fold_of: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        return [iid for iid, f in self.fold_of.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [iid for iid, f in self.fold_of.items() if f != fold]


def make_folds(instances: Sequence[RecipeInstance], k: int = 5, seed: int = 42) -> FoldAssignment:
    """Recipe-disjoint, calorie-stratified fold assignment.

    Deterministic for fixed (instances, k, seed); instances sharing a
    recipe_id always share a fold.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    groups: dict[str, list[RecipeInstance]] = {}
    for inst in instances:
        groups.setdefault(inst.recipe_id, []).append(inst)
    if len(groups) < k:
        raise TooFewRecipes(f"need at least {k} distinct recipes, found {len(groups)}")

    totals = {rid: sum(aggregate_targets(i).kcal for i in members)
              for rid, members in groups.items()}
    ordered = sorted(groups, key=lambda rid: (-totals[rid], rid))

    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    for block_start in range(0, len(ordered), k):
        block = ordered[block_start:block_start + k]
        perm = rng.permutation(len(block))
        for position, j in enumerate(perm):
            for inst in groups[block[j]]:
                fold_of[inst.instance_id] = position
    return FoldAssignment(k=k, seed=seed, fold_of=fold_of)


# --- target normalization ------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray


#: Components with (population) std below this are treated as constant and
#: floored to 1.0, which maps them to exactly zero in normalized space.
_STD_FLOOR_EPS = 1e-12


def zscore_fit(targets: np.ndarray) -> NormStats:
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] < 2:
        raise ValueError("zscore_fit needs at least 2 target rows")
    mean = targets.mean(axis=0)
    std = targets.std(axis=0)
    std = np.where(std < _STD_FLOOR_EPS, 1.0, std)
    return NormStats(mean=mean, std=std)


def zscore_apply(targets: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(targets, dtype=np.float64) - stats.mean) / stats.std


def zscore_invert(normalized: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(normalized, dtype=np.float64) * stats.std + stats.mean


# --- metrics -------------------------------------------------------------------


def pearson(x: np.ndarray, y: np.ndarray) -> float | None:
    """Pearson correlation; None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sqrt((dx * dx).sum()))
    sy = float(np.sqrt((dy * dy).sum()))
    if sx == 0.0 or sy == 0.0:
        return None
    return float((dx * dy).sum() / (sx * sy))


@dataclass(frozen=True)
class MetricsReport:
    """Per-nutrient MAE and Pearson r over one prediction set."""

    mae: np.ndarray                      # (4,)
    pearson_r: tuple[float | None, ...]  # per nutrient; None when undefined
    n: int


def evaluate(preds: np.ndarray, targets: np.ndarray) -> MetricsReport:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[1] != 4:
        raise LengthMismatch(f"preds {preds.shape} vs targets {targets.shape}")
    if preds.shape[0] < 1:
        raise LengthMismatch("need at least one prediction")
    mae = np.abs(preds - targets).mean(axis=0)
    r = tuple(pearson(preds[:, j], targets[:, j]) for j in range(4))
    return MetricsReport(mae=mae, pearson_r=r, n=preds.shape[0])


# --- experiment configuration ----------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    backbone_tag: str
    variant: Variant
    pool_mode: PoolMode = PoolMode.WEIGHTED
    strategy: Strategy = Strategy.GT
    k: int | None = None
    threshold: float | None = None
    lr: float = 1e-3
    epochs: int = 50
    beta: float = 1.0
    seed: int = 42
    d_h: int = 512
    a_h: int = 128
    dropout_p: float = 0.3

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "backbone_tag": self.backbone_tag,
            "variant": self.variant.value,
            "pool_mode": self.pool_mode.value,
            "strategy": self.strategy.value,
            "k": self.k,
            "threshold": self.threshold,
            "lr": self.lr,
            "epochs": self.epochs,
            "beta": self.beta,
            "seed": self.seed,
            "d_h": self.d_h,
            "a_h": self.a_h,
            "dropout_p": self.dropout_p,
        }

    @staticmethod
    def from_record(record: dict) -> "ExperimentConfig":
        record = dict(record)
        variant = Variant(record.pop("variant"))
        pool_mode = PoolMode(record.pop("pool_mode", PoolMode.WEIGHTED.value))
        strategy = Strategy(record.pop("strategy", Strategy.GT.value))
        if strategy is Strategy.PRED_ALL and record.get("threshold") is None:
            record["threshold"] = DEFAULT_PRED_ALL_THRESHOLD
        if "name" not in record:
            parts = [record["backbone_tag"], variant.value, pool_mode.value, strategy.value]
            if record.get("k") is not None:
                parts.append(str(record["k"]))
            record["name"] = "_".join(parts)
        return ExperimentConfig(variant=variant, pool_mode=pool_mode, strategy=strategy, **record)


def load_grid(path) -> list[ExperimentConfig]:
    configs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                configs.append(ExperimentConfig.from_record(json.loads(line)))
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise HarnessError(f"grid contains duplicate config names: {dupes}")
    return configs


def save_grid(configs: Sequence[ExperimentConfig], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for config in configs:
            fh.write(json.dumps(config.to_record()))
            fh.write("\n")


def build_plans_for_config(
    config: ExperimentConfig,
    instances: Sequence[RecipeInstance],
    scores: Mapping[str, ScoreStream] | None = None,
    dish_scores: Mapping[str, ScoreStream] | None = None,
) -> dict[str, SamplingPlan]:
    """Sampling plan per instance for one configuration.

    Random-K seeds derive from (config seed, video id), so plans are
    reproducible and independent across videos.
    """
    plans = {}
    for inst in instances:
        stream = None
        if config.strategy in (Strategy.PRED_TOPK, Strategy.PRED_ALL):
            if scores is None or inst.video_id not in scores:
                raise HarnessError(
                    f"strategy {config.strategy.value} needs a score stream for "
                    f"video '{inst.video_id}'"
                )
            stream = scores[inst.video_id]
        dish_stream = dish_scores.get(inst.video_id) if dish_scores else None
        seed = None
        if config.strategy is Strategy.RANDOM_K:
            seed = derive_seed(config.seed, "rand-k", inst.video_id)
        plans[inst.instance_id] = build_plan(
            config.strategy, inst, stream=stream, dish_stream=dish_stream,
            k=config.k, threshold=config.threshold, seed=seed,
        )
    return plans


# --- training ---------------------------------------------------------------------


def _instance_features(
    instance: RecipeInstance,
    plan: SamplingPlan,
    embeddings: Mapping[str, EmbeddingSequence],
) -> tuple[np.ndarray, np.ndarray | None]:
    if instance.video_id not in embeddings:
        raise MissingEmbeddings(
            f"no embeddings for video '{instance.video_id}' (instance '{instance.instance_id}')"
        )
    seq = embeddings[instance.video_id]
    z_d = seq.data[frame_index_at(seq, plan.dish_ts)].astype(np.float64)
    bag = None
    if plan.process_ts:
        bag = slice_at(seq, plan.process_ts).astype(np.float64)
    return z_d, bag


@dataclass
class TrainedFold:
    model: FusionModel
    loss_trace: list[float]
    norm: NormStats
    train_ids: list[str]
    skipped_train_ids: list[str]


def train_fold(
    config: ExperimentConfig,
    fold: int,
    assignment: FoldAssignment,
    instances: Sequence[RecipeInstance],
    embeddings: Mapping[str, EmbeddingSequence],
    plans: Mapping[str, SamplingPlan],
) -> TrainedFold:
    """Train one model on a fold's training split.

    One averaged gradient step per epoch over all usable training
    instances. Instances with an empty process bag are skipped (with a
    warning) unless the variant is dish-only, which never reads the bag.
    Dropout streams derive from (config seed, fold, epoch).
    """
    train_instances = [
        inst for inst in instances
        if inst.instance_id in assignment.fold_of and assignment.fold_of[inst.instance_id] != fold
    ]

    usable: list[tuple[str, np.ndarray, np.ndarray | None, np.ndarray]] = []
    skipped: list[str] = []
    for inst in train_instances:
        plan = plans[inst.instance_id]
        z_d, bag = _instance_features(inst, plan, embeddings)
        if config.variant is not Variant.DISH_ONLY and bag is None:
            logger.warning(
                "config '%s' fold %d: skipping instance '%s' (empty process bag)",
                config.name, fold, inst.instance_id)
            skipped.append(inst.instance_id)
            continue
        usable.append((inst.instance_id, z_d, bag, aggregate_targets(inst).as_array()))
    if len(usable) < 2:
        raise HarnessError(f"config '{config.name}' fold {fold}: fewer than 2 trainable instances")

    norm = zscore_fit(np.stack([row[3] for row in usable]))
    normalized = {iid: zscore_apply(target, norm) for iid, _, _, target in usable}

    model = init_model(config.variant, dim=usable[0][1].shape[0],
                       seed=derive_seed(config.seed, "init", fold),
                       pool_mode=config.pool_mode, d_h=config.d_h, a_h=config.a_h,
                       dropout_p=config.dropout_p)
    params = model.parameters()
    optimizer = init_adam(params, lr=config.lr)

    trace: list[float] = []
    n = len(usable)
    grad_sum = [np.zeros_like(p) for p in params]
    for epoch in range(config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "dropout", fold, epoch))
        for acc in grad_sum:
            acc.fill(0.0)
        loss_sum = 0.0
        for iid, z_d, bag, _ in usable:
            pred, cache = forward(model, z_d, bag, train_mode=True, rng=rng)
            loss, dpred = smooth_l1(pred, normalized[iid], beta=config.beta)
            backward(model, cache, dpred, out=grad_sum)
            loss_sum += loss
        for acc in grad_sum:
            acc /= n
        trace.append(loss_sum / n)
        adam_step(params, grad_sum, optimizer)

    return TrainedFold(model=model, loss_trace=trace, norm=norm,
                       train_ids=[row[0] for row in usable], skipped_train_ids=skipped)


@dataclass
class PredictionRow:
    instance_id: str
    pred: np.ndarray    # denormalized (4,)
    target: np.ndarray  # (4,)


def predict_fold(
    model: FusionModel,
    norm: NormStats,
    test_instances: Sequence[RecipeInstance],
    embeddings: Mapping[str, EmbeddingSequence],
    plans: Mapping[str, SamplingPlan],
    variant: Variant,
) -> tuple[list[PredictionRow], list[str]]:
    rows: list[PredictionRow] = []
    skipped: list[str] = []
    for inst in test_instances:
        plan = plans[inst.instance_id]
        z_d, bag = _instance_features(inst, plan, embeddings)
        if variant is not Variant.DISH_ONLY and bag is None:
            logger.warning("skipping test instance '%s' (empty process bag)", inst.instance_id)
            skipped.append(inst.instance_id)
            continue
        pred, _ = forward(model, z_d, bag, train_mode=False)
        rows.append(PredictionRow(
            instance_id=inst.instance_id,
            pred=zscore_invert(pred, norm),
            target=aggregate_targets(inst).as_array(),
        ))
    return rows, skipped


# --- grid execution ------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    metrics: MetricsReport
    predictions: list[PredictionRow]
    loss_trace: list[float]
    model: FusionModel
    norm: NormStats


@dataclass
class ConfigResult:
    config: ExperimentConfig
    folds: list[FoldOutcome]

    def mean_mae(self) -> np.ndarray:
        """Mean of per-fold MAEs (the headline aggregation)."""
        return np.stack([f.metrics.mae for f in self.folds]).mean(axis=0)

    def pooled_metrics(self) -> MetricsReport:
        """Metrics over all test predictions pooled across folds."""
        preds = np.stack([row.pred for f in self.folds for row in f.predictions])
        targets = np.stack([row.target for f in self.folds for row in f.predictions])
        return evaluate(preds, targets)

    def mean_pearson(self) -> tuple[float | None, ...]:
        """Per-nutrient mean of fold Pearson values, absent folds excluded."""
        out: list[float | None] = []
        for j in range(4):
            values = [f.metrics.pearson_r[j] for f in self.folds
                      if f.metrics.pearson_r[j] is not None]
            out.append(sum(values) / len(values) if values else None)
        return tuple(out)


@dataclass
class ExperimentResult:
    results: list[ConfigResult]
    fold_assignment: FoldAssignment


def _run_one_fold(
    config: ExperimentConfig,
    fold: int,
    assignment: FoldAssignment,
    instances: Sequence[RecipeInstance],
    embeddings: Mapping[str, EmbeddingSequence],
    plans: Mapping[str, SamplingPlan],
) -> FoldOutcome:
    trained = train_fold(config, fold, assignment, instances, embeddings, plans)
    test_instances = [inst for inst in instances
                      if assignment.fold_of.get(inst.instance_id) == fold]
    rows, _ = predict_fold(trained.model, trained.norm, test_instances, embeddings,
                           plans, config.variant)
    if not rows:
        raise HarnessError(f"config '{config.name}' fold {fold}: no evaluable test instances")
    metrics = evaluate(np.stack([r.pred for r in rows]), np.stack([r.target for r in rows]))
    return FoldOutcome(fold=fold, metrics=metrics, predictions=rows,
                       loss_trace=trained.loss_trace, model=trained.model, norm=trained.norm)


def run_experiment(
    configs: Sequence[ExperimentConfig],
    instances: Sequence[RecipeInstance],
    stores: Mapping[str, Mapping[str, EmbeddingSequence]],
    scores: Mapping[str, ScoreStream] | None = None,
    dish_scores: Mapping[str, ScoreStream] | None = None,
    fold_k: int = 5,
    fold_seed: int = 42,
    jobs: int = 1,
) -> ExperimentResult:
    """Run every config over every fold.

    ``stores`` maps backbone_tag to {video_id: EmbeddingSequence}. Folds
    and configs are independent tasks; results are assembled in config
    declaration order, so the output is identical for any job count.
    """
    usable = [i for i in instances if classify_tier(i) >= Tier.REGRESSION_READY]
    if len(usable) < len(instances):
        logger.info("excluding %d instances without complete nutrition labels",
                    len(instances) - len(usable))
    assignment = make_folds(usable, k=fold_k, seed=fold_seed)

    plans_per_config: list[dict[str, SamplingPlan]] = []
    for config in configs:
        if config.backbone_tag not in stores:
            raise HarnessError(f"config '{config.name}': no embedding store for "
                               f"backbone_tag '{config.backbone_tag}'")
        plans_per_config.append(build_plans_for_config(config, usable, scores, dish_scores))

    tasks = [(ci, fold) for ci in range(len(configs)) for fold in range(fold_k)]

    def run_task(task: tuple[int, int]) -> tuple[tuple[int, int], FoldOutcome]:
        ci, fold = task
        config = configs[ci]
        try:
            outcome = _run_one_fold(config, fold, assignment, usable,
                                    stores[config.backbone_tag], plans_per_config[ci])
        except HarnessError:
            raise
        except Exception as exc:
            raise HarnessError(f"config '{config.name}' fold {fold}: {exc}") from exc
        return task, outcome

    outcomes: dict[tuple[int, int], FoldOutcome] = {}
    if jobs <= 1:
        for task in tasks:
            key, outcome = run_task(task)
            outcomes[key] = outcome
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for key, outcome in pool.map(run_task, tasks):
                outcomes[key] = outcome

    results = [
        ConfigResult(config=configs[ci], folds=[outcomes[(ci, f)] for f in range(fold_k)])
        for ci in range(len(configs))
    ]
    return ExperimentResult(results=results, fold_assignment=assignment)


# --- result emission --------------------------------------------------------------------


def metric_records(result: ExperimentResult) -> list[dict]:
    """Line-delimited metric rows: one per (config, fold-or-aggregate, nutrient)."""
    records = []
    for cr in result.results:
        base = {
            "config": cr.config.name,
            "backbone_tag": cr.config.backbone_tag,
            "variant": cr.config.variant.value,
            "pool_mode": cr.config.pool_mode.value,
            "strategy": cr.config.strategy.value,
            "k": cr.config.k,
            "threshold": cr.config.threshold,
        }
        for outcome in cr.folds:
            for j, nutrient in enumerate(NUTRIENT_NAMES):
                records.append({**base, "fold": outcome.fold, "nutrient": nutrient,
                                "mae": float(outcome.metrics.mae[j]),
                                "pearson": outcome.metrics.pearson_r[j],
                                "n": outcome.metrics.n})
        mean_mae = cr.mean_mae()
        mean_r = cr.mean_pearson()
        pooled = cr.pooled_metrics()
        for j, nutrient in enumerate(NUTRIENT_NAMES):
            records.append({**base, "fold": "mean", "nutrient": nutrient,
                            "mae": float(mean_mae[j]), "pearson": mean_r[j],
                            "n": pooled.n})
            records.append({**base, "fold": "pooled", "nutrient": nutrient,
                            "mae": float(pooled.mae[j]), "pearson": pooled.pearson_r[j],
                            "n": pooled.n})
    return records


def prediction_records(result: ExperimentResult) -> list[dict]:
    records = []
    for cr in result.results:
        for outcome in cr.folds:
            for row in outcome.predictions:
                record = {"config": cr.config.name, "fold": outcome.fold,
                          "instance_id": row.instance_id}
                for j, nutrient in enumerate(NUTRIENT_NAMES):
                    record[f"{nutrient}_pred"] = float(row.pred[j])
                    record[f"{nutrient}_true"] = float(row.target[j])
                records.append(record)
    return records


def loss_trace_records(result: ExperimentResult) -> list[dict]:
    return [
        {"config": cr.config.name, "fold": outcome.fold, "epoch": epoch, "loss": loss}
        for cr in result.results
        for outcome in cr.folds
        for epoch, loss in enumerate(outcome.loss_trace)
    ]


def render_summary(result: ExperimentResult) -> str:
    """Human-readable table: one row per config, mean-over-folds MAE per nutrient."""
    header = f"{'config':<44} {'kcal':>10} {'protein_g':>10} {'fat_g':>10} {'carb_g':>10}"
    lines = [header, "-" * len(header)]
    for cr in result.results:
        mae = cr.mean_mae()
        lines.append(f"{cr.config.name:<44} {mae[0]:>10.3f} {mae[1]:>10.3f} "
                     f"{mae[2]:>10.3f} {mae[3]:>10.3f}")
    return "\n".join(lines) + "\n"


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record))
            fh.write("\n")


def write_predictions_tsv(records: Sequence[dict], path) -> None:
    if not records:
        raise ValueError("no prediction records to write")
    columns = list(records[0].keys())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(columns) + "\n")
        for record in records:
            fh.write("\t".join(_format_cell(record[c]) for c in columns) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
