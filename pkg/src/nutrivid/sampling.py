"""Process-frame sampling strategies and temporal event-detection scoring.

A selector scores sliding 2 s windows at a 1 s stride; sampling turns a
score stream (or ground-truth annotations, or nothing at all) into the
list of process timestamps a model will see. The representative frame
of a window is its temporal center.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .manifest import RecipeInstance
from .rng import SplitMix64


class SamplingError(Exception):
    pass


class EmptyStream(SamplingError):
    pass


class Strategy(Enum):
    GT = "gt"
    PRED_TOPK = "pred-k"
    PRED_ALL = "pred-all"
    RANDOM_K = "rand-k"
    UNIFORM_K = "uni-k"
    DISH_ONLY = "dish-only"


#: Confidence cut for the predicted-all strategy when none is configured.
DEFAULT_PRED_ALL_THRESHOLD = 0.5


#: Grid spacing tolerance when validating stream stride, seconds.
_STRIDE_TOL = 1e-3


@dataclass
class ScoreStream:
    """Per-window selector confidences for one video."""

    video_id: str
    start_ts: np.ndarray
    score: np.ndarray
    clip_len_s: float = 2.0
    stride_s: float = 1.0

    def __post_init__(self):
        self.start_ts = np.asarray(self.start_ts, dtype=np.float64)
        self.score = np.asarray(self.score, dtype=np.float64)
        if self.start_ts.shape != self.score.shape or self.start_ts.ndim != 1:
            raise ValueError("start_ts and score must be 1-D arrays of equal length")
        if len(self.start_ts) > 1:
            gaps = np.diff(self.start_ts)
            if np.any(np.abs(gaps - self.stride_s) > _STRIDE_TOL) or np.any(gaps <= 0):
                raise ValueError(
                    f"stream '{self.video_id}': window starts must increase by "
                    f"{self.stride_s} s (within {_STRIDE_TOL * 1e3:.0f} ms)"
                )
        if len(self.score) and (self.score.min() < 0.0 or self.score.max() > 1.0):
            raise ValueError(f"stream '{self.video_id}': scores must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.start_ts)

    def center_ts(self) -> np.ndarray:
        """Representative frame time of each window (temporal center)."""
        return self.start_ts + self.clip_len_s / 2.0


def save_score_stream(stream: ScoreStream, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{stream.video_id},{float(stream.clip_len_s)!r},{float(stream.stride_s)!r}\n")
        for start, score in zip(stream.start_ts, stream.score):
            fh.write(f"{float(start)!r},{float(score)!r}\n")


def load_score_stream(path: str | Path) -> ScoreStream:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        parts = header.split(",")
        if len(parts) != 3:
            raise SamplingError(f"{path}: bad header '{header}'")
        video_id, clip_len_s, stride_s = parts[0], float(parts[1]), float(parts[2])
        starts, scores = [], []
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                start, score = line.strip().split(",")
                starts.append(float(start))
                scores.append(float(score))
            except ValueError as exc:
                raise SamplingError(f"{path}: bad entry at line {line_no}: '{line.strip()}'") from exc
    return ScoreStream(video_id=video_id, start_ts=np.array(starts), score=np.array(scores),
                       clip_len_s=clip_len_s, stride_s=stride_s)


@dataclass(frozen=True)
class SamplingPlan:
    """Resolved frame choices for one instance under one strategy."""

    instance_id: str
    video_id: str
    strategy: Strategy
    process_ts: tuple[float, ...]
    dish_ts: float
    k: int | None = None
    threshold: float | None = None
    seed: int | None = None

    def __post_init__(self):
        ts = tuple(float(t) for t in self.process_ts)
        object.__setattr__(self, "process_ts", ts)
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"plan '{self.instance_id}': process_ts must be sorted ascending")
        if self.strategy is Strategy.DISH_ONLY and ts:
            raise ValueError(f"plan '{self.instance_id}': dish-only plans carry no process frames")
        if any(t < 0 for t in ts) or self.dish_ts < 0:
            raise ValueError(f"plan '{self.instance_id}': timestamps must be non-negative")


def sample_gt(instance: RecipeInstance) -> SamplingPlan:
    """All annotated add-event timestamps; partial annotation sets pass through."""
    return SamplingPlan(
        instance_id=instance.instance_id,
        video_id=instance.video_id,
        strategy=Strategy.GT,
        process_ts=tuple(instance.event_timestamps()),
        dish_ts=instance.dish_frame_ts,
    )


def sample_pred_topk(stream: ScoreStream, k: int, duration_s: float | None = None) -> list[float]:
    """Representative times of the k highest-scoring windows, sorted.

    Ties break toward earlier windows; streams shorter than k return all
    windows.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(stream) == 0:
        raise EmptyStream(f"stream '{stream.video_id}' has no windows")
    order = np.lexsort((stream.start_ts, -stream.score))
    chosen = order[: min(k, len(stream))]
    centers = stream.center_ts()[chosen]
    if duration_s is not None:
        centers = np.minimum(centers, duration_s)
    return sorted(float(t) for t in centers)


def sample_pred_all(stream: ScoreStream, threshold: float, duration_s: float | None = None) -> list[float]:
    """Representative times of all windows scoring strictly above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    centers = stream.center_ts()[stream.score > threshold]
    if duration_s is not None:
        centers = np.minimum(centers, duration_s)
    return sorted(float(t) for t in centers)


def sample_random(duration_s: float, k: int, seed: int) -> list[float]:
    """k i.i.d. Uniform[0, duration) draws from the pinned generator, sorted."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    gen = SplitMix64(seed)
    return sorted(gen.uniform(0.0, duration_s) for _ in range(k))


def sample_uniform(duration_s: float, k: int) -> list[float]:
    """k frames at equal intervals, bin-center rule: (i + 0.5) * duration / k."""
    if duration_s <= 0:
        raise ValueError(f"duration_s must be > 0, got {duration_s}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return [(i + 0.5) * duration_s / k for i in range(k)]


def select_dish_frame(dish_stream: ScoreStream) -> float:
    """Representative time of the single highest-scoring window (ties: earliest)."""
    if len(dish_stream) == 0:
        raise EmptyStream(f"stream '{dish_stream.video_id}' has no windows")
    return float(dish_stream.center_ts()[int(np.argmax(dish_stream.score))])


def build_plan(
    strategy: Strategy,
    instance: RecipeInstance,
    stream: ScoreStream | None = None,
    dish_stream: ScoreStream | None = None,
    k: int | None = None,
    threshold: float | None = None,
    seed: int | None = None,
) -> SamplingPlan:
    """Assemble the sampling plan for one instance.

    The dish frame comes from the dish-selector stream when given,
    otherwise from the manifest annotation. ``seed`` must already be
    derived per video for the random strategy (see rng.derive_seed).
    """
    dish_ts = select_dish_frame(dish_stream) if dish_stream is not None else instance.dish_frame_ts
    if strategy is Strategy.GT:
        plan = sample_gt(instance)
        return SamplingPlan(plan.instance_id, plan.video_id, plan.strategy, plan.process_ts, dish_ts)
    if strategy is Strategy.DISH_ONLY:
        return SamplingPlan(instance.instance_id, instance.video_id, strategy, (), dish_ts)
    if strategy is Strategy.PRED_TOPK:
        if stream is None or k is None:
            raise SamplingError("pred-k requires a score stream and k")
        ts = sample_pred_topk(stream, k, instance.duration_s)
        return SamplingPlan(instance.instance_id, instance.video_id, strategy, tuple(ts), dish_ts, k=k)
    if strategy is Strategy.PRED_ALL:
        if stream is None:
            raise SamplingError("pred-all requires a score stream")
        if threshold is None:
            threshold = DEFAULT_PRED_ALL_THRESHOLD
        ts = sample_pred_all(stream, threshold, instance.duration_s)
        return SamplingPlan(instance.instance_id, instance.video_id, strategy, tuple(ts), dish_ts,
                            threshold=threshold)
    if strategy is Strategy.RANDOM_K:
        if k is None or seed is None:
            raise SamplingError("rand-k requires k and a seed")
        ts = sample_random(instance.duration_s, k, seed)
        return SamplingPlan(instance.instance_id, instance.video_id, strategy, tuple(ts), dish_ts,
                            k=k, seed=seed)
    if strategy is Strategy.UNIFORM_K:
        if k is None:
            raise SamplingError("uni-k requires k")
        ts = sample_uniform(instance.duration_s, k)
        return SamplingPlan(instance.instance_id, instance.video_id, strategy, tuple(ts), dish_ts, k=k)
    raise SamplingError(f"unknown strategy {strategy}")


def save_plans(plans: Iterable[SamplingPlan], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for plan in plans:
            record = {
                "instance_id": plan.instance_id,
                "video_id": plan.video_id,
                "strategy": plan.strategy.value,
                "process_ts": list(plan.process_ts),
                "dish_ts": plan.dish_ts,
            }
            if plan.k is not None:
                record["k"] = plan.k
            if plan.threshold is not None:
                record["threshold"] = plan.threshold
            if plan.seed is not None:
                record["seed"] = plan.seed
            fh.write(json.dumps(record))
            fh.write("\n")


def load_plans(path: str | Path) -> list[SamplingPlan]:
    plans = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            plans.append(SamplingPlan(
                instance_id=record["instance_id"],
                video_id=record["video_id"],
                strategy=Strategy(record["strategy"]),
                process_ts=tuple(record["process_ts"]),
                dish_ts=record["dish_ts"],
                k=record.get("k"),
                threshold=record.get("threshold"),
                seed=record.get("seed"),
            ))
    return plans


@dataclass(frozen=True)
class EventMatchReport:
    precision: float
    recall: float
    f1: float
    matches: tuple[tuple[int, int], ...]  # (pred index, gt index) pairs


def eval_event_f1(
    predicted_ts: Sequence[float],
    gt_ts: Sequence[float],
    tolerance_s: float = 1.0,
    scores: Sequence[float] | None = None,
) -> EventMatchReport:
    """Greedy one-to-one event matching within a temporal tolerance.

    Predictions are processed in descending score order (list order when
    unscored); each claims its nearest unmatched ground-truth event
    within +-tolerance_s. Greedy matching can fall short of the optimal
    assignment on crowded instances; it never exceeds it.
    """
    if tolerance_s <= 0:
        raise ValueError(f"tolerance_s must be > 0, got {tolerance_s}")
    preds = [float(t) for t in predicted_ts]
    gts = [float(t) for t in gt_ts]
    if scores is not None:
        if len(scores) != len(preds):
            raise ValueError("scores must align with predicted_ts")
        order = sorted(range(len(preds)), key=lambda i: (-scores[i], i))
    else:
        order = list(range(len(preds)))

    unmatched = set(range(len(gts)))
    matches: list[tuple[int, int]] = []
    for pi in order:
        best_gi, best_dist = None, None
        for gi in unmatched:
            dist = abs(preds[pi] - gts[gi])
            if dist <= tolerance_s and (best_dist is None or dist < best_dist
                                        or (dist == best_dist and gi < best_gi)):
                best_gi, best_dist = gi, dist
        if best_gi is not None:
            unmatched.discard(best_gi)
            matches.append((pi, best_gi))
    matches.sort()

    n_match = len(matches)
    if preds:
        precision = n_match / len(preds)
    else:
        precision = 1.0 if not gts else 0.0
    if gts:
        recall = n_match / len(gts)
    else:
        recall = 1.0 if not preds else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return EventMatchReport(precision=precision, recall=recall, f1=f1, matches=tuple(matches))
