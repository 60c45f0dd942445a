"""Benchmark data model: recipe instances, nutrition targets, tiers, stats.

A manifest is a list of recipe instances, each one complete cooking
session with its ingredient list. Ingredients may carry a nutrition
vector and an add-event timestamp; which labels are present determines
the instance's tier. On disk a manifest is UTF-8 JSON Lines, one
instance per line (diff-friendly, streaming-validatable).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUTRIENT_NAMES = ("kcal", "protein_g", "fat_g", "carb_g")


class ManifestError(Exception):
    """Base class for manifest data errors."""


class ParseError(ManifestError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field '{field}'")
        suffix = f" ({', '.join(loc)})" if loc else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.field = field


class DuplicateInstanceId(ManifestError):
    pass


class MissingNutrition(ManifestError):
    pass


class EmptyManifest(ManifestError):
    pass


def _round_ms(seconds: float) -> float:
    """Timestamps are kept at millisecond precision throughout."""
    return round(float(seconds), 3)


@dataclass(frozen=True)
class NutritionVector:
    """Dish-level targets, fixed component order [kcal, protein, fat, carb]."""

    kcal: float
    protein_g: float
    fat_g: float
    carb_g: float

    def __post_init__(self):
        for name in NUTRIENT_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value):
                raise ValueError(f"nutrition component {name} is not finite: {value}")
            if value < 0:
                raise ValueError(f"nutrition component {name} is negative: {value}")

    def as_array(self) -> np.ndarray:
        return np.array([self.kcal, self.protein_g, self.fat_g, self.carb_g], dtype=np.float64)

    def is_zero(self) -> bool:
        return self.kcal == 0.0 and self.protein_g == 0.0 and self.fat_g == 0.0 and self.carb_g == 0.0

    @staticmethod
    def from_array(values: Sequence[float]) -> "NutritionVector":
        if len(values) != 4:
            raise ValueError(f"expected 4 components, got {len(values)}")
        return NutritionVector(float(values[0]), float(values[1]), float(values[2]), float(values[3]))


@dataclass(frozen=True)
class Ingredient:
    name: str
    nutrition: NutritionVector | None = None
    add_event_ts: float | None = None

    def __post_init__(self):
        if self.add_event_ts is not None:
            object.__setattr__(self, "add_event_ts", _round_ms(self.add_event_ts))
            if self.add_event_ts < 0:
                raise ValueError(f"ingredient '{self.name}': add_event_ts is negative")


@dataclass(frozen=True)
class RecipeInstance:
    """One complete cooking session.

    ``recipe_id`` is shared across repeated cookings of the same recipe
    and drives fold co-location. Timestamps are seconds from video
    start, quantized to milliseconds.
    """

    instance_id: str
    recipe_id: str
    video_id: str
    duration_s: float
    dish_frame_ts: float
    ingredients: tuple[Ingredient, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "duration_s", _round_ms(self.duration_s))
        object.__setattr__(self, "dish_frame_ts", _round_ms(self.dish_frame_ts))
        object.__setattr__(self, "ingredients", tuple(self.ingredients))
        if self.duration_s <= 0:
            raise ValueError(f"instance '{self.instance_id}': duration_s must be > 0")
        if not 0 <= self.dish_frame_ts <= self.duration_s:
            raise ValueError(
                f"instance '{self.instance_id}': dish_frame_ts {self.dish_frame_ts} "
                f"outside [0, {self.duration_s}]"
            )
        for ing in self.ingredients:
            if ing.add_event_ts is not None and ing.add_event_ts > self.duration_s:
                raise ValueError(
                    f"instance '{self.instance_id}': add_event_ts {ing.add_event_ts} of "
                    f"'{ing.name}' exceeds duration {self.duration_s}"
                )

    def event_timestamps(self) -> list[float]:
        """All present add-event timestamps, sorted ascending."""
        return sorted(i.add_event_ts for i in self.ingredients if i.add_event_ts is not None)


class Tier(IntEnum):
    """Nested label-completeness tiers; higher value means more complete."""

    ALL = 0
    REGRESSION_READY = 1
    FULLY_COMPLETE = 2


def classify_tier(instance: RecipeInstance) -> Tier:
    has_nutrition = all(i.nutrition is not None for i in instance.ingredients)
    has_events = all(i.add_event_ts is not None for i in instance.ingredients)
    if has_nutrition and has_events:
        return Tier.FULLY_COMPLETE
    if has_nutrition:
        return Tier.REGRESSION_READY
    return Tier.ALL


def tier_counts(instances: Sequence[RecipeInstance]) -> dict[Tier, int]:
    """Cumulative counts per tier (each tier is a subset of the one above)."""
    tiers = [classify_tier(i) for i in instances]
    return {
        Tier.ALL: len(tiers),
        Tier.REGRESSION_READY: sum(t >= Tier.REGRESSION_READY for t in tiers),
        Tier.FULLY_COMPLETE: sum(t >= Tier.FULLY_COMPLETE for t in tiers),
    }


def aggregate_targets(instance: RecipeInstance) -> NutritionVector:
    """Dish-level target: component-wise sum over the ingredient list.

    Zero-ingredient (or all-zero) instances yield the zero vector; such
    instances are legitimate benchmark members (water, tea).
    """
    total = np.zeros(4, dtype=np.float64)
    for ing in instance.ingredients:
        if ing.nutrition is None:
            raise MissingNutrition(
                f"instance '{instance.instance_id}': ingredient '{ing.name}' has no nutrition"
            )
        total += ing.nutrition.as_array()
    return NutritionVector.from_array(total)


@dataclass(frozen=True)
class DistributionStats:
    """Per-nutrient summary over a manifest's aggregate targets."""

    minimum: NutritionVector
    maximum: NutritionVector
    mean: NutritionVector
    median: NutritionVector
    zero_count: int
    n_instances: int


def distribution_stats(instances: Sequence[RecipeInstance]) -> DistributionStats:
    """Summary statistics over aggregate targets.

    All instances must be regression-ready. ``zero_count`` counts
    instances whose entire target vector is zero (the reason MAE is
    preferred over percentage errors on this data).
    """
    if not instances:
        raise EmptyManifest("cannot compute statistics over an empty manifest")
    targets = np.stack([aggregate_targets(i).as_array() for i in instances])
    zero_count = int(np.sum(np.all(targets == 0.0, axis=1)))
    return DistributionStats(
        minimum=NutritionVector.from_array(targets.min(axis=0)),
        maximum=NutritionVector.from_array(targets.max(axis=0)),
        mean=NutritionVector.from_array(targets.mean(axis=0)),
        median=NutritionVector.from_array(np.median(targets, axis=0)),
        zero_count=zero_count,
        n_instances=len(instances),
    )


def instance_warnings(instance: RecipeInstance) -> list[str]:
    """Soft validation: conditions flagged but not rejected.

    Annotations in the wild may place the dish frame before the last
    add-event, so ordering is a warning rather than an error.
    """
    warnings = []
    events = instance.event_timestamps()
    if events and instance.dish_frame_ts < events[-1]:
        warnings.append(
            f"instance '{instance.instance_id}': dish_frame_ts {instance.dish_frame_ts} "
            f"precedes last add-event at {events[-1]}"
        )
    return warnings


# --- JSON Lines persistence -------------------------------------------------


def _ingredient_to_record(ing: Ingredient) -> dict:
    record: dict = {"name": ing.name}
    if ing.nutrition is not None:
        for field in NUTRIENT_NAMES:
            record[field] = getattr(ing.nutrition, field)
    if ing.add_event_ts is not None:
        record["add_event_ts"] = ing.add_event_ts
    return record


def _ingredient_from_record(record: dict, line: int) -> Ingredient:
    if "name" not in record:
        raise ParseError("ingredient missing name", line=line, field="name")
    present = [f for f in NUTRIENT_NAMES if f in record]
    if present and len(present) != len(NUTRIENT_NAMES):
        missing = sorted(set(NUTRIENT_NAMES) - set(present))
        raise ParseError(
            f"ingredient '{record['name']}' has partial nutrition (missing {missing}); "
            "nutrition requires all four components",
            line=line,
            field="nutrition",
        )
    nutrition = None
    if present:
        try:
            nutrition = NutritionVector(*(float(record[f]) for f in NUTRIENT_NAMES))
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc), line=line, field="nutrition") from exc
    ts = record.get("add_event_ts")
    try:
        return Ingredient(name=str(record["name"]), nutrition=nutrition,
                          add_event_ts=None if ts is None else float(ts))
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), line=line, field="add_event_ts") from exc


_REQUIRED_FIELDS = ("instance_id", "recipe_id", "video_id", "duration_s", "dish_frame_ts", "ingredients")


def _instance_from_record(record: dict, line: int) -> RecipeInstance:
    for field in _REQUIRED_FIELDS:
        if field not in record:
            raise ParseError("missing required field", line=line, field=field)
    if not isinstance(record["ingredients"], list):
        raise ParseError("ingredients must be a list", line=line, field="ingredients")
    ingredients = tuple(_ingredient_from_record(r, line) for r in record["ingredients"])
    try:
        return RecipeInstance(
            instance_id=str(record["instance_id"]),
            recipe_id=str(record["recipe_id"]),
            video_id=str(record["video_id"]),
            duration_s=float(record["duration_s"]),
            dish_frame_ts=float(record["dish_frame_ts"]),
            ingredients=ingredients,
        )
    except (TypeError, ValueError) as exc:
        raise ParseError(str(exc), line=line) from exc


def save_manifest(instances: Iterable[RecipeInstance], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for inst in instances:
            record = {
                "instance_id": inst.instance_id,
                "recipe_id": inst.recipe_id,
                "video_id": inst.video_id,
                "duration_s": inst.duration_s,
                "dish_frame_ts": inst.dish_frame_ts,
                "ingredients": [_ingredient_to_record(i) for i in inst.ingredients],
            }
            fh.write(json.dumps(record, ensure_ascii=False))
            fh.write("\n")


def load_manifest(path: str | Path) -> list[RecipeInstance]:
    """Load and validate a JSON Lines manifest.

    Hard violations raise; ordering anomalies are logged as warnings.
    """
    path = Path(path)
    instances: list[RecipeInstance] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=line_no) from exc
            if not isinstance(record, dict):
                raise ParseError("record is not an object", line=line_no)
            inst = _instance_from_record(record, line_no)
            if inst.instance_id in seen:
                raise DuplicateInstanceId(
                    f"duplicate instance_id '{inst.instance_id}' (line {line_no})"
                )
            seen.add(inst.instance_id)
            for warning in instance_warnings(inst):
                logger.warning(warning)
            instances.append(inst)
    return instances
