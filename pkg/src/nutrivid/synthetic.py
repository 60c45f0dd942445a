"""Synthetic benchmarks with known ground truth.

The generator builds a world where some ingredients are visible in the
final dish and some are not: every latent ingredient owns a fixed random
unit direction in embedding space and a fixed nutrition vector. The
dish-frame embedding sums the directions of non-hidden ingredients only,
while each add-event's frames carry that ingredient's direction, so
process frames hold evidence the dish frame cannot. Targets always sum
over all ingredients; hiding affects embeddings, never labels.

Everything is a pure function of the spec seed, so generated benchmarks
are byte-reproducible.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingSequence, write_embeddings
from .manifest import Ingredient, NutritionVector, RecipeInstance, save_manifest
from .rng import derive_seed
from .sampling import ScoreStream, save_score_stream

#: kcal per gram of protein / fat / carbohydrate.
CALORIE_FACTORS = (4.0, 9.0, 4.0)

#: Minimum spacing between add-events, seconds. Keeps each event's score
#: bump (half-width 1.5 s) the unambiguous local maximum of its own
#: neighborhood, so noise-free top-|events| selection recovers every event.
EVENT_MIN_GAP_S = 4.0

#: Half-width of the triangular score bump around an event, seconds.
BUMP_HALF_WIDTH_S = 1.5


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 7
    n_instances: int = 60
    n_recipes: int = 55
    vocab_size: int = 12
    dim: int = 64
    hidden_fraction: float = 0.5
    noise_sigma: float = 0.1
    duration_range_s: tuple[float, float] = (120.0, 240.0)
    events_per_instance_range: tuple[int, int] = (3, 8)
    score_noise: float = 0.0
    zero_target_fraction: float = 4.0 / 52.0
    fps: float = 1.0
    clip_len_s: float = 2.0
    stride_s: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.hidden_fraction <= 1.0:
            raise ValueError("hidden_fraction must lie in [0, 1]")
        if self.n_recipes > self.n_instances:
            raise ValueError("n_recipes cannot exceed n_instances")
        if self.n_recipes < 1 or self.vocab_size < 1 or self.dim < 1:
            raise ValueError("n_recipes, vocab_size, and dim must be positive")
        if self.score_noise < 0:
            raise ValueError("score_noise must be >= 0")
        lo, hi = self.events_per_instance_range
        if lo < 1 or hi < lo:
            raise ValueError("events_per_instance_range must satisfy 1 <= lo <= hi")
        dur_lo, dur_hi = self.duration_range_s
        needed = 2.0 + 2 * EVENT_MIN_GAP_S + EVENT_MIN_GAP_S * (hi - 1)
        if dur_lo < needed:
            raise ValueError(
                f"duration_range_s[0] must be at least {needed} s to place {hi} "
                f"events {EVENT_MIN_GAP_S} s apart"
            )
        if dur_hi < dur_lo:
            raise ValueError("duration_range_s must be (lo, hi) with lo <= hi")

    @property
    def backbone_tag(self) -> str:
        return f"synthetic-d{self.dim}"

    @staticmethod
    def from_record(record: dict) -> "SyntheticSpec":
        kwargs = dict(record)
        for key in ("duration_range_s", "events_per_instance_range"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return SyntheticSpec(**kwargs)


@dataclass
class SyntheticBenchmark:
    spec: SyntheticSpec
    out_dir: Path
    manifest_path: Path
    embeddings_dir: Path
    scores_dir: Path
    dish_scores_dir: Path
    truth_path: Path
    manifest: list[RecipeInstance]

    @property
    def backbone_tag(self) -> str:
        return self.spec.backbone_tag


def gen_score_stream(event_ts, duration_s: float, score_noise: float, seed: int,
                     clip_len_s: float = 2.0, stride_s: float = 1.0,
                     video_id: str = "synthetic") -> ScoreStream:
    """Simulated selector output over a sliding-window grid.

    Each window scores the max over events of a triangular bump peaking
    at 1.0 at the event time (compact support, so the noise-free case has
    exact zeros away from events), plus clipped additive Gaussian noise.
    """
    n_windows = int(math.floor((duration_s - clip_len_s) / stride_s)) + 1
    if n_windows < 1:
        raise ValueError(f"duration {duration_s} too short for clip length {clip_len_s}")
    starts = np.arange(n_windows, dtype=np.float64) * stride_s
    centers = starts + clip_len_s / 2.0
    events = np.asarray(list(event_ts), dtype=np.float64)
    if events.size:
        if events.min() < 0 or events.max() > duration_s:
            raise ValueError("events must lie within the video duration")
        dist = np.abs(centers[:, None] - events[None, :])
        base = np.clip(1.0 - dist / BUMP_HALF_WIDTH_S, 0.0, None).max(axis=1)
    else:
        base = np.zeros_like(centers)
    if score_noise > 0:
        rng = np.random.default_rng(seed)
        base = base + rng.normal(0.0, score_noise, size=base.shape)
    scores = np.clip(base, 0.0, 1.0)
    return ScoreStream(video_id=video_id, start_ts=starts, score=scores,
                       clip_len_s=clip_len_s, stride_s=stride_s)


def _place_events(rng: np.random.Generator, n: int, lo: float, hi: float) -> list[float]:
    """n times in [lo, hi], pairwise at least EVENT_MIN_GAP_S apart, sorted."""
    span = hi - lo - EVENT_MIN_GAP_S * (n - 1)
    offsets = np.sort(rng.uniform(0.0, span, size=n))
    return [round(float(lo + EVENT_MIN_GAP_S * i + offsets[i]), 3) for i in range(n)]


def gen_benchmark(spec: SyntheticSpec, out_dir: str | Path) -> SyntheticBenchmark:
    """Generate a full benchmark: manifest, VNEM embeddings, score streams.

    A latent vocabulary of ingredients is drawn once (direction, nutrition,
    hidden flag); recipes sample ingredient multisets; repeated cookings of
    a recipe share its ingredients but draw fresh timing and noise. Some
    recipes are all-zero-target "water" preparations to exercise the
    zero-target path. A ground-truth sidecar (test/debug only) records the
    latent parameters.
    """
    out_dir = Path(out_dir)
    embeddings_dir = out_dir / "embeddings" / spec.backbone_tag
    scores_dir = out_dir / "scores"
    dish_scores_dir = out_dir / "dish_scores"
    truth_path = out_dir / "truth" / "latents.json"
    manifest_path = out_dir / "manifest.jsonl"

    rng = np.random.default_rng(spec.seed)

    directions = rng.normal(size=(spec.vocab_size, spec.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    log_lo, log_hi = math.log10(10.0), math.log10(1000.0)
    kcal = 10.0 ** rng.uniform(log_lo, log_hi, size=spec.vocab_size)
    splits = rng.dirichlet(np.ones(3), size=spec.vocab_size)
    vocab_nutrition = [
        NutritionVector(
            kcal=float(kcal[i]),
            protein_g=float(kcal[i] * splits[i, 0] / CALORIE_FACTORS[0]),
            fat_g=float(kcal[i] * splits[i, 1] / CALORIE_FACTORS[1]),
            carb_g=float(kcal[i] * splits[i, 2] / CALORIE_FACTORS[2]),
        )
        for i in range(spec.vocab_size)
    ]
    hidden = rng.random(spec.vocab_size) < spec.hidden_fraction
    water_direction = rng.normal(size=spec.dim)
    water_direction /= np.linalg.norm(water_direction)

    n_doubles = spec.n_instances - spec.n_recipes
    n_zero = int(round(spec.zero_target_fraction * spec.n_instances))
    n_zero = min(n_zero, spec.n_recipes - n_doubles)
    ev_lo, ev_hi = spec.events_per_instance_range

    recipes = []
    for r in range(spec.n_recipes):
        n_ing = int(rng.integers(ev_lo, ev_hi + 1))
        is_water = r >= spec.n_recipes - n_zero
        ingredient_ids = [] if is_water else [int(i) for i in rng.integers(0, spec.vocab_size, n_ing)]
        recipes.append({
            "recipe_id": f"rec{r:03d}",
            "n_ing": n_ing,
            "water": is_water,
            "ingredient_ids": ingredient_ids,
            "copies": 2 if r < n_doubles else 1,
        })

    instances: list[RecipeInstance] = []
    truth_instances = []
    idx = 0
    for recipe in recipes:
        for _ in range(recipe["copies"]):
            instance_id = f"inst{idx:03d}"
            video_id = f"vid{idx:03d}"
            duration = round(float(rng.uniform(*spec.duration_range_s)), 3)
            dish_ts = round(duration - 2.0, 3)
            events = _place_events(rng, recipe["n_ing"], EVENT_MIN_GAP_S,
                                   dish_ts - EVENT_MIN_GAP_S)

            ingredients = []
            for j, ts in enumerate(events):
                if recipe["water"]:
                    ingredients.append(Ingredient(
                        name="water", nutrition=NutritionVector(0.0, 0.0, 0.0, 0.0),
                        add_event_ts=ts))
                else:
                    ing_id = recipe["ingredient_ids"][j]
                    ingredients.append(Ingredient(
                        name=f"ing{ing_id:02d}", nutrition=vocab_nutrition[ing_id],
                        add_event_ts=ts))
            instance = RecipeInstance(
                instance_id=instance_id, recipe_id=recipe["recipe_id"], video_id=video_id,
                duration_s=duration, dish_frame_ts=dish_ts, ingredients=tuple(ingredients),
            )
            instances.append(instance)

            n_frames = int(math.floor(duration * spec.fps))
            data = rng.normal(0.0, spec.noise_sigma, size=(n_frames, spec.dim))
            dish_frame = min(int(math.floor(dish_ts * spec.fps)), n_frames - 1)
            for j, ts in enumerate(events):
                if recipe["water"]:
                    direction = water_direction
                else:
                    direction = directions[recipe["ingredient_ids"][j]]
                frames = {int(math.floor((ts - 0.5) * spec.fps)),
                          int(math.floor((ts + 0.5) * spec.fps))}
                for frame in frames:
                    data[min(max(frame, 0), n_frames - 1)] += direction
                if not recipe["water"] and not hidden[recipe["ingredient_ids"][j]]:
                    data[dish_frame] += direction
                if recipe["water"]:
                    data[dish_frame] += water_direction
            seq = EmbeddingSequence(video_id=video_id, data=data.astype(np.float32),
                                    fps=spec.fps)
            write_embeddings(seq, embeddings_dir / f"{video_id}.vnem")

            stream = gen_score_stream(
                events, duration, spec.score_noise,
                seed=derive_seed(spec.seed, "scores", video_id),
                clip_len_s=spec.clip_len_s, stride_s=spec.stride_s, video_id=video_id)
            save_score_stream(stream, scores_dir / f"{video_id}.scores")
            dish_stream = gen_score_stream(
                [dish_ts], duration, spec.score_noise,
                seed=derive_seed(spec.seed, "dish-scores", video_id),
                clip_len_s=spec.clip_len_s, stride_s=spec.stride_s, video_id=video_id)
            save_score_stream(dish_stream, dish_scores_dir / f"{video_id}.scores")

            truth_instances.append({
                "instance_id": instance_id,
                "recipe_id": recipe["recipe_id"],
                "video_id": video_id,
                "water": recipe["water"],
                "ingredient_ids": recipe["ingredient_ids"],
                "event_ts": events,
                "duration_s": duration,
                "dish_frame_ts": dish_ts,
            })
            idx += 1

    save_manifest(instances, manifest_path)

    truth_path.parent.mkdir(parents=True, exist_ok=True)
    truth = {
        "note": "latent generator state for tests and debugging only; "
                "not an input to any pipeline stage",
        "spec": asdict(spec),
        "vocab": [
            {
                "kcal": vocab_nutrition[i].kcal,
                "protein_g": vocab_nutrition[i].protein_g,
                "fat_g": vocab_nutrition[i].fat_g,
                "carb_g": vocab_nutrition[i].carb_g,
                "hidden": bool(hidden[i]),
                "direction": [float(x) for x in directions[i]],
            }
            for i in range(spec.vocab_size)
        ],
        "water_direction": [float(x) for x in water_direction],
        "instances": truth_instances,
    }
    truth_path.write_text(json.dumps(truth, indent=1), encoding="utf-8")

    (out_dir / "spec_echo.json").write_text(json.dumps(asdict(spec), indent=1), encoding="utf-8")

    return SyntheticBenchmark(
        spec=spec, out_dir=out_dir, manifest_path=manifest_path,
        embeddings_dir=embeddings_dir, scores_dir=scores_dir,
        dish_scores_dir=dish_scores_dir, truth_path=truth_path, manifest=instances,
    )
