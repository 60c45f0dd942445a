import numpy as np
import pytest

from nutrivid.manifest import Ingredient, NutritionVector, RecipeInstance


def _split_integer(total: int, parts: list[int]) -> list[float]:
    assert sum(parts) == total
    return [float(p) for p in parts]


def build_reference_fixture() -> list[RecipeInstance]:
    """An 80-instance manifest shaped like the published benchmark.

    Tier counts 80 / 52 / 22, eleven recipes cooked twice (69 unique),
    four all-zero "water" instances, and per-nutrient maxima of
    4792 kcal / 175 g protein / 329 g fat / 616 g carbohydrate. Values
    are synthetic; only the structure and the extremes are meaningful.
    """
    rng = np.random.default_rng(20240842)
    instances = []

    # integer ingredient splits keep the headline extremes exact in float64
    extremes = {
        0: {"kcal": [2000, 1500, 1292], "protein_g": [60, 40, 20], "fat_g": [100, 80, 60],
            "carb_g": [150, 150, 100]},
        1: {"kcal": [400, 300], "protein_g": [100, 75], "fat_g": [10, 5], "carb_g": [20, 10]},
        2: {"kcal": [1500, 1400], "protein_g": [10, 10], "fat_g": [200, 129], "carb_g": [5, 5]},
        3: {"kcal": [1200, 1100], "protein_g": [30, 20], "fat_g": [20, 10], "carb_g": [300, 316]},
    }

    def random_nutrition(n_ing: int) -> list[NutritionVector]:
        totals = [rng.uniform(50, 3000), rng.uniform(0, 120), rng.uniform(0, 200),
                  rng.uniform(0, 400)]
        shares = rng.dirichlet(np.ones(n_ing), size=4)
        return [NutritionVector(*(totals[c] * shares[c, j] for c in range(4)))
                for j in range(n_ing)]

    for i in range(80):
        if i < 11:
            recipe = f"rec{i:02d}"
        else:
            recipe = f"rec{i - 11:02d}"
        duration = float(rng.uniform(300, 1500))
        dish_ts = duration - 5.0
        n_ing = int(rng.integers(3, 10))

        if i in extremes:
            parts = extremes[i]
            n_ing = len(parts["kcal"])
            nutrition = [NutritionVector(*(parts[c][j] for c in
                                           ("kcal", "protein_g", "fat_g", "carb_g")))
                         for j in range(n_ing)]
        elif 48 <= i < 52:
            n_ing = 1
            nutrition = [NutritionVector(0.0, 0.0, 0.0, 0.0)]
        elif i >= 52:
            nutrition = random_nutrition(n_ing)
        else:
            nutrition = random_nutrition(n_ing)

        events = np.sort(rng.uniform(5.0, dish_ts - 5.0, size=n_ing))
        ingredients = []
        for j in range(n_ing):
            nut = nutrition[j]
            ts = float(events[j])
            if i >= 52 and j == 0:
                nut = None  # breaks regression readiness
            if 22 <= i < 52 and j == n_ing - 1:
                ts = None  # breaks full completeness
            if i >= 52 and j == 1 % n_ing:
                ts = None
            name = "water" if 48 <= i < 52 else f"item{j}"
            ingredients.append(Ingredient(name=name, nutrition=nut, add_event_ts=ts))

        instances.append(RecipeInstance(
            instance_id=f"inst{i:03d}", recipe_id=recipe, video_id=f"vid{i:03d}",
            duration_s=duration, dish_frame_ts=dish_ts, ingredients=tuple(ingredients),
        ))
    return instances


@pytest.fixture(scope="session")
def reference_manifest() -> list[RecipeInstance]:
    return build_reference_fixture()


def make_instance(instance_id="inst000", recipe_id="rec000", video_id="vid000",
                  duration_s=100.0, dish_frame_ts=95.0, ingredients=()):
    return RecipeInstance(instance_id=instance_id, recipe_id=recipe_id, video_id=video_id,
                          duration_s=duration_s, dish_frame_ts=dish_frame_ts,
                          ingredients=tuple(ingredients))
