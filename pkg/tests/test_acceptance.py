"""Acceptance suite: one test per release criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one line per
criterion. Every tolerance and margin is pinned here; the two training
analogs are deterministic end-to-end, so their asserted margins are
exact reproductions of an earlier calibration run, not statistical
bounds.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from nutrivid.cli import main as cli_main
from nutrivid.embeddings import EmbeddingSequence, read_embeddings, write_embeddings
from nutrivid.harness import (
    ExperimentConfig,
    make_folds,
    run_experiment,
    zscore_fit,
)
from nutrivid.heads import (
    PoolMode,
    Variant,
    attention_pool,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    smooth_l1,
)
from nutrivid.manifest import load_manifest, save_manifest
from nutrivid.sampling import (
    ScoreStream,
    eval_event_f1,
    sample_pred_all,
    sample_pred_topk,
    sample_uniform,
)
from nutrivid.synthetic import EVENT_MIN_GAP_S, SyntheticSpec, gen_benchmark, gen_score_stream
from gradcheck import max_relative_error, random_inputs


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")
    assert ok, f"{name}: {detail}"


def load_store(embeddings_dir: Path) -> dict:
    store = {}
    for path in sorted(embeddings_dir.glob("*.vnem")):
        seq = read_embeddings(path)
        store[seq.video_id] = seq
    return store


def test_gradient_correctness():
    """Analytic gradients match central differences on every parameter."""
    t0 = time.time()
    worst = 0.0
    cases = 0
    for variant in Variant:
        for pool_mode in PoolMode:
            for n_bag in (1, 5):
                for seed in (0, 1, 2):
                    model = init_model(variant, 16, seed, pool_mode=pool_mode, d_h=32, a_h=8)
                    rng = np.random.default_rng(1000 + seed)
                    z_d, bag, target = random_inputs(rng, variant, 16, n_bag)
                    worst = max(worst, max_relative_error(model, z_d, bag, target, h=1e-4))
                    cases += 1
    elapsed = time.time() - t0
    report("gradient-correctness",
           worst <= 1e-4 and elapsed < 30.0,
           f"{cases} cases, worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_pooling_invariants():
    """Attention weights behave like a softmax over the bag."""
    t0 = time.time()
    rng = np.random.default_rng(2024)
    ok = True
    for case in range(200):
        dim = int(rng.integers(2, 24))
        n = int(rng.integers(1, 16))
        model = init_model(Variant.CONCAT, dim, seed=case, d_h=16, a_h=8)
        bag = rng.normal(scale=rng.uniform(0.2, 5.0), size=(n, dim))

        pooled, alphas = attention_pool(bag, model.pool, PoolMode.WEIGHTED)
        ok &= alphas.min() >= 0 and abs(alphas.sum() - 1.0) <= 1e-6

        model.pool.layer2.bias += 57.0  # shift every score by a constant
        pooled_shift, alphas_shift = attention_pool(bag, model.pool, PoolMode.WEIGHTED)
        model.pool.layer2.bias -= 57.0
        ok &= np.allclose(alphas, alphas_shift, atol=1e-6)
        ok &= np.allclose(pooled, pooled_shift, atol=1e-6)

        model.pool.layer2.weight[:] = 0.0  # constant scores: weighted equals mean
        w_pooled, _ = attention_pool(bag, model.pool, PoolMode.WEIGHTED)
        m_pooled, _ = attention_pool(bag, model.pool, PoolMode.MEAN)
        ok &= np.allclose(w_pooled, m_pooled, atol=1e-9)

        variant = Variant.GATED if case % 2 else Variant.CONCAT
        fusion = init_model(variant, dim, seed=case + 7,
                            pool_mode=PoolMode.WEIGHTED if case % 3 else PoolMode.MEAN,
                            d_h=16, a_h=8)
        z_d = rng.normal(size=dim)
        perm = rng.permutation(n)
        a, _ = forward(fusion, z_d, bag)
        b, _ = forward(fusion, z_d, bag[perm])
        ok &= np.allclose(a, b, atol=1e-9)
    elapsed = time.time() - t0
    report("pooling-invariants", ok and elapsed < 10.0, f"200 cases, {elapsed:.1f}s")


def test_closed_form_checks():
    gate = float(sigmoid(np.array([0.5]))[0])
    ok = abs(gate - 0.622459) <= 1e-6

    loss_quad, _ = smooth_l1(np.full(4, 0.5), np.zeros(4), beta=1.0)
    loss_lin, _ = smooth_l1(np.full(4, 3.0), np.zeros(4), beta=1.0)
    ok &= abs(loss_quad - 0.125) <= 1e-12 and abs(loss_lin - 2.5) <= 1e-12

    stats = zscore_fit(np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0], [3.0, 0, 0, 0]]))
    ok &= abs(stats.std[0] - 0.8165) <= 1e-4

    ok &= sample_uniform(10.0, 5) == [1.0, 3.0, 5.0, 7.0, 9.0]
    report("closed-form-checks", ok,
           f"sigmoid(0.5)={gate:.6f}, smooth-l1 {loss_quad:.3f}/{loss_lin:.1f}, "
           f"std {stats.std[0]:.4f}")


def test_fold_protocol(tmp_path):
    """52 instances over 48 recipes split 5-fold like the real benchmark."""
    spec = SyntheticSpec(seed=42, n_instances=52, n_recipes=48, vocab_size=10, dim=16,
                         duration_range_s=(80.0, 120.0))
    bench = gen_benchmark(spec, tmp_path / "bench")
    assignment = make_folds(bench.manifest, k=5, seed=42)

    test_sizes = [sum(1 for f in assignment.fold_of.values() if f == fold) for fold in range(5)]
    train_sizes = [52 - s for s in test_sizes]
    sizes_ok = all(9 <= s <= 12 for s in test_sizes) and all(40 <= s <= 43 for s in train_sizes)

    folds_by_recipe = {}
    for inst in bench.manifest:
        folds_by_recipe.setdefault(inst.recipe_id, set()).add(assignment.fold_of[inst.instance_id])
    colocated = all(len(v) == 1 for v in folds_by_recipe.values())

    again = make_folds(bench.manifest, k=5, seed=42)
    blob_a = json.dumps(assignment.fold_of, sort_keys=True).encode()
    blob_b = json.dumps(again.fold_of, sort_keys=True).encode()

    report("fold-protocol", sizes_ok and colocated and blob_a == blob_b,
           f"test sizes {test_sizes}, colocated={colocated}, deterministic={blob_a == blob_b}")


def test_hypothesis_analog(tmp_path):
    """Process frames beat the dish frame when evidence is hidden from it."""
    t0 = time.time()
    from nutrivid.sampling import Strategy

    spec = SyntheticSpec(seed=7, n_instances=60, n_recipes=55, dim=64,
                         hidden_fraction=0.6, noise_sigma=0.1)
    bench = gen_benchmark(spec, tmp_path / "bench")
    stores = {bench.backbone_tag: load_store(bench.embeddings_dir)}
    configs = [
        ExperimentConfig(name="gt", backbone_tag=bench.backbone_tag, variant=Variant.GATED,
                         pool_mode=PoolMode.WEIGHTED, strategy=Strategy.GT, epochs=50, lr=1e-3),
        ExperimentConfig(name="dish", backbone_tag=bench.backbone_tag, variant=Variant.DISH_ONLY,
                         pool_mode=PoolMode.WEIGHTED, strategy=Strategy.DISH_ONLY,
                         epochs=50, lr=1e-3),
    ]
    result = run_experiment(configs, bench.manifest, stores, fold_k=5, fold_seed=42)
    gt_kcal = float(result.results[0].mean_mae()[0])
    dish_kcal = float(result.results[1].mean_mae()[0])
    elapsed = time.time() - t0
    margin = 1.0 - gt_kcal / dish_kcal
    report("hypothesis-analog", margin >= 0.15 and elapsed < 300.0,
           f"GT {gt_kcal:.1f} vs dish-only {dish_kcal:.1f} kcal MAE, "
           f"{100 * margin:.1f}% lower, {elapsed:.0f}s")


def test_sampling_ordering_analog(tmp_path):
    """Selector-driven sampling beats random and uniform at the same budget."""
    t0 = time.time()
    from nutrivid.sampling import Strategy, load_score_stream

    maes = {"pred": [], "rand": [], "uni": []}
    for gen_seed in (7, 8, 9, 10, 11):
        spec = SyntheticSpec(seed=gen_seed, n_instances=60, n_recipes=55, dim=64,
                             hidden_fraction=0.6, noise_sigma=0.1, score_noise=0.3)
        bench = gen_benchmark(spec, tmp_path / f"bench{gen_seed}")
        stores = {bench.backbone_tag: load_store(bench.embeddings_dir)}
        scores = {p.stem: load_score_stream(p) for p in sorted(bench.scores_dir.glob("*.scores"))}
        configs = [
            ExperimentConfig(name="pred20", backbone_tag=bench.backbone_tag, variant=Variant.GATED,
                             pool_mode=PoolMode.WEIGHTED, strategy=Strategy.PRED_TOPK, k=20),
            ExperimentConfig(name="rand20", backbone_tag=bench.backbone_tag, variant=Variant.GATED,
                             pool_mode=PoolMode.WEIGHTED, strategy=Strategy.RANDOM_K, k=20),
            ExperimentConfig(name="uni20", backbone_tag=bench.backbone_tag, variant=Variant.GATED,
                             pool_mode=PoolMode.WEIGHTED, strategy=Strategy.UNIFORM_K, k=20),
        ]
        result = run_experiment(configs, bench.manifest, stores, scores=scores,
                                fold_k=5, fold_seed=42)
        for cr, key in zip(result.results, ("pred", "rand", "uni")):
            maes[key].append(float(cr.mean_mae()[0]))

    mean_pred = float(np.mean(maes["pred"]))
    mean_rand = float(np.mean(maes["rand"]))
    mean_uni = float(np.mean(maes["uni"]))
    elapsed = time.time() - t0
    # margins pinned from the calibration run (10.1% and 11.6% observed)
    ok = mean_pred < 0.95 * mean_rand and mean_pred < 0.95 * mean_uni and elapsed < 900.0
    report("sampling-ordering-analog", ok,
           f"pred {mean_pred:.1f} < rand {mean_rand:.1f} / uni {mean_uni:.1f} kcal MAE, "
           f"{elapsed:.0f}s")


def test_selection_correctness():
    rng = np.random.default_rng(99)
    ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 120))
        scores = rng.uniform(0, 1, size=n)
        stream = ScoreStream("v", np.arange(n, dtype=float), scores)
        k = int(rng.integers(1, 2 * n))
        got = sample_pred_topk(stream, k=k)
        ranked = sorted(zip(-scores, stream.start_ts))[:min(k, n)]
        ok &= got == sorted(start + 1.0 for _, start in ranked)
        thr = float(rng.uniform(0, 1))
        got_all = sample_pred_all(stream, threshold=thr)
        ok &= got_all == sorted(s + 1.0 for s, sc in zip(stream.start_ts, scores) if sc > thr)

    f1_ok = True
    for case in range(50):
        case_rng = np.random.default_rng(5000 + case)
        n = int(case_rng.integers(1, 8))
        events = (np.cumsum(case_rng.uniform(EVENT_MIN_GAP_S, 9.0, size=n)) + 3.0).tolist()
        stream = gen_score_stream(events, events[-1] + 10.0, score_noise=0.0, seed=0)
        picked = sample_pred_topk(stream, k=n)
        f1_ok &= eval_event_f1(picked, events, tolerance_s=1.5).f1 == 1.0

    report("selection-correctness", ok and f1_ok,
           f"1000 stream oracles exact, noise-free F1=1.0 on 50 streams")


def test_round_trips(tmp_path):
    rng = np.random.default_rng(123)
    seq = EmbeddingSequence("vid-rt", rng.normal(size=(40, 32)).astype(np.float32))
    vnem_path = tmp_path / "seq.vnem"
    write_embeddings(seq, vnem_path)
    loaded = read_embeddings(vnem_path)
    vnem_ok = (loaded.data.tobytes() == seq.data.tobytes()
               and loaded.video_id == seq.video_id and loaded.fps == seq.fps)

    from conftest import build_reference_fixture
    manifest = build_reference_fixture()
    manifest_path = tmp_path / "m.jsonl"
    save_manifest(manifest, manifest_path)
    manifest_ok = load_manifest(manifest_path) == manifest

    ckpt_ok = True
    for variant in Variant:
        model = init_model(variant, 32, seed=5, d_h=32, a_h=8)
        path = tmp_path / f"{variant.value}.ckpt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        z_d, bag, _ = random_inputs(rng, variant, 32, n_bag=4)
        a, _ = forward(model, z_d, bag)
        b, _ = forward(restored, z_d, bag)
        ckpt_ok &= a.tobytes() == b.tobytes()

    report("round-trips", vnem_ok and manifest_ok and ckpt_ok,
           f"vnem={vnem_ok}, manifest={manifest_ok}, checkpoint={ckpt_ok}")


def test_pipeline_determinism(tmp_path):
    """synth -> sample -> train -> evaluate twice, byte for byte."""
    spec = {"seed": 31, "n_instances": 12, "n_recipes": 10, "vocab_size": 6, "dim": 8,
            "duration_range_s": [60.0, 80.0], "events_per_instance_range": [2, 4],
            "hidden_fraction": 0.5, "noise_sigma": 0.05, "score_noise": 0.2}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    grid_path = tmp_path / "grid.jsonl"
    grid = [{"name": "pred", "backbone_tag": "synthetic-d8", "variant": "gated",
             "strategy": "pred-k", "k": 4, "epochs": 4, "d_h": 16, "a_h": 4},
            {"name": "dish", "backbone_tag": "synthetic-d8", "variant": "dish-only",
             "strategy": "dish-only", "epochs": 4, "d_h": 16, "a_h": 4}]
    grid_path.write_text("\n".join(json.dumps(g) for g in grid) + "\n")

    def run_pipeline(bench_dir: Path, run_dir: Path, jobs: int) -> dict[str, bytes]:
        assert cli_main(["synth", "--spec", str(spec_path), "--out-dir", str(bench_dir)]) == 0
        assert cli_main(["sample", "--manifest", str(bench_dir / "manifest.jsonl"),
                         "--strategy", "pred-k", "--k", "4",
                         "--scores-dir", str(bench_dir / "scores"),
                         "--out-dir", str(run_dir / "plans")]) == 0
        assert cli_main(["train", "--manifest", str(bench_dir / "manifest.jsonl"),
                         "--grid", str(grid_path),
                         "--embeddings-root", str(bench_dir / "embeddings"),
                         "--scores-dir", str(bench_dir / "scores"),
                         "--fold-k", "3", "--jobs", str(jobs),
                         "--out-dir", str(run_dir / "train")]) == 0
        assert cli_main(["evaluate", "--predictions", str(run_dir / "train" / "predictions.tsv"),
                         "--manifest", str(bench_dir / "manifest.jsonl"),
                         "--out-dir", str(run_dir / "eval")]) == 0
        out = {}
        for root in (bench_dir, run_dir):
            for p in sorted(root.rglob("*")):
                if p.is_file() and "config_echo" not in p.name:
                    out[str(p.relative_to(tmp_path))] = p.read_bytes()
        return out

    first = run_pipeline(tmp_path / "bench", tmp_path / "run", jobs=1)
    second = run_pipeline(tmp_path / "bench", tmp_path / "run", jobs=1)
    rerun_ok = first == second

    # a different job count must not change any result file
    jobs4 = run_pipeline(tmp_path / "bench", tmp_path / "run", jobs=4)
    jobs_ok = jobs4 == first

    report("pipeline-determinism", rerun_ok and jobs_ok,
           f"rerun identical={rerun_ok}, jobs 1 vs 4 identical={jobs_ok}, "
           f"{len(first)} files compared")
