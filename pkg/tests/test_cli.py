import json
from pathlib import Path

import numpy as np
import pytest

from nutrivid.cli import main
from nutrivid.harness import (
    ExperimentConfig,
    build_plans_for_config,
    metric_records,
    run_experiment,
    save_grid,
)
from nutrivid.heads import Variant
from nutrivid.embeddings import read_embeddings
from nutrivid.manifest import save_manifest
from nutrivid.sampling import Strategy, load_plans, load_score_stream
from nutrivid.synthetic import SyntheticSpec, gen_benchmark
from conftest import build_reference_fixture

SMALL_SPEC = {
    "seed": 21, "n_instances": 12, "n_recipes": 10, "vocab_size": 6, "dim": 8,
    "duration_range_s": [60.0, 80.0], "events_per_instance_range": [2, 4],
    "hidden_fraction": 0.5, "noise_sigma": 0.05, "score_noise": 0.1,
}


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    spec = SyntheticSpec.from_record(SMALL_SPEC)
    gen_benchmark(spec, out)
    return out


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


class TestManifestCommand:
    def test_validate_reference_counts(self, tmp_path, capsys):
        path = tmp_path / "ref.jsonl"
        save_manifest(build_reference_fixture(), path)
        assert run_cli("manifest", "validate", path) == 0
        assert capsys.readouterr().out.strip() == "80 / 52 / 22"

    def test_empty_file_fails(self, tmp_path, capsys):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert run_cli("manifest", "validate", path) == 1
        assert "no instances" in capsys.readouterr().err

    def test_malformed_record_cites_line(self, tmp_path, capsys):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"instance_id": "x"}\n')
        assert run_cli("manifest", "validate", path) == 1
        assert "line 1" in capsys.readouterr().err

    def test_stats_matches_module(self, bench_dir, capsys):
        assert run_cli("manifest", "stats", bench_dir / "manifest.jsonl") == 0
        out = capsys.readouterr().out
        from nutrivid.manifest import distribution_stats, load_manifest
        stats = distribution_stats(load_manifest(bench_dir / "manifest.jsonl"))
        assert f"zero-target: {stats.zero_count}" in out
        assert f"{stats.maximum.kcal:.3f}" in out


class TestSampleCommand:
    def test_uniform_plan_values(self, tmp_path, capsys):
        from nutrivid.manifest import Ingredient, NutritionVector, RecipeInstance
        inst = RecipeInstance("i0", "r0", "v0", duration_s=10.0, dish_frame_ts=9.0,
                              ingredients=(Ingredient("a", NutritionVector(1, 0, 0, 0), 2.0),))
        manifest_path = tmp_path / "m.jsonl"
        save_manifest([inst], manifest_path)
        out = tmp_path / "out"
        assert run_cli("sample", "--manifest", manifest_path, "--strategy", "uni-k",
                       "--k", 5, "--out-dir", out) == 0
        plans = load_plans(out / "plans.jsonl")
        assert list(plans[0].process_ts) == [1.0, 3.0, 5.0, 7.0, 9.0]
        assert (out / "sample_config_echo.json").exists()

    def test_pred_k_uses_score_streams(self, bench_dir, tmp_path):
        out = tmp_path / "plans"
        assert run_cli("sample", "--manifest", bench_dir / "manifest.jsonl",
                       "--strategy", "pred-k", "--k", 3,
                       "--scores-dir", bench_dir / "scores", "--out-dir", out) == 0
        plans = load_plans(out / "plans.jsonl")
        assert all(len(p.process_ts) == 3 for p in plans)

    def test_pred_k_without_scores_fails(self, bench_dir, tmp_path):
        assert run_cli("sample", "--manifest", bench_dir / "manifest.jsonl",
                       "--strategy", "pred-k", "--k", 3,
                       "--out-dir", tmp_path / "x") == 1

    def test_dish_scores_override(self, bench_dir, tmp_path):
        out = tmp_path / "plans"
        assert run_cli("sample", "--manifest", bench_dir / "manifest.jsonl",
                       "--strategy", "dish-only",
                       "--dish-scores-dir", bench_dir / "dish_scores",
                       "--out-dir", out) == 0
        plans = load_plans(out / "plans.jsonl")
        from nutrivid.manifest import load_manifest
        from nutrivid.sampling import select_dish_frame
        manifest = {i.instance_id: i for i in load_manifest(bench_dir / "manifest.jsonl")}
        for plan in plans:
            stream = load_score_stream(bench_dir / "dish_scores" / f"{plan.video_id}.scores")
            assert plan.dish_ts == select_dish_frame(stream)
            assert abs(plan.dish_ts - manifest[plan.instance_id].dish_frame_ts) <= 1.5


def write_grid(path: Path):
    configs = [
        ExperimentConfig(name="gt-gated", backbone_tag="synthetic-d8", variant=Variant.GATED,
                         strategy=Strategy.GT, epochs=4, d_h=16, a_h=4),
        ExperimentConfig(name="dish", backbone_tag="synthetic-d8", variant=Variant.DISH_ONLY,
                         strategy=Strategy.DISH_ONLY, epochs=4, d_h=16, a_h=4),
    ]
    save_grid(configs, path)
    return configs


class TestTrainEvaluateReport:
    def test_full_pipeline_matches_in_process(self, bench_dir, tmp_path, capsys):
        grid_path = tmp_path / "grid.jsonl"
        configs = write_grid(grid_path)
        out = tmp_path / "run"
        assert run_cli("train", "--manifest", bench_dir / "manifest.jsonl",
                       "--grid", grid_path, "--embeddings-root", bench_dir / "embeddings",
                       "--scores-dir", bench_dir / "scores",
                       "--fold-k", 3, "--out-dir", out, "--save-checkpoints") == 0
        capsys.readouterr()

        # in-process oracle over the same modules
        from nutrivid.manifest import load_manifest
        instances = load_manifest(bench_dir / "manifest.jsonl")
        store = {}
        for p in sorted((bench_dir / "embeddings" / "synthetic-d8").glob("*.vnem")):
            seq = read_embeddings(p)
            store[seq.video_id] = seq
        scores = {p.stem: load_score_stream(p)
                  for p in sorted((bench_dir / "scores").glob("*.scores"))}
        result = run_experiment(configs, instances, {"synthetic-d8": store},
                                scores=scores, fold_k=3)
        expected = metric_records(result)

        written = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
        assert written == expected

        # checkpoints were saved for each (config, fold)
        assert len(list((out / "checkpoints").glob("*.ckpt"))) == 6

        # evaluate recomputes the same per-fold MAEs from the dump
        eval_out = tmp_path / "eval"
        assert run_cli("evaluate", "--predictions", out / "predictions.tsv",
                       "--manifest", bench_dir / "manifest.jsonl", "--out-dir", eval_out) == 0
        evaluated = [json.loads(line) for line in
                     (eval_out / "metrics.jsonl").read_text().splitlines()]
        exp_by_key = {(r["config"], str(r["fold"]), r["nutrient"]): r["mae"] for r in expected}
        for r in evaluated:
            if r["fold"] == "mean":
                continue
            assert r["mae"] == pytest.approx(exp_by_key[(r["config"], str(r["fold"]), r["nutrient"])],
                                             rel=1e-12)

        # report renders a row per config
        report_out = tmp_path / "report"
        assert run_cli("report", "--metrics", out / "metrics.jsonl",
                       "--out-dir", report_out) == 0
        table = (report_out / "summary.txt").read_text()
        assert "gt-gated" in table and "dish" in table

    def test_train_rerun_byte_identical(self, bench_dir, tmp_path):
        grid_path = tmp_path / "grid.jsonl"
        write_grid(grid_path)
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert run_cli("train", "--manifest", bench_dir / "manifest.jsonl",
                           "--grid", grid_path, "--embeddings-root", bench_dir / "embeddings",
                           "--scores-dir", bench_dir / "scores",
                           "--fold-k", 3, "--out-dir", out) == 0
            outs.append(out)
        for name in ("metrics.jsonl", "predictions.tsv", "summary.txt",
                     "loss_traces.jsonl", "folds.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


class TestEventF1Command:
    def test_gt_plans_score_perfectly(self, bench_dir, tmp_path, capsys):
        plans_out = tmp_path / "plans"
        assert run_cli("sample", "--manifest", bench_dir / "manifest.jsonl",
                       "--strategy", "gt", "--out-dir", plans_out) == 0
        out = tmp_path / "f1"
        assert run_cli("eventf1", "--plans", plans_out / "plans.jsonl",
                       "--manifest", bench_dir / "manifest.jsonl",
                       "--tolerance", 0.5, "--out-dir", out) == 0
        assert "f1 1.0000" in capsys.readouterr().out
        records = [json.loads(line) for line in (out / "eventf1.jsonl").read_text().splitlines()]
        assert records[-1]["instance_id"] == "__macro__"

    def test_pred_plans_report_quality(self, bench_dir, tmp_path, capsys):
        plans_out = tmp_path / "plans"
        assert run_cli("sample", "--manifest", bench_dir / "manifest.jsonl",
                       "--strategy", "pred-k", "--k", 4,
                       "--scores-dir", bench_dir / "scores", "--out-dir", plans_out) == 0
        out = tmp_path / "f1"
        assert run_cli("eventf1", "--plans", plans_out / "plans.jsonl",
                       "--manifest", bench_dir / "manifest.jsonl",
                       "--tolerance", 1.5, "--out-dir", out) == 0
        macro = json.loads((out / "eventf1.jsonl").read_text().splitlines()[-1])
        assert 0.0 <= macro["f1"] <= 1.0


class TestEchoAndExitCodes:
    def test_echo_written_for_synth(self, tmp_path):
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(SMALL_SPEC))
        out = tmp_path / "out"
        assert run_cli("synth", "--spec", spec_path, "--out-dir", out) == 0
        echo = json.loads((out / "synth_config_echo.json").read_text())
        assert echo["parameters"]["spec"] == str(spec_path)
        assert echo["rng_algorithm"] == "splitmix64/v1"

    def test_missing_file_is_user_error(self, tmp_path):
        assert run_cli("manifest", "validate", tmp_path / "nope.jsonl") == 1
