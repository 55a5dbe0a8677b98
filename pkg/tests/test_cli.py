"""CLI contract tests: exit codes, artifact determinism, config validation,
and the full stage-1/2/3 command flow on a miniature geometry."""

import json

import numpy as np
import pytest

from cotr_moe.cli import main
from cotr_moe.config import ConfigError, load_config
from cotr_moe.data import load_jsonl
from cotr_moe.metrics import parse_usage_csv

SMALL_CONFIG = {
    "model": {"vocab_size": 64, "n_layers": 1, "n_heads": 2, "d_llm": 16,
              "mlp_hidden": 32, "max_text_positions": 24},
    "cotr": {"n_query": 4, "d_score": 8, "projector_hidden": 16,
             "scale_dim": "score", "use_self": True, "use_cross": True,
             "use_text": True},
    "vision_experts": [{"n_tokens": 8, "dim": 6}, {"n_tokens": 8, "dim": 10}],
    "mmoe": {"n_experts": 3, "top_k": 1, "rank": 4, "balance_weight": 0.05,
             "router_hidden": 8},
    "training": {"stage1": {"steps": 20, "lr": 0.3, "batch_size": 4},
                 "stage2": {"steps": 40, "lr": 0.3, "batch_size": 4},
                 "stage3": {"steps": 40, "lr": 0.2, "batch_size": 4}},
    "data": {"n_samples": 96, "holdout": 24, "seed": 5},
}


@pytest.fixture(scope="module")
def small_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, small_config_path):
    """Stage 1 -> 2 -> 3 via the CLI; returns the output directory."""
    out = tmp_path_factory.mktemp("trained")
    cfg = ["--config", str(small_config_path), "--out", str(out)]
    assert main(["train", "--stage", "1", *cfg]) == 0
    assert main(["train", "--stage", "2", "--from", str(out / "stage1.ckpt"), *cfg]) == 0
    assert main(["train", "--stage", "3", "--from", str(out / "stage2.ckpt"), *cfg]) == 0
    return out


class TestConfig:
    def test_defaults_validate(self):
        config = load_config(None)
        assert config.raw["mmoe"]["n_experts"] == 3
        assert config.raw["mmoe"]["top_k"] == 1
        assert config.raw["mmoe"]["rank"] == 16
        assert config.raw["mmoe"]["balance_weight"] == 0.05
        assert len(config.digest) == 64

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"model": {"d_lm": 32}}))
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(path)

    def test_digest_changes_with_content(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 7}))
        assert load_config(path).digest != load_config(None).digest

    def test_overrides(self):
        config = load_config(None, seed=9, mode="literal-eq6")
        assert config.seed == 9
        assert config.mode == "literal-eq6"
        assert config.cotr_config().mode == "literal-eq6"

    def test_holdout_bound(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"data": {"n_samples": 10, "holdout": 10, "seed": 0}}))
        with pytest.raises(ConfigError):
            load_config(path)


class TestExitCodes:
    def test_corrupt_config_no_partial_outputs(self, tmp_path):
        bad = tmp_path / "corrupt.json"
        bad.write_text("{not json")
        out = tmp_path / "out"
        code = main(["efficiency", "--config", str(bad), "--out", str(out)])
        assert code == 2
        assert not (out / "efficiency.json").exists()

    def test_unknown_config_key_exit_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"modle": {}}))
        assert main(["efficiency", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_stage2_without_from(self, small_config_path, tmp_path):
        code = main(["train", "--stage", "2", "--config", str(small_config_path),
                     "--out", str(tmp_path)])
        assert code == 2

    def test_missing_checkpoint_exit_3(self, small_config_path, tmp_path):
        data = tmp_path / "d.jsonl"
        data.write_text('{"descriptor": 1, "instruction": [3], "response": [8], "task": "general"}\n')
        code = main(["eval", "--config", str(small_config_path),
                     "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--data", str(data), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_empty_dataset_exit_2_no_output(self, small_config_path, trained, tmp_path):
        data = tmp_path / "empty.jsonl"
        data.write_text("")
        out = tmp_path / "evalout"
        code = main(["eval", "--config", str(small_config_path),
                     "--checkpoint", str(trained / "stage3.ckpt"),
                     "--data", str(data), "--out", str(out)])
        assert code == 2
        assert not (out / "eval.json").exists()

    def test_bad_usage_exit_2(self):
        assert main(["train"]) == 2  # missing required --stage
        assert main(["no-such-command"]) == 2

    def test_bad_threads_env(self, small_config_path, tmp_path, monkeypatch):
        monkeypatch.setenv("COTR_MOE_THREADS", "zero")
        assert main(["efficiency", "--config", str(small_config_path),
                     "--out", str(tmp_path)]) == 0  # efficiency never evaluates
        monkeypatch.setenv("COTR_MOE_THREADS", "0")
        data = tmp_path / "d.jsonl"
        data.write_text('{"descriptor": 1, "instruction": [3], "response": [8], "task": "general"}\n')
        code = main(["eval", "--config", str(small_config_path),
                     "--checkpoint", str(tmp_path / "nope.ckpt"),
                     "--data", str(data), "--out", str(tmp_path / "o")])
        assert code in (2, 3)


class TestSynth:
    def test_writes_corpus(self, small_config_path, tmp_path):
        out = tmp_path / "corpus_out"
        assert main(["synth", "--config", str(small_config_path),
                     "--out", str(out)]) == 0
        samples = load_jsonl(out / "corpus.jsonl")
        assert len(samples) == 96


class TestEfficiency:
    def test_report_records_both_percent_conventions(self, tmp_path):
        out = tmp_path / "eff"
        assert main(["efficiency", "--out", str(out)]) == 0
        report = json.loads((out / "efficiency.json").read_text())
        tokens = report["visual_tokens"]
        assert tokens["reduction_percent"] == 97.78
        assert tokens["reduction_percent_truncated"] == 97.77
        assert abs(tokens["reduction_fraction"] - (1 - 64 / 2880)) < 1e-12
        assert report["prefill_flops"]["reduction_percent"] >= 63.83
        assert report["config_digest"]
        assert report["toy_geometry"]["input_tokens"] == 72

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["efficiency", "--out", str(a)]) == 0
        assert main(["efficiency", "--out", str(b)]) == 0
        assert (a / "efficiency.json").read_bytes() == (b / "efficiency.json").read_bytes()


class TestGradcheckCommand:
    def test_small_config_passes(self, small_config_path, tmp_path):
        out = tmp_path / "gc"
        assert main(["gradcheck", "--config", str(small_config_path),
                     "--out", str(out)]) == 0
        report = json.loads((out / "gradcheck.json").read_text())
        assert report["passed"] is True
        assert all(v < 1e-4 for v in report["groups"].values())

    def test_literal_mode_also_passes(self, small_config_path, tmp_path):
        out = tmp_path / "gc2"
        assert main(["gradcheck", "--config", str(small_config_path),
                     "--mode", "literal-eq6", "--out", str(out)]) == 0


class TestTrainFlow:
    def test_artifacts_exist(self, trained):
        for stage in (1, 2, 3):
            assert (trained / f"stage{stage}.ckpt").exists()
            metrics = json.loads((trained / f"metrics_stage{stage}.json").read_text())
            assert metrics["stage"] == stage
            assert metrics["config_digest"]
            assert len(metrics["steps"]) == SMALL_CONFIG["training"][f"stage{stage}"]["steps"]
            assert "final_evaluation" in metrics

    def test_freeze_report_matches_plan(self, trained):
        expected = {1: ["projector"], 2: ["llm", "projector", "vision"],
                    3: ["cotr", "mmoe", "projector"]}
        for stage, groups in expected.items():
            metrics = json.loads((trained / f"metrics_stage{stage}.json").read_text())
            report = metrics["freeze_report"]
            assert report["enabled_groups"] == groups
            assert set(report["changed_groups"]) <= set(groups)
            assert "projector" in report["changed_groups"]

    def test_balance_recorded_only_in_stage3(self, trained):
        m2 = json.loads((trained / "metrics_stage2.json").read_text())
        m3 = json.loads((trained / "metrics_stage3.json").read_text())
        assert all(row["balance"] == 0.0 for row in m2["steps"])
        assert any(row["balance"] > 0.0 for row in m3["steps"])

    def test_train_determinism(self, small_config_path, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["train", "--stage", "1", "--config", str(small_config_path),
                         "--out", str(out)]) == 0
        assert (a / "stage1.ckpt").read_bytes() == (b / "stage1.ckpt").read_bytes()
        assert (a / "metrics_stage1.json").read_bytes() == (b / "metrics_stage1.json").read_bytes()

    def test_train_with_explicit_data_file(self, small_config_path, trained, tmp_path):
        corpus_out = tmp_path / "c"
        assert main(["synth", "--config", str(small_config_path),
                     "--out", str(corpus_out)]) == 0
        out = tmp_path / "t"
        assert main(["train", "--stage", "1", "--config", str(small_config_path),
                     "--data", str(corpus_out / "corpus.jsonl"),
                     "--out", str(out)]) == 0
        assert (out / "stage1.ckpt").exists()


class TestEvalAndRoutes:
    def test_eval_writes_report(self, small_config_path, trained, tmp_path):
        corpus = tmp_path / "c"
        assert main(["synth", "--config", str(small_config_path),
                     "--out", str(corpus)]) == 0
        out = tmp_path / "e"
        assert main(["eval", "--config", str(small_config_path),
                     "--checkpoint", str(trained / "stage3.ckpt"),
                     "--data", str(corpus / "corpus.jsonl"),
                     "--out", str(out)]) == 0
        report = json.loads((out / "eval.json").read_text())
        assert set(report["results"]["per_task"]) == {
            "general", "knowledge-like", "ocr-like"}
        assert 0.0 <= report["results"]["overall"]["accuracy"] <= 1.0

    def test_routes_csvs_parse_and_normalize(self, small_config_path, trained, tmp_path):
        corpus = tmp_path / "c"
        assert main(["synth", "--config", str(small_config_path),
                     "--out", str(corpus)]) == 0
        out = tmp_path / "r"
        assert main(["routes", "--config", str(small_config_path),
                     "--checkpoint", str(trained / "stage3.ckpt"),
                     "--data", str(corpus / "corpus.jsonl"),
                     "--out", str(out)]) == 0
        manifest = json.loads((out / "routes_manifest.json").read_text())
        assert set(manifest["files"]) == {"general", "knowledge-like", "ocr-like"}
        for name in manifest["files"].values():
            usage = parse_usage_csv(out / name)
            for layer, freqs in usage.items():
                assert abs(freqs.sum() - 1.0) < 2e-6  # k = 1
        assert manifest["max_total_variation"] >= 0.0

    def test_routes_rejects_pre_reduction_checkpoint(self, small_config_path,
                                                     trained, tmp_path):
        corpus = tmp_path / "c"
        assert main(["synth", "--config", str(small_config_path),
                     "--out", str(corpus)]) == 0
        code = main(["routes", "--config", str(small_config_path),
                     "--checkpoint", str(trained / "stage2.ckpt"),
                     "--data", str(corpus / "corpus.jsonl"),
                     "--out", str(tmp_path / "r2")])
        assert code == 2
