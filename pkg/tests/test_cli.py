import json

import pytest

from vql.cli import main
from vql.config import ExperimentConfig, ModelConfig


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    cfg = ExperimentConfig()
    cfg.model = ModelConfig(input_side=32, clip_len=4, channels=16,
                            patch_stride=8, encoder_blocks=0, n_heads=2,
                            ffn_mult=2, spatial_layers=1, temporal_layers=1,
                            window_half=1, downsample_strides=[1],
                            downsample_channels=16, head_width=16,
                            head_blocks=2, anchor_base_sizes=[6, 10],
                            anchor_aspect_ratios=[1.0])
    cfg.train.iterations = 8
    cfg.train.batch_size = 2
    cfg.train.warmup_iters = 2
    cfg.train.log_every = 2
    cfg.train.checkpoint_every = 4
    cfg.validate().save(path)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, tiny_config_file):
    """gen -> train -> infer -> eval once; commands under test share it."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    run = root / "run"
    preds = root / "preds"
    rep = root / "report"
    assert main(["gen", "--out", str(data), "--seed", "5", "--n-videos", "2",
                 "--side", "32", "--frames", "12", "--track-min", "5",
                 "--track-max", "7", "--distractors", "1",
                 "--occluders", "0"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--config", str(tiny_config_file)]) == 0
    assert main(["infer", "--checkpoint", str(run / "ckpt_final"),
                 "--data", str(data), "--out", str(preds)]) == 0
    code_eval = main(["eval", "--predictions", str(preds / "predictions.json"),
                      "--annotations", str(data / "annotations.json"),
                      "--out", str(rep)])
    return {"data": data, "run": run, "preds": preds, "report": rep,
            "eval_code": code_eval}


class TestPipeline:
    def test_gen_artifacts(self, pipeline):
        data = pipeline["data"]
        assert (data / "annotations.json").exists()
        assert (data / "gen_config.json").exists()
        assert (data / "videos" / "vid_0000.bin").exists()
        assert (data / "queries" / "vid_0001.json").exists()

    def test_train_artifacts(self, pipeline):
        run = pipeline["run"]
        assert (run / "config.json").exists()
        assert (run / "train_log.jsonl").exists()
        assert (run / "ckpt_final" / "checkpoint.bin").exists()
        assert (run / "ckpt_000004" / "checkpoint.json").exists()
        manifest = json.loads((run / "ckpt_final" / "checkpoint.json").read_text())
        assert "config" in manifest["extra"]

    def test_infer_artifacts(self, pipeline):
        preds = pipeline["preds"]
        assert (preds / "predictions.json").exists()
        assert (preds / "config.json").exists()  # config echoed
        data = json.loads((preds / "predictions.json").read_text())
        assert len(data["predictions"]) == 2

    def test_eval_artifacts(self, pipeline):
        assert pipeline["eval_code"] == 0
        rep = pipeline["report"]
        report = json.loads((rep / "report.json").read_text())
        assert set(report) == {"tAP25", "stAP25", "recovery_pct",
                               "success_pct", "n_queries"}
        assert (rep / "per_query.csv").exists()

    def test_eval_threshold_failure_exit_2(self, pipeline, tmp_path):
        code = main(["eval", "--predictions",
                     str(pipeline["preds"] / "predictions.json"),
                     "--annotations",
                     str(pipeline["data"] / "annotations.json"),
                     "--out", str(tmp_path / "rep"),
                     "--min-tap25", "1.1"])
        assert code == 2

    def test_infer_workers_match_reference(self, pipeline, tmp_path):
        out2 = tmp_path / "preds2"
        assert main(["infer", "--checkpoint",
                     str(pipeline["run"] / "ckpt_final"),
                     "--data", str(pipeline["data"]),
                     "--out", str(out2), "--workers", "2"]) == 0
        a = json.loads((pipeline["preds"] / "predictions.json").read_text())
        b = json.loads((out2 / "predictions.json").read_text())
        assert a == b

    def test_bench_runs(self, pipeline, capsys):
        assert main(["bench", "--checkpoint",
                     str(pipeline["run"] / "ckpt_final"),
                     "--data", str(pipeline["data"])]) == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["frames"] == 24
        assert out["fps"] > 0


class TestValidationErrors:
    def test_bad_dataset_path_exit_1(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run")]) == 1

    def test_bad_config_key_exit_1(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"not_a_field": 1}}))
        assert main(["train", "--data", str(tmp_path), "--out",
                     str(tmp_path / "r"), "--config", str(bad)]) == 1

    def test_gen_zero_track_exit_1(self, tmp_path):
        assert main(["gen", "--out", str(tmp_path / "d"), "--track-min", "0",
                     "--track-max", "0"]) == 1


class TestGradcheckCommand:
    def test_single_seed_passes(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        assert "0 failures" in capsys.readouterr().out

    def test_deterministic(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        first = capsys.readouterr().out
        assert main(["gradcheck", "--seeds", "1"]) == 0
        second = capsys.readouterr().out
        assert first == second
