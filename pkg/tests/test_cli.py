from __future__ import annotations

import json

import pytest

from mmreason.cli import main
from mmreason.imaging import SceneSpec, ShapeSpec, save_png, synth_scene


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    code = main(["--seed", "1", "datagen", "--out", str(corpus),
                 "--caption", "2", "--coreference", "2", "--comparison", "2",
                 "--reason", "2", "--general", "4"])
    assert code == 0
    plan = root / "plan.json"
    plan.write_text(json.dumps({
        "stages": [
            {"stage_id": 1, "lr": 1e-3, "steps": 4},
            {"stage_id": 2, "lr": 1e-4, "steps": 2, "mix": [1, 1]},
        ]
    }))
    run = root / "run"
    code = main(["--seed", "1", "train", "--corpus", str(corpus),
                 "--general", str(corpus / "general"), "--plan", str(plan),
                 "--out", str(run), "--layers", "2", "--dim", "16",
                 "--heads", "2", "--batch-size", "2", "--log-every", "0"])
    assert code == 0
    return root, corpus, run


class TestCliFlow:
    def test_train_outputs(self, workspace):
        root, corpus, run = workspace
        assert (run / "model.ckpt").exists()
        assert (run / "trace_stage1.csv").exists()
        assert (run / "trace_stage2.csv").exists()

    def test_infer_writes_transcript(self, workspace, capsys):
        root, corpus, run = workspace
        img_path = root / "scene.png"
        image, _ = synth_scene(SceneSpec(32, 32, (ShapeSpec("square", "red", 4, 4, 12),)))
        save_png(image, img_path)
        out = root / "transcript.json"
        code = main(["infer", "--checkpoint", str(run / "model.ckpt"),
                     "--image", str(img_path), "--question", "describe image 0.",
                     "--budget", "24", "--memory-group", "1", "--out", str(out)])
        assert code == 0
        doc = json.loads(out.read_text())
        assert set(doc) >= {"chain", "answer", "trigger_events", "step_times_ms",
                            "diagnostics", "truncated"}

    def test_evaluate_runs(self, workspace, capsys):
        root, corpus, run = workspace
        code = main(["--seed", "2", "evaluate", "--checkpoint", str(run / "model.ckpt"),
                     "--family", "counting", "--count", "2", "--budget", "16",
                     "--memory-group", "0"])
        assert code == 0
        assert "accuracy" in capsys.readouterr().out

    def test_ablate_and_report(self, workspace, capsys):
        root, corpus, run = workspace
        out = root / "ablation"
        code = main(["--seed", "3", "ablate", "--checkpoint", str(run / "model.ckpt"),
                     "--groups", "0,1", "--repeats", "1", "--count", "1",
                     "--budget", "16", "--out", str(out)])
        assert code == 0
        report_csv = out / "ablation.csv"
        assert report_csv.exists()
        code = main(["report", "--inputs", str(report_csv)])
        assert code == 0
        assert "latency_ms" in capsys.readouterr().out


class TestConfigFile:
    def test_config_fills_defaults_but_flags_win(self, workspace, tmp_path, capsys):
        root, corpus, run = workspace
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"count": 3, "budget": 12, "memory-group": 0}))
        code = main(["--config", str(cfg), "evaluate",
                     "--checkpoint", str(run / "model.ckpt"),
                     "--family", "counting", "--count", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "over 2 instances" in out       # explicit flag kept
        assert "memory group 0" in out         # config filled the default

    def test_unknown_config_key_is_usage_error(self, workspace, tmp_path, capsys):
        root, corpus, run = workspace
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"frobnicate": 1}))
        assert main(["--config", str(cfg), "evaluate",
                     "--checkpoint", str(run / "model.ckpt"),
                     "--family", "counting"]) == 1


class TestExitCodes:
    def test_usage_error_is_one(self, capsys):
        assert main(["datagen"]) == 1  # missing --out
        assert main(["no-such-command"]) == 1

    def test_data_error_is_two(self, tmp_path, capsys):
        assert main(["infer", "--checkpoint", str(tmp_path / "missing.ckpt"),
                     "--image", "x.png", "--question", "hi"]) == 2

    def test_infer_without_images_is_usage_error(self, workspace, capsys):
        root, corpus, run = workspace
        assert main(["infer", "--checkpoint", str(run / "model.ckpt"),
                     "--question", "hi"]) == 1

    def test_divergence_is_three(self, workspace, tmp_path, capsys):
        root, corpus, run = workspace
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps({
            "stages": [{"stage_id": 1, "lr": 1000.0, "steps": 150}]
        }))
        code = main(["train", "--corpus", str(corpus), "--plan", str(plan),
                     "--out", str(tmp_path / "run"), "--layers", "2", "--dim", "16",
                     "--heads", "2", "--batch-size", "2", "--log-every", "0"])
        assert code == 3
