import json

import pytest

from gen3r.cli import main
from gen3r.io import read_json

from conftest import tiny_config


@pytest.fixture
def cfg_file(tiny_run, tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny_run.values))
    return path


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["generate", "--mode", "3-view", "--out", "x"]) == 1
    assert main(["train"]) == 1


def test_unknown_stage_is_usage_error(cfg_file):
    assert main(["train", "--config", str(cfg_file), "--stage", "vae"]) == 1


def test_missing_prerequisite_exits_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.values))
    assert main(["synth-data", "--out", str(cfg.data_root), "--count", "3", "--resolution", "128", "--frames", "5"]) == 0
    assert main(["train", "--config", str(path), "--stage", "surrogate"]) == 0
    capsys.readouterr()
    assert main(["train", "--config", str(path), "--stage", "adapter"]) == 2
    assert "needs stage 'prior'" in capsys.readouterr().err


def test_train_reports_cached(cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--stage", "all"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 7 and all("\tcached\t" in l for l in lines)


def test_set_override_takes_effect(cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--set", "codec.steps=9", "--stage", "codec"]) == 2
    assert "--force" in capsys.readouterr().err


def test_generate_evaluate_plots(cfg_file, tiny_run, tmp_path, capsys):
    out = tmp_path / "gen"
    assert main(["generate", "--config", str(cfg_file), "--split", "train", "--out", str(out), "--mode", "2-view",
                 "--with-cameras", "--seed", "1"]) == 0
    scenes = sorted(p.name for p in out.iterdir())
    assert scenes == ["scene_0000", "scene_0001", "scene_0002"]
    prov = read_json(out / "scene_0000" / "provenance.json")
    assert prov["mode"] == "first+last" and prov["seed"] == 1 and prov["config_hash"] == tiny_run.hash

    assert main(["evaluate", "--pred", str(out), "--gt", str(tiny_run.data_root), "--sample-k", "64"]) == 0
    report = read_json(out / "report.json")
    assert len(report["rows"]) == 3 and report["config_hash"] == tiny_run.hash
    assert (out / "report.csv").exists()

    rec = tmp_path / "rec"
    assert main(["reconstruct", "--config", str(cfg_file), "--scene", "scene_0001", "--out", str(rec)]) == 0
    assert main(["evaluate", "--pred", str(rec), "--gt", str(tiny_run.data_root), "--sample-k", "64"]) == 0

    plots = tmp_path / "plots"
    assert main(["report-plots", "--run-dir", str(tiny_run.run_dir), "--report", f"joint={out / 'report.json'}",
                 "--report", f"recon={rec / 'report.json'}", "--out", str(plots)]) == 0
    for name in ("loss_curves.png", "metric_cd.png", "metric_psnr.png", "metric_auc30.png"):
        assert (plots / name).read_bytes()[:4] == b"\x89PNG"


def test_baseline_and_unknown_scene(cfg_file, tmp_path, capsys):
    assert main(["baseline-2stage", "--config", str(cfg_file), "--scene", "scene_0002", "--out", str(tmp_path / "b")]) == 0
    assert read_json(tmp_path / "b" / "scene_0002" / "provenance.json")["method"] == "2-stage"
    assert main(["generate", "--config", str(cfg_file), "--scene", "scene_9999", "--out", str(tmp_path / "c")]) == 2


def test_inspect_latents(cfg_file, tmp_path, capsys):
    out = tmp_path / "lat"
    assert main(["inspect-latents", "--config", str(cfg_file), "--out", str(out)]) == 0
    stats = read_json(out / "latent_stats.json")
    assert set(stats["sources"]) == {"appearance", "adapter", "adapter-nokl"}
    assert (out / "latent_stats.png").exists()
    assert (out / "latent_stats.csv").read_text().startswith("source,channel")


def test_evaluate_empty_dir(tiny_run, tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["evaluate", "--pred", str(tmp_path / "empty"), "--gt", str(tiny_run.data_root)]) == 2
