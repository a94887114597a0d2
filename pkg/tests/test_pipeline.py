import numpy as np
import pytest

from gen3r.checkpoint import file_sha256, module_hash
from gen3r.io import read_json
from gen3r.pipeline import (
    Artifacts,
    ConfigHashMismatchError,
    ExperimentConfig,
    MissingPrerequisiteError,
    PipelineError,
    dense_unprojection,
    generate,
    parse_override,
    reconstruct,
    run_stage,
    surrogate_reconstruction,
    two_stage_baseline,
    write_result,
)
from gen3r.scene_synth import SceneDataset

from conftest import tiny_config


class TestConfig:
    def test_override_parsing(self):
        assert parse_override("sampler.steps=30") == {"sampler": {"steps": 30}}
        assert parse_override("run_dir=runs/x") == {"run_dir": "runs/x"}
        with pytest.raises(ValueError):
            parse_override("novalue")

    def test_hash_ignores_paths(self):
        a = ExperimentConfig.load(None, ['run_dir="a"', 'data.root="x"'])
        b = ExperimentConfig.load(None, ['run_dir="b"', 'data.root="y"'])
        c = ExperimentConfig.load(None, ["sampler.steps=3"])
        assert a.hash == b.hash != c.hash

    def test_nokl_inherits_adapter_settings(self):
        cfg = ExperimentConfig.load(None, ["adapter.steps=7"])
        sc = cfg.stage_config("adapter-nokl")
        assert sc["steps"] == 7 and sc["lambda_kl"] == 0.0
        assert cfg.stage_config("adapter")["lambda_kl"] > 0


class TestStages:
    def test_missing_prerequisite(self, tmp_path):
        cfg = tiny_config(tmp_path)
        with pytest.raises(MissingPrerequisiteError):
            run_stage("adapter", cfg)
        with pytest.raises(MissingPrerequisiteError):
            run_stage("codec", cfg)  # no dataset yet

    def test_unknown_stage(self, tmp_path):
        with pytest.raises(PipelineError):
            run_stage("vae", tiny_config(tmp_path))

    def test_cached_and_mismatch(self, tiny_run):
        entry = run_stage("codec", tiny_run)
        assert entry["status"] == "cached"
        changed = ExperimentConfig.load(None, [tiny_run.values, "codec.steps=4"])
        with pytest.raises(ConfigHashMismatchError):
            run_stage("codec", changed)

    def test_dataset_settings_are_checked(self, tiny_run):
        other = ExperimentConfig.load(None, [tiny_run.values, "data.seed=5"])
        with pytest.raises(ConfigHashMismatchError):
            run_stage("codec", other)

    def test_manifest_and_artifacts(self, tiny_run):
        m = read_json(tiny_run.run_dir / "manifest.json")["stages"]
        for stage in ("codec", "surrogate", "prior", "adapter", "adapter-nokl", "diffusion", "rgb-diffusion"):
            e = m[stage]
            assert (tiny_run.run_dir / e["artifact"]).exists()
            assert len(e["config_hash"]) == 16
        assert (tiny_run.run_dir / "logs" / "adapter_loss.csv").exists()
        assert "alignment" in m["adapter"]["metrics"]

    def test_frozen_models_untouched_downstream(self, tiny_run):
        m = read_json(tiny_run.run_dir / "manifest.json")["stages"]
        art = Artifacts(tiny_run)
        assert module_hash(art.codec()) == m["codec"]["param_hash"]
        assert module_hash(art.surrogate()) == m["surrogate"]["param_hash"]

    def test_retraining_is_bit_identical(self, tiny_run, tmp_path):
        cfg = ExperimentConfig.load(None, [tiny_run.values, {"run_dir": str(tmp_path / "again")}])
        for stage in ("codec", "prior"):
            run_stage(stage, cfg)
        for art in ("checkpoints/codec.ckpt", "prior.json"):
            assert file_sha256(cfg.run_dir / art) == file_sha256(tiny_run.run_dir / art)


class TestInference:
    def load(self, cfg):
        ds = SceneDataset(cfg.data_root)
        return Artifacts(cfg), ds.load(ds.train_ids[0])

    def test_generate_shapes_and_invariant(self, tiny_run):
        art, seq = self.load(tiny_run)
        res = generate(art, seq.images[:1], mode="first-frame")
        assert res.frames.shape == seq.images.shape
        assert res.depths.shape == seq.depths.shape
        assert res.cameras.shape == (5, 9)
        assert res.check_unprojection() <= 1e-6
        prov = res.provenance
        assert prov["config_hash"] == tiny_run.hash and prov["method"] == "joint"
        assert set(prov["stage_hashes"]) == {"codec", "surrogate", "adapter", "diffusion"}

    def test_modes_and_cameras(self, tiny_run):
        art, seq = self.load(tiny_run)
        two = generate(art, seq.images[[0, -1]], seq.camera_vectors, mode="first+last", descriptor=1)
        assert two.provenance["camera_conditioned"] and two.provenance["descriptor"] == 1
        rec = reconstruct(art, seq.images)
        assert rec.provenance["mode"] == "all-frames"
        base = two_stage_baseline(art, seq.images[:1])
        assert base.provenance["method"] == "2-stage"
        sur = surrogate_reconstruction(art, seq.images)
        assert sur.check_unprojection() <= 1e-6

    def test_wrong_inputs(self, tiny_run):
        art, seq = self.load(tiny_run)
        with pytest.raises(ValueError):
            generate(art, seq.images[:2], mode="first-frame")
        with pytest.raises(ValueError):
            generate(art, seq.images[:1], np.zeros((3, 9)), mode="first-frame")

    def test_sampling_is_deterministic(self, tiny_run, tmp_path):
        art, seq = self.load(tiny_run)
        a = write_result(generate(art, seq.images[:1], sampler={"seed": 3}), tmp_path / "a")
        b = write_result(generate(art, seq.images[:1], sampler={"seed": 3}), tmp_path / "b")
        for name in ("depth.f32", "poses.json", "cloud.ply", "provenance.json", "frames/000.png"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_dense_unprojection_matches_cloud(self, tiny_run):
        art, seq = self.load(tiny_run)
        res = generate(art, seq.images[:1])
        dense = dense_unprojection(res.depths, res.cameras)
        np.testing.assert_allclose(dense[res.validity], res.cloud.points, atol=1e-9)
