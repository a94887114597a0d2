import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

# Small enough to train every stage in seconds; 128px keeps the prior above its sample floor.
TINY_OVERRIDES = {
    "data": {"count": 3, "seed": 0, "resolution": 128, "frames": 5},
    "codec": {"latent_channels": 2, "base_channels": 8, "steps": 3},
    "surrogate": {"image_size": 128, "patch_size": 8, "dim": 16, "depth": 2, "heads": 2, "taps": [0, 1],
                  "head_features": 8, "steps": 3},
    "adapter": {"hidden": 8, "steps": 3},
    "diffusion": {"dim": 16, "depth": 1, "heads": 2, "steps": 3, "batch_size": 2},
    "sampler": {"steps": 2},
    "eval": {"sample_k": 64},
}


def tiny_config(tmp, run="run"):
    from gen3r.pipeline import ExperimentConfig

    return ExperimentConfig.load(None, [TINY_OVERRIDES, {"run_dir": str(tmp / run), "data": {"root": str(tmp / "data")}}])


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A fully trained tiny pipeline shared by the pipeline and CLI tests."""
    from gen3r.pipeline import run_all
    from gen3r.scene_synth import make_dataset

    tmp = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(tmp)
    d = cfg["data"]
    make_dataset(cfg.data_root, d["count"], d["seed"], (d["resolution"],) * 2, d["frames"])
    run_all(cfg)
    return cfg


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
