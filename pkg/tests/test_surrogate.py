import math

import numpy as np
import pytest
import torch

from gen3r.checkpoint import module_hash
from gen3r.geometry import CameraPose, unproject_depth
from gen3r.recon_surrogate import (
    FULL_SCALE,
    ReconSurrogate,
    SurrogateConfig,
    SurrogateShapeError,
    camera_from_raw,
    canonical_quaternion_sign,
    pretrain_surrogate,
    surrogate_config_dict,
    surrogate_from_config,
)
from gen3r.scene_synth import render_sequence, sample_scene


def small(seed=0):
    torch.manual_seed(seed)
    return ReconSurrogate(SurrogateConfig(image_size=16, patch_size=8, dim=16, depth=4, heads=2, taps=(0, 1, 2, 3),
                                          head_features=8)).eval()


class TestShapes:
    def test_desk_token_shape(self):
        torch.manual_seed(0)
        model = ReconSurrogate().eval()
        with torch.no_grad():
            V = model.encode_views(torch.rand(1, 9, 64, 64, 3))
            out = model.decode_tokens(V)
        assert V.shape == (1, 9, 5, 8, 8, 64)
        assert out.pointmaps.shape == (1, 9, 64, 64, 3)
        assert out.depths.shape == (1, 9, 64, 64, 1)
        assert out.cameras.shape == (1, 9, 9)
        assert out.confidence.shape == (1, 9, 64, 64)
        assert SurrogateConfig().taps == (1, 3, 5, 7)

    def test_full_scale_constants(self):
        assert FULL_SCALE["dim"] == 2048 and FULL_SCALE["grid"] == 40 and FULL_SCALE["levels"] == 5

    def test_camera_level_is_broadcast(self):
        with torch.no_grad():
            V = small().encode_views(torch.rand(1, 5, 16, 16, 3))
        lvl = V[:, :, -1]
        assert torch.equal(lvl, lvl[:, :, :1, :1].expand_as(lvl))

    def test_errors(self):
        m = small()
        with pytest.raises(SurrogateShapeError):
            m.encode_views(torch.rand(1, 5, 24, 24, 3))
        with pytest.raises(SurrogateShapeError):
            m.decode_tokens(torch.rand(1, 5, 3, 2, 2, 16))


class TestProperties:
    def test_permutation_only_reorders(self):
        m = small()
        x = torch.rand(1, 5, 16, 16, 3)
        perm = [0, 3, 1, 4, 2]
        with torch.no_grad():
            a = m(x)
            b = m(x[:, perm])
        for fa, fb in ((a.pointmaps, b.pointmaps), (a.depths, b.depths), (a.cameras, b.cameras)):
            torch.testing.assert_close(fa[:, perm], fb, rtol=0, atol=1e-4)

    def test_quaternions_are_unit(self):
        raw = torch.randn(100, 9) * 5
        q = camera_from_raw(raw)[:, :4]
        assert (q.norm(dim=-1) - 1).abs().max() < 1e-6
        fov = camera_from_raw(raw)[:, 7:]
        assert fov.min() > 0 and fov.max() < math.pi

    def test_canonical_sign(self):
        cams = np.array([[-0.5, 0.5, 0.5, 0.5, 1, 2, 3, 1, 1], [0.5, 0.5, 0.5, 0.5, 1, 2, 3, 1, 1]])
        out = canonical_quaternion_sign(cams)
        assert np.all(out[:, 0] >= 0)
        np.testing.assert_array_equal(out[0, 1:4], [-0.5, -0.5, -0.5])
        np.testing.assert_array_equal(out[:, 4:], cams[:, 4:])

    def test_config_roundtrip(self):
        m = small()
        m2 = surrogate_from_config(surrogate_config_dict(m))
        assert m2.config == m.config


def test_pretraining_sanity():
    seqs = []
    for i in range(2):
        spec, traj = sample_scene(0, i, 5)
        seqs.append(render_sequence(spec, traj, (16, 16)))
    cfg = SurrogateConfig(image_size=16, patch_size=8, dim=16, depth=2, heads=2, taps=(0, 1), head_features=8)
    m1, log = pretrain_surrogate(seqs, steps=40, seed=0, config=cfg)
    m2, _ = pretrain_surrogate(seqs, steps=40, seed=0, config=cfg)
    assert log.last_ema() < log.first_ema()
    assert module_hash(m1) == module_hash(m2)
    assert not any(p.requires_grad for p in m1.parameters())
    with torch.no_grad():
        out = m1(torch.from_numpy(seqs[0].images.astype(np.float32))[None])
    cam = CameraPose.from_vector(out.cameras[0, 0].double().numpy())
    pts = unproject_depth(out.depths[0, 0, ..., 0].double().numpy(), cam, (16, 16))
    assert np.isfinite(pts.points).all() and len(pts.points) == 256
