"""Small feed-forward multi-view reconstruction transformer.

Frames are patch-embedded, a per-frame camera register token is prepended,
and blocks alternate between frame-local and global attention. Activations of
four evenly spaced blocks form token levels 0-3; the final camera token,
broadcast over the patch grid, is level 4. A light upsampling head turns
levels 0-3 into pointmaps, depth and confidence; level 4 gives the 9-dim
camera (unit quaternion, translation, field of view).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import LossLog, ResBlock2d, check_finite, cosine_lr, set_lr

log = logging.getLogger(__name__)


@dataclass
class SurrogateConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 64
    depth: int = 8
    heads: int = 4
    taps: tuple = (1, 3, 5, 7)
    head_features: int = 64

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def levels(self) -> int:
        return len(self.taps) + 1

    def token_shape(self, num_frames: int) -> tuple:
        return (num_frames, self.levels, self.grid, self.grid, self.dim)


# Full-scale constants of the reconstruction backbone the surrogate mimics.
FULL_SCALE = {"dim": 2048, "grid": 40, "levels": 5, "blocks": 24, "taps": (4, 11, 17, 23)}


class SurrogateShapeError(ValueError):
    pass


@dataclass
class GeometryOutputs:
    pointmaps: torch.Tensor  # B,N,H,W,3
    depths: torch.Tensor  # B,N,H,W,1
    cameras: torch.Tensor  # B,N,9
    confidence: torch.Tensor  # B,N,H,W


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        B, T, D = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(B, T, D))
        return x + self.mlp(self.norm2(x))


class ReconSurrogate(nn.Module):
    def __init__(self, config: SurrogateConfig | None = None):
        super().__init__()
        cfg = self.config = config or SurrogateConfig()
        D = cfg.dim
        self.patch = nn.Conv2d(3, D, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(1, cfg.grid * cfg.grid, D) * 0.02)
        self.cam_token_first = nn.Parameter(torch.randn(1, 1, D) * 0.02)
        self.cam_token_other = nn.Parameter(torch.randn(1, 1, D) * 0.02)
        self.blocks = nn.ModuleList(Block(D, cfg.heads) for _ in range(cfg.depth))
        F_ = cfg.head_features
        self.level_norm = nn.ModuleList(nn.LayerNorm(D) for _ in cfg.taps)
        self.level_proj = nn.ModuleList(nn.Linear(D, F_) for _ in cfg.taps)
        self.fuse = ResBlock2d(F_)
        self.up1 = nn.Conv2d(F_, 32, 3, padding=1)
        self.up2 = nn.Conv2d(32, 32, 3, padding=1)
        self.up3 = nn.Conv2d(32, 16, 3, padding=1)
        self.dense_out = nn.Conv2d(16, 5, 3, padding=1)
        self.cam_norm = nn.LayerNorm(D)
        self.cam_mlp = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, 9))
        with torch.no_grad():
            self.cam_mlp[-1].weight.mul_(0.1)
            self.cam_mlp[-1].bias.copy_(torch.tensor([1.0, 0, 0, 0, 0, 0, 0, 0, 0]))
            fov0 = math.log((math.pi / 3) / (math.pi - math.pi / 3))  # logit of 60 deg / 180 deg
            self.cam_mlp[-1].bias[7:].fill_(fov0)
            self.dense_out.bias.zero_()
            self.dense_out.bias[3] = 3.0  # softplus(3) ~ typical scene depth

    # -- encoder ---------------------------------------------------------
    def encode_views(self, images):
        """images (B, N, H, W, 3) in [0, 1] -> tokens (B, N, L, h_v, w_v, C)."""
        cfg = self.config
        if images.ndim == 4:
            images = images[None]
        B, N, H, W, _ = images.shape
        if H != cfg.image_size or W != cfg.image_size or H % cfg.patch_size:
            raise SurrogateShapeError(f"resolution {H}x{W} does not match the configured patch grid")
        x = images.reshape(B * N, H, W, 3).permute(0, 3, 1, 2) * 2.0 - 1.0
        x = self.patch(x).flatten(2).transpose(1, 2) + self.pos  # (B*N, P, D)
        P = x.shape[1]
        cam = torch.cat([self.cam_token_first.expand(B, 1, -1), self.cam_token_other.expand(B, N - 1, -1)], 1)
        x = torch.cat([cam.reshape(B * N, 1, -1), x], dim=1)  # (B*N, 1+P, D)
        taps = []
        for i, blk in enumerate(self.blocks):
            if i % 2 == 0:
                x = blk(x)
            else:
                x = blk(x.reshape(B, N * (1 + P), -1)).reshape(B * N, 1 + P, -1)
            if i in cfg.taps:
                taps.append(x[:, 1:])
        g = cfg.grid
        levels = [t.reshape(B, N, g, g, -1) for t in taps]
        cam_tok = x[:, 0].reshape(B, N, 1, 1, -1).expand(B, N, g, g, -1)
        levels.append(cam_tok)
        return torch.stack(levels, dim=2)

    # -- heads -----------------------------------------------------------
    def decode_tokens(self, tokens) -> GeometryOutputs:
        cfg = self.config
        if tokens.ndim == 5:
            tokens = tokens[None]
        B, N = tokens.shape[:2]
        if tuple(tokens.shape[2:]) != cfg.token_shape(N)[1:]:
            raise SurrogateShapeError(f"token shape {tuple(tokens.shape)} does not match config {cfg.token_shape(N)}")
        g = cfg.grid
        feat = 0
        for lvl in range(len(cfg.taps)):
            feat = feat + self.level_proj[lvl](self.level_norm[lvl](tokens[:, :, lvl]))
        h = feat.reshape(B * N, g, g, -1).permute(0, 3, 1, 2)
        h = self.fuse(h)
        h = F.gelu(self.up1(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)))
        h = F.gelu(self.up2(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)))
        h = F.gelu(self.up3(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)))
        out = self.dense_out(h)
        S = cfg.image_size
        out = out.reshape(B, N, 5, S, S).permute(0, 1, 3, 4, 2)
        pointmaps = out[..., :3]
        depths = F.softplus(out[..., 3:4])
        confidence = 1.0 + torch.exp(torch.clamp(out[..., 4], max=10.0))
        cam = self.cam_mlp(self.cam_norm(tokens[:, :, -1].mean(dim=(2, 3))))
        cameras = camera_from_raw(cam)
        return GeometryOutputs(pointmaps, depths, cameras, confidence)

    def forward(self, images) -> GeometryOutputs:
        return self.decode_tokens(self.encode_views(images))


def camera_from_raw(raw):
    """Unit quaternion, free translation, fov squashed into (0, pi)."""
    q = F.normalize(raw[..., :4], dim=-1)
    fov = math.pi * torch.sigmoid(raw[..., 7:9])
    return torch.cat([q, raw[..., 4:7], fov], dim=-1)


def canonical_quaternion_sign(cams):
    """Flip quaternions to w >= 0 (works on numpy arrays and tensors)."""
    sign = (cams[..., :1] < 0) * -2 + 1
    if isinstance(cams, torch.Tensor):
        return torch.cat([cams[..., :4] * sign, cams[..., 4:]], dim=-1)
    return np.concatenate([cams[..., :4] * sign, cams[..., 4:]], axis=-1)


def geometry_loss(out: GeometryOutputs, depth, points, cams, valid):
    """Depth MSE + pointmap MSE over valid pixels + camera L1 (supervised pretraining)."""
    m = valid.unsqueeze(-1).to(out.depths.dtype)
    denom = m.sum().clamp_min(1.0)
    d = (((out.depths - depth.unsqueeze(-1)) ** 2) * m).sum() / denom
    p = (((out.pointmaps - points) ** 2) * m).sum() / (3 * denom)
    c = (out.cameras - canonical_quaternion_sign(cams)).abs().mean()
    return d, p, c


def pretrain_surrogate(sequences, steps: int = 800, seed: int = 0, batch_size: int = 2, lr: float = 1e-3, config=None):
    """Supervised training on RenderedSequence objects. Returns (frozen model, LossLog)."""
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    model = ReconSurrogate(config)
    images = torch.from_numpy(np.stack([s.images for s in sequences]).astype(np.float32))
    depth = torch.from_numpy(np.stack([s.depths for s in sequences]).astype(np.float32))
    points = torch.from_numpy(np.stack([s.pointmaps for s in sequences]).astype(np.float32))
    cams = torch.from_numpy(np.stack([s.camera_vectors for s in sequences]).astype(np.float32))
    valid = torch.from_numpy(np.stack([s.validity for s in sequences]))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    history = LossLog()
    for step in range(steps):
        set_lr(opt, cosine_lr(step, steps, lr))
        idx = torch.randint(len(images), (min(batch_size, len(images)),), generator=g)
        out = model(images[idx])
        d, p, c = geometry_loss(out, depth[idx], points[idx], cams[idx], valid[idx])
        loss = d + p + c
        check_finite("surrogate loss", loss.detach(), step=step, depth=d.item(), points=p.item(), camera=c.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        history.add(step, total=loss.item(), depth=d.item(), points=p.item(), camera=c.item())
        if step % 100 == 0:
            log.info("surrogate step %d loss %.5f", step, loss.item())
    model.eval()
    for prm in model.parameters():
        prm.requires_grad_(False)
    return model, history


def surrogate_config_dict(model: ReconSurrogate) -> dict:
    d = asdict(model.config)
    d["taps"] = list(d["taps"])
    return d


def surrogate_from_config(d: dict) -> ReconSurrogate:
    d = dict(d)
    d["taps"] = tuple(d["taps"])
    return ReconSurrogate(SurrogateConfig(**d))
