"""Token-to-latent adapter between reconstruction tokens and the diffusion latent space.

The encoder flattens the token levels into channels (N x h_v x w_v x L*C),
resamples spatially to the latent grid with nearest-exact interpolation,
projects channels, and compresses time causally with the same 1 + 4k law as
the appearance codec, emitting a diagonal Gaussian posterior. The decoder
mirrors it back to the original token shape. Training combines token,
camera, depth and pointmap reconstruction with a KL term toward the fitted
appearance-latent prior.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .appearance_codec import LatentPriorStats
from .checkpoint import module_hash
from .layers import (
    CausalTemporalConv,
    DivergenceError,
    LossLog,
    ResBlock2d,
    TemporalCompress,
    TemporalExpand,
    check_finite,
    cosine_lr,
    diagonal_gaussian_sample,
    kl_diagonal,
    latent_frame_count,
    per_frame,
    set_lr,
)

log = logging.getLogger(__name__)


@dataclass
class AdapterConfig:
    levels: int = 5
    token_dim: int = 64
    token_grid: int = 8
    latent_grid: int = 8
    latent_channels: int = 8
    hidden: int = 128
    groups: int = 8

    @property
    def flat_channels(self) -> int:
        return self.levels * self.token_dim


class AdapterConfigError(ValueError):
    pass


class FrozenParameterMutation(AssertionError):
    pass


def resample_nearest_exact(x, size: int):
    """(B, T, H, W, C) -> (B, T, size, size, C) by nearest-exact interpolation."""
    B, T, H, W, C = x.shape
    if H == size and W == size:
        return x
    y = F.interpolate(x.reshape(B * T, H, W, C).permute(0, 3, 1, 2), size=(size, size), mode="nearest-exact")
    return y.permute(0, 2, 3, 1).reshape(B, T, size, size, C)


class GeometryAdapter(nn.Module):
    def __init__(self, config: AdapterConfig | None = None):
        super().__init__()
        cfg = self.config = config or AdapterConfig()
        Hd, c = cfg.hidden, cfg.latent_channels
        self.enc_proj = nn.Conv2d(cfg.flat_channels, Hd, 1)
        self.enc_res1 = ResBlock2d(Hd, cfg.groups)
        self.enc_time = CausalTemporalConv(Hd)
        self.enc_compress = TemporalCompress(Hd, Hd)
        self.enc_res2 = ResBlock2d(Hd, cfg.groups)
        self.enc_out = nn.Linear(Hd, 2 * c)
        self.dec_in = nn.Linear(c, Hd)
        self.dec_res1 = ResBlock2d(Hd, cfg.groups)
        self.dec_expand = TemporalExpand(Hd, Hd)
        self.dec_time = CausalTemporalConv(Hd)
        self.dec_res2 = ResBlock2d(Hd, cfg.groups)
        self.dec_proj = nn.Conv2d(Hd, cfg.flat_channels, 1)

    def _check_tokens(self, tokens):
        cfg = self.config
        if tokens.ndim != 6 or tuple(tokens.shape[2:]) != (cfg.levels, cfg.token_grid, cfg.token_grid, cfg.token_dim):
            raise AdapterConfigError(
                f"tokens {tuple(tokens.shape)} do not match adapter config "
                f"(L={cfg.levels}, grid={cfg.token_grid}, C={cfg.token_dim})"
            )
        latent_frame_count(tokens.shape[1])

    def encode(self, tokens):
        """tokens (B, N, L, h_v, w_v, C) -> posterior (mean, logvar), each (B, n, h, w, c)."""
        self._check_tokens(tokens)
        cfg = self.config
        B, N, L, hv, wv, C = tokens.shape
        x = tokens.permute(0, 1, 3, 4, 2, 5).reshape(B, N, hv, wv, L * C)
        x = resample_nearest_exact(x, cfg.latent_grid)
        x = per_frame(lambda t: self.enc_res1(self.enc_proj(t)), x)
        x = self.enc_compress(F.silu(self.enc_time(x)))
        x = per_frame(self.enc_res2, x)
        mean, logvar = self.enc_out(x).chunk(2, dim=-1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode(self, latent):
        """latent (B, n, h, w, c) -> tokens (B, N, L, h_v, w_v, C)."""
        cfg = self.config
        if latent.ndim != 5 or latent.shape[-1] != cfg.latent_channels or latent.shape[2] != cfg.latent_grid:
            raise AdapterConfigError(f"latent {tuple(latent.shape)} does not match adapter config")
        x = per_frame(self.dec_res1, self.dec_in(latent))
        x = self.dec_time(F.silu(self.dec_expand(x)))
        x = per_frame(lambda t: self.dec_proj(F.silu(self.dec_res2(t))), x)
        x = resample_nearest_exact(x, cfg.token_grid)
        B, N = x.shape[:2]
        g = cfg.token_grid
        return x.reshape(B, N, g, g, cfg.levels, cfg.token_dim).permute(0, 1, 4, 2, 3, 5)


def encode_geometry(adapter: GeometryAdapter, tokens, generator=None):
    """Returns (mean, logvar, sample)."""
    mean, logvar = adapter.encode(tokens)
    return mean, logvar, diagonal_gaussian_sample(mean, logvar, generator)


def decode_geometry(adapter: GeometryAdapter, latent):
    return adapter.decode(latent)


@dataclass
class AdapterLossReport:
    token_mse: float
    camera_l1: float
    depth_mse: float
    point_mse: float
    kl: float
    total: float
    lambda_rec: float
    lambda_kl: float

    def as_dict(self):
        return asdict(self)


def adapter_loss_terms(tokens, tokens_hat, outputs_hat, outputs_ref, mean, logvar, prior: LatentPriorStats, valid=None):
    """Tensor-valued loss terms (token, camera, depth, point, kl)."""
    token = torch.mean((tokens_hat - tokens) ** 2)
    camera = torch.mean(torch.abs(outputs_hat.cameras - outputs_ref.cameras))
    if valid is None:
        m = torch.ones_like(outputs_ref.depths)
    else:
        m = valid.unsqueeze(-1).to(outputs_ref.depths.dtype)
    denom = m.sum().clamp_min(1.0)
    depth = (((outputs_hat.depths - outputs_ref.depths) ** 2) * m).sum() / denom
    point = (((outputs_hat.pointmaps - outputs_ref.pointmaps) ** 2) * m).sum() / (3 * denom)
    pm = torch.as_tensor(prior.mean, dtype=mean.dtype)
    pv = torch.as_tensor(prior.var, dtype=mean.dtype)
    kl = kl_diagonal(mean, logvar, pm, pv).mean()
    return token, camera, depth, point, kl


def adapter_loss(tokens, tokens_hat, outputs_hat, outputs_ref, mean, logvar, prior, lambda_rec=1.0, lambda_kl=0.01, valid=None):
    """Returns (total tensor, AdapterLossReport)."""
    token, camera, depth, point, kl = adapter_loss_terms(tokens, tokens_hat, outputs_hat, outputs_ref, mean, logvar, prior, valid)
    total = lambda_rec * (token + camera + depth + point) + lambda_kl * kl
    for name, v in (("token_mse", token), ("camera_l1", camera), ("depth_mse", depth), ("point_mse", point), ("kl", kl)):
        if not torch.isfinite(v):
            raise DivergenceError(f"adapter loss term {name} is non-finite")
    report = AdapterLossReport(
        token.item(), camera.item(), depth.item(), point.item(), kl.item(), 0.0, float(lambda_rec), float(lambda_kl)
    )
    report.total = lambda_rec * (report.token_mse + report.camera_l1 + report.depth_mse + report.point_mse) + lambda_kl * report.kl
    return total, report


def train_adapter(
    surrogate,
    prior: LatentPriorStats,
    sequences,
    steps: int = 600,
    lambda_rec: float = 1.0,
    lambda_kl: float = 0.01,
    seed: int = 0,
    batch_size: int = 2,
    lr: float = 1e-3,
    config: AdapterConfig | None = None,
):
    """Optimize the adapter against frozen surrogate heads.

    Returns (adapter, LossLog, list of AdapterLossReport).
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    if any(p.requires_grad for p in surrogate.parameters()):
        raise FrozenParameterMutation("surrogate must be frozen before adapter training")
    before = module_hash(surrogate)
    scfg = surrogate.config
    cfg = config or AdapterConfig(
        levels=scfg.levels, token_dim=scfg.dim, token_grid=scfg.grid, latent_grid=scfg.image_size // 8,
        latent_channels=len(prior.mean),
    )
    if (cfg.levels, cfg.token_dim, cfg.token_grid) != (scfg.levels, scfg.dim, scfg.grid):
        raise AdapterConfigError("adapter config does not match the surrogate")
    adapter = GeometryAdapter(cfg)
    images = torch.from_numpy(np.stack([s.images for s in sequences]).astype(np.float32))
    valid = torch.from_numpy(np.stack([s.validity for s in sequences]))
    with torch.no_grad():
        tokens = torch.cat([surrogate.encode_views(images[i : i + 1]) for i in range(len(images))])
        refs = [surrogate.decode_tokens(tokens[i : i + 1]) for i in range(len(images))]
    ref_p = torch.cat([r.pointmaps for r in refs])
    ref_d = torch.cat([r.depths for r in refs])
    ref_t = torch.cat([r.cameras for r in refs])
    ref_c = torch.cat([r.confidence for r in refs])
    opt = torch.optim.AdamW(adapter.parameters(), lr=lr, weight_decay=0.0)
    history = LossLog()
    reports = []
    from .recon_surrogate import GeometryOutputs

    for step in range(steps):
        set_lr(opt, cosine_lr(step, steps, lr))
        idx = torch.randint(len(images), (min(batch_size, len(images)),), generator=g)
        V = tokens[idx]
        mean, logvar = adapter.encode(V)
        G = diagonal_gaussian_sample(mean, logvar, g)
        V_hat = adapter.decode(G)
        out_hat = surrogate.decode_tokens(V_hat)
        ref = GeometryOutputs(ref_p[idx], ref_d[idx], ref_t[idx], ref_c[idx])
        loss, report = adapter_loss(V, V_hat, out_hat, ref, mean, logvar, prior, lambda_rec, lambda_kl, valid[idx])
        check_finite("adapter loss", loss.detach(), step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(adapter.parameters(), 1.0)
        opt.step()
        history.add(step, **report.as_dict())
        reports.append(report)
        if step % 100 == 0:
            log.info("adapter step %d total %.5f kl %.4f", step, report.total, report.kl)
    if module_hash(surrogate) != before:
        raise FrozenParameterMutation("surrogate parameters changed during adapter training")
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    return adapter, history, reports


def channel_stats(latents) -> tuple[np.ndarray, np.ndarray]:
    arr = latents.detach().cpu().numpy() if isinstance(latents, torch.Tensor) else np.asarray(latents)
    flat = arr.reshape(-1, arr.shape[-1]).astype(np.float64)
    return flat.mean(0), flat.var(0)


@dataclass
class AlignmentGate:
    mean_offsets: np.ndarray  # |mu_G - mu_A| / sigma_A per channel
    var_ratios: np.ndarray  # var_G / var_A per channel
    mean_tol: float = 0.5
    ratio_range: tuple = (0.5, 2.0)

    @property
    def means_ok(self) -> bool:
        return bool(np.all(self.mean_offsets <= self.mean_tol))

    @property
    def vars_ok(self) -> bool:
        lo, hi = self.ratio_range
        return bool(np.all((self.var_ratios >= lo) & (self.var_ratios <= hi)))

    @property
    def passed(self) -> bool:
        return self.means_ok and self.vars_ok

    @property
    def max_mean_offset(self) -> float:
        return float(self.mean_offsets.max())

    def to_dict(self):
        return {
            "mean_offsets_sigma": [float(v) for v in self.mean_offsets],
            "var_ratios": [float(v) for v in self.var_ratios],
            "means_ok": self.means_ok,
            "vars_ok": self.vars_ok,
            "passed": self.passed,
        }


def alignment_gate(geometry_latents, prior: LatentPriorStats) -> AlignmentGate:
    """Channel-wise comparison of pooled geometry latents against the appearance prior."""
    mu, var = channel_stats(geometry_latents)
    return AlignmentGate(np.abs(mu - prior.mean) / prior.std, var / prior.var)


def adapter_config_dict(adapter: GeometryAdapter) -> dict:
    return asdict(adapter.config)
