"""Causal spatiotemporal autoencoder for RGB frames.

Compresses N = 1 + 4k frames of H x W RGB to n = 1 + k latent frames of
(H/8) x (W/8) x c. The first frame is encoded on its own; later frames are
grouped four at a time after a causal temporal convolution.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    CausalTemporalConv,
    LossLog,
    ResBlock2d,
    ShapeLawError,
    TemporalCompress,
    TemporalExpand,
    check_finite,
    cosine_lr,
    diagonal_gaussian_sample,
    latent_frame_count,
    per_frame,
    set_lr,
)

log = logging.getLogger(__name__)

SPATIAL_FACTOR = 8


@dataclass
class CodecConfig:
    latent_channels: int = 8
    base_channels: int = 32


def latent_shape(num_frames: int, height: int, width: int, channels: int) -> tuple[int, int, int, int]:
    """The compression law n = 1 + (N-1)/4, h = H/8, w = W/8."""
    if height % SPATIAL_FACTOR or width % SPATIAL_FACTOR:
        raise ShapeLawError(f"resolution {height}x{width} not divisible by {SPATIAL_FACTOR}")
    return latent_frame_count(num_frames), height // SPATIAL_FACTOR, width // SPATIAL_FACTOR, channels


class _FrameEncoder(nn.Module):
    def __init__(self, base: int):
        super().__init__()
        mid, top = 2 * base, 4 * base
        self.stem = nn.Conv2d(3 * 16, mid, 3, padding=1)
        self.res1 = ResBlock2d(mid)
        self.down = nn.Conv2d(mid, top, 3, stride=2, padding=1)
        self.res2 = ResBlock2d(top)

    def forward(self, x):
        x = F.pixel_unshuffle(x, 4)
        x = self.res1(self.stem(x))
        return self.res2(self.down(x))


class _FrameDecoder(nn.Module):
    def __init__(self, base: int):
        super().__init__()
        mid, top = 2 * base, 4 * base
        self.res1 = ResBlock2d(top)
        self.up = nn.Conv2d(top, mid * 4, 3, padding=1)
        self.res2 = ResBlock2d(mid)
        self.res3 = ResBlock2d(mid)
        self.up2 = nn.Conv2d(mid, base * 4, 3, padding=1)
        self.res4 = ResBlock2d(base)
        self.up3 = nn.Conv2d(base, base // 2 * 4, 3, padding=1)
        self.out = nn.Conv2d(base // 2, 3, 3, padding=1)

    def forward(self, x):
        x = self.res1(x)
        x = F.pixel_shuffle(self.up(x), 2)
        x = self.res3(self.res2(x))
        x = self.res4(F.pixel_shuffle(self.up2(F.silu(x)), 2))
        x = F.pixel_shuffle(self.up3(F.silu(x)), 2)
        return self.out(F.silu(x))


class AppearanceCodec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        base, c = self.config.base_channels, self.config.latent_channels
        top = 4 * base
        self.enc_frames = _FrameEncoder(base)
        self.enc_time = CausalTemporalConv(top)
        self.enc_compress = TemporalCompress(top, top)
        self.enc_latent = ResBlock2d(top)
        self.enc_out = nn.Linear(top, 2 * c)
        with torch.no_grad():
            # start with a nearly deterministic posterior; beta is tiny so logvar barely moves
            self.enc_out.bias[c:].fill_(-8.0)
        self.dec_in = nn.Linear(c, top)
        self.dec_latent = ResBlock2d(top)
        self.dec_expand = TemporalExpand(top, top)
        self.dec_time = CausalTemporalConv(top)
        self.dec_frames = _FrameDecoder(base)

    def check_input(self, images):
        if images.ndim != 5 or images.shape[-1] != 3:
            raise ShapeLawError(f"expected (B, N, H, W, 3) images, got {tuple(images.shape)}")
        B, N, H, W, _ = images.shape
        return latent_shape(N, H, W, self.config.latent_channels)

    def encode(self, images):
        """images (B, N, H, W, 3) in [0, 1] -> posterior (mean, logvar), each (B, n, h, w, c)."""
        self.check_input(images)
        x = images * 2.0 - 1.0
        h = per_frame(self.enc_frames, x)
        h = self.enc_compress(F.silu(self.enc_time(h)))
        h = per_frame(self.enc_latent, h)
        mean, logvar = self.enc_out(h).chunk(2, dim=-1)
        return mean, torch.clamp(logvar, -30.0, 20.0)

    def decode_raw(self, latent):
        if latent.ndim != 5 or latent.shape[-1] != self.config.latent_channels:
            raise ShapeLawError(f"latent shape {tuple(latent.shape)} does not match the codec config")
        h = per_frame(self.dec_latent, self.dec_in(latent))
        h = self.dec_time(F.silu(self.dec_expand(h)))
        return per_frame(self.dec_frames, h)

    def decode(self, latent):
        """latent (B, n, h, w, c) -> images (B, N, H, W, 3) in [0, 1]."""
        return (torch.clamp(self.decode_raw(latent), -1.0, 1.0) + 1.0) / 2.0


def encode_appearance(codec: AppearanceCodec, images, generator=None):
    """Returns (mean, logvar, sample)."""
    mean, logvar = codec.encode(images)
    return mean, logvar, diagonal_gaussian_sample(mean, logvar, generator)


def decode_appearance(codec: AppearanceCodec, latent):
    return codec.decode(latent)


def pretrain_codec(
    sequences,
    steps: int = 600,
    beta: float = 1e-6,
    seed: int = 0,
    batch_size: int = 2,
    lr: float = 2e-3,
    config: CodecConfig | None = None,
):
    """Reconstruction MSE + beta * KL to N(0, I) on a list of (N, H, W, 3) image arrays.

    Returns (codec, LossLog). The codec comes back frozen (eval mode, no grads).
    """
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    codec = AppearanceCodec(config)
    data = torch.from_numpy(np.stack([np.asarray(s, dtype=np.float32) for s in sequences]))
    opt = torch.optim.AdamW(codec.parameters(), lr=lr, weight_decay=0.0)
    history = LossLog()
    for step in range(steps):
        set_lr(opt, cosine_lr(step, steps, lr))
        idx = torch.randint(len(data), (min(batch_size, len(data)),), generator=g)
        x = data[idx]
        mean, logvar = codec.encode(x)
        z = diagonal_gaussian_sample(mean, logvar, g)
        recon = codec.decode_raw(z)
        rec = F.mse_loss(recon, x * 2 - 1)
        kl = 0.5 * torch.mean(mean**2 + torch.exp(logvar) - 1.0 - logvar)
        loss = rec + beta * kl
        check_finite("codec loss", loss.detach(), step=step, rec=rec.item(), kl=kl.item())
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(codec.parameters(), 1.0)
        opt.step()
        history.add(step, total=loss.item(), rec=rec.item(), kl=kl.item())
        if step % 100 == 0:
            log.info("codec step %d loss %.5f", step, loss.item())
    codec = freeze(codec)
    standardize_latents(codec, data)
    return codec, history


@torch.no_grad()
def standardize_latents(codec: AppearanceCodec, data, chunk: int = 4):
    """Fold a per-channel affine into enc_out/dec_in so posterior means on `data` are zero-mean, unit-variance.

    Decoding is unchanged: dec_in sees exactly the latent it saw before the fold.
    """
    means = torch.cat([codec.encode(data[i : i + chunk])[0] for i in range(0, len(data), chunk)])
    flat = means.reshape(-1, means.shape[-1]).double()
    m, s = flat.mean(0), flat.std(0, unbiased=False).clamp_min(1e-6)
    c = codec.config.latent_channels
    W, b = codec.enc_out.weight, codec.enc_out.bias
    W[:c] = (W[:c].double() / s[:, None]).float()
    b[:c] = ((b[:c].double() - m) / s).float()
    b[c:] = (b[c:].double() - 2.0 * torch.log(s)).float()
    Wd, bd = codec.dec_in.weight, codec.dec_in.bias
    bd.copy_((bd.double() + Wd.double() @ m).float())
    Wd.copy_((Wd.double() * s[None, :]).float())
    return m.numpy(), s.numpy()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


@dataclass
class LatentPriorStats:
    mean: np.ndarray
    var: np.ndarray
    count: int

    @property
    def std(self):
        return np.sqrt(self.var)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "var": [float(v) for v in self.var], "count": int(self.count)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["var"], dtype=np.float64), int(d["count"]))


VAR_FLOOR = 1e-6
MIN_PRIOR_SAMPLES = 1000


class InsufficientSamplesError(ValueError):
    pass


def fit_appearance_prior(latents) -> LatentPriorStats:
    """Per-channel mean/variance over every latent pixel (last axis = channel)."""
    arr = latents.detach().cpu().numpy() if isinstance(latents, torch.Tensor) else np.asarray(latents)
    flat = arr.reshape(-1, arr.shape[-1]).astype(np.float64)
    if flat.shape[0] < MIN_PRIOR_SAMPLES:
        raise InsufficientSamplesError(f"need >= {MIN_PRIOR_SAMPLES} latent pixels, got {flat.shape[0]}")
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    if np.any(var < VAR_FLOOR):
        log.warning("appearance prior variance below %.0e in %d channel(s); flooring", VAR_FLOOR, int(np.sum(var < VAR_FLOOR)))
        var = np.maximum(var, VAR_FLOOR)
    return LatentPriorStats(mean, var, flat.shape[0])


def codec_config_dict(codec: AppearanceCodec) -> dict:
    return asdict(codec.config)
