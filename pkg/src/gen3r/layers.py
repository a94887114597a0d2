"""Building blocks shared by the codec, surrogate, adapter and diffusion model.

Video tensors are channels-last: (B, T, H, W, C).
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

TEMPORAL_STRIDE = 4


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


class ShapeLawError(ValueError):
    pass


def latent_frame_count(num_frames: int) -> int:
    if num_frames < 1 or (num_frames - 1) % TEMPORAL_STRIDE:
        raise ShapeLawError(f"frame count {num_frames} violates N = 1 + 4k")
    return 1 + (num_frames - 1) // TEMPORAL_STRIDE


def latent_frame_groups(num_frames: int) -> list[list[int]]:
    """Input frames covered by each latent frame: [[0], [1..4], [5..8], ...]."""
    n = latent_frame_count(num_frames)
    return [[0]] + [list(range(1 + TEMPORAL_STRIDE * (k - 1), 1 + TEMPORAL_STRIDE * k)) for k in range(1, n)]


def per_frame(fn, x):
    """Apply a channels-first 2D module to every frame of a channels-last video."""
    B, T, H, W, C = x.shape
    y = fn(x.reshape(B * T, H, W, C).permute(0, 3, 1, 2))
    return y.permute(0, 2, 3, 1).reshape(B, T, *y.shape[2:], y.shape[1])


class ResBlock2d(nn.Module):
    def __init__(self, channels: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class CausalTemporalConv(nn.Module):
    """Kernel-k convolution along time that only looks at current and past frames."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.kernel = kernel
        self.taps = nn.ModuleList(nn.Linear(channels, channels, bias=(j == 0)) for j in range(kernel))

    def forward(self, x):
        T = x.shape[1]
        out = self.taps[0](x)
        for j in range(1, self.kernel):
            if j >= T:
                break
            shifted = F.pad(x[:, :-j], (0, 0, 0, 0, 0, 0, j, 0))
            out = out + self.taps[j](shifted)
        return out


class TemporalCompress(nn.Module):
    """Frame 0 alone, then consecutive groups of four frames, each to one latent frame."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.first = nn.Linear(in_ch, out_ch)
        self.group = nn.Linear(TEMPORAL_STRIDE * in_ch, out_ch)

    def forward(self, x):
        B, T, H, W, C = x.shape
        n = latent_frame_count(T)
        head = self.first(x[:, :1])
        if n == 1:
            return head
        rest = x[:, 1:].reshape(B, n - 1, TEMPORAL_STRIDE, H, W, C).permute(0, 1, 3, 4, 2, 5)
        rest = self.group(rest.reshape(B, n - 1, H, W, TEMPORAL_STRIDE * C))
        return torch.cat([head, rest], dim=1)


class TemporalExpand(nn.Module):
    """Inverse of :class:`TemporalCompress`: n latent frames to 1 + 4(n-1) frames."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.out_ch = out_ch
        self.first = nn.Linear(in_ch, out_ch)
        self.group = nn.Linear(in_ch, TEMPORAL_STRIDE * out_ch)

    def forward(self, z):
        B, n, H, W, _ = z.shape
        head = self.first(z[:, :1])
        if n == 1:
            return head
        rest = self.group(z[:, 1:]).reshape(B, n - 1, H, W, TEMPORAL_STRIDE, self.out_ch)
        rest = rest.permute(0, 1, 4, 2, 3, 5).reshape(B, TEMPORAL_STRIDE * (n - 1), H, W, self.out_ch)
        return torch.cat([head, rest], dim=1)


def diagonal_gaussian_sample(mean, logvar, generator=None):
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


def kl_diagonal(mean, logvar, prior_mean, prior_var):
    """Elementwise KL(N(mean, exp(logvar)) || N(prior_mean, prior_var))."""
    var = torch.exp(logvar)
    return 0.5 * (torch.log(prior_var) - logvar + (var + (mean - prior_mean) ** 2) / prior_var - 1.0)


def check_finite(name: str, value: torch.Tensor, **context):
    if not torch.isfinite(value).all():
        details = ", ".join(f"{k}={v}" for k, v in context.items())
        raise DivergenceError(f"{name} became non-finite ({details})")


class LossLog:
    """Per-step scalar log with an exponential moving average of the total."""

    def __init__(self, decay: float = 0.95):
        self.decay = decay
        self.rows: list[dict] = []
        self.ema = None

    def add(self, step: int, **values):
        total = float(values.get("total", next(iter(values.values()))))
        self.ema = total if self.ema is None else self.decay * self.ema + (1 - self.decay) * total
        self.rows.append({"step": step, **{k: float(v) for k, v in values.items()}, "ema": self.ema})

    def first_ema(self, window: int = 10) -> float:
        vals = [r["total"] if "total" in r else r["ema"] for r in self.rows[:window]]
        return sum(vals) / len(vals)

    def last_ema(self) -> float:
        return float(self.ema)

    def write_csv(self, path):
        if not self.rows:
            return
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(self.rows[0]))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in r.items()})


def cosine_lr(step: int, total: int, base: float, warmup: int = 20) -> float:
    if step < warmup:
        return base * (step + 1) / warmup
    p = (step - warmup) / max(1, total - warmup)
    return base * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * min(1.0, p))))


def set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr
