"""Joint appearance/geometry latent diffusion.

Z = [A; G] concatenated along width and denoised by one transformer under
rectified flow. The condition latent carries the encoded (masked) condition
frames plus a 4-channel frame mask on the appearance half; the geometry half
of the condition is all zeros. Both halves share rotary positions, so only
content tells them apart.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import TEMPORAL_STRIDE, LossLog, ShapeLawError, check_finite, cosine_lr, latent_frame_groups, set_lr

log = logging.getLogger(__name__)

MODES = ("first-frame", "first+last", "all-frames")
MASK_CHANNELS = 4
DESCRIPTOR_DROP = 0.2
CAMERA_DROP = 0.5


class ConditionError(ValueError):
    pass


class GuidanceUnavailableError(RuntimeError):
    pass


# -- joint latent --------------------------------------------------------


def make_joint_latent(A, G):
    """(..., n, h, w, c) x 2 -> (..., n, h, 2w, c)."""
    if A.shape != G.shape:
        raise ShapeLawError(f"appearance {tuple(A.shape)} and geometry {tuple(G.shape)} latents differ in shape")
    return torch.cat([A, G], dim=-2)


def split_joint_latent(Z):
    w2 = Z.shape[-2]
    if w2 % 2:
        raise ShapeLawError(f"joint width {w2} is odd")
    return Z[..., : w2 // 2, :], Z[..., w2 // 2 :, :]


def model_input_channels(c: int) -> int:
    """Noised latent (c) plus condition latent (c + 4)."""
    return c + c + MASK_CHANNELS


# -- conditions ----------------------------------------------------------


def mode_frames(mode: str, num_frames: int) -> list[int]:
    if mode == "first-frame":
        return [0]
    if mode == "first+last":
        return sorted({0, num_frames - 1})
    if mode == "all-frames":
        return list(range(num_frames))
    raise ConditionError(f"unknown condition mode {mode!r}")


@dataclass
class ConditionPack:
    mode: str
    images: np.ndarray  # N,H,W,3 with missing frames zeroed
    mask: np.ndarray  # N,H,W,1 in {0,1}
    cameras: np.ndarray | None = None  # N,9
    descriptor: int = 0
    drop_descriptor: bool = False
    drop_camera: bool = False

    def validate(self):
        N = self.images.shape[0]
        want = np.zeros(N, dtype=bool)
        want[mode_frames(self.mode, N)] = True
        m = self.mask[..., 0]
        if not np.all((m == 0) | (m == 1)):
            raise ConditionError("mask must be binary")
        per_frame = m.reshape(N, -1)
        if not (np.all(per_frame[want] == 1) and np.all(per_frame[~want] == 0)):
            raise ConditionError(f"mask does not match mode {self.mode!r}")
        if np.any(self.images[~want] != 0):
            raise ConditionError("condition images must be zero wherever the mask is zero")
        if self.cameras is not None and not np.all(np.isfinite(self.cameras)):
            raise ConditionError("non-finite camera values")
        return self

    @property
    def cameras_used(self):
        return None if self.drop_camera else self.cameras


def make_condition_pack(images, mode, cameras=None, descriptor=0, drop_descriptor=False, drop_camera=False) -> ConditionPack:
    images = np.asarray(images, dtype=np.float32)
    N, H, W, _ = images.shape
    keep = np.zeros((N, 1, 1, 1), dtype=np.float32)
    keep[mode_frames(mode, N)] = 1.0
    mask = np.broadcast_to(keep, (N, H, W, 1)).copy()
    return ConditionPack(
        mode, images * keep, mask, None if cameras is None else np.asarray(cameras, dtype=np.float64),
        int(descriptor), bool(drop_descriptor), bool(drop_camera or cameras is None),
    ).validate()


def latent_mask(mask, spatial: int = 8):
    """N x H x W x 1 pixel mask -> n x h x w x 4 latent mask.

    Channel j of latent frame i holds the bit of the j-th input frame in that
    frame's temporal group; latent frame 0 repeats frame 0's bit. Spatial
    reduction is a max over each spatial x spatial block.
    """
    m = torch.as_tensor(np.asarray(mask, dtype=np.float32))[..., 0]
    N, H, W = m.shape
    if H % spatial or W % spatial:
        raise ShapeLawError(f"mask resolution {H}x{W} not divisible by {spatial}")
    pooled = F.max_pool2d(m[:, None], spatial)[:, 0]  # N, h, w
    frames = []
    for group in latent_frame_groups(N):
        idx = group * MASK_CHANNELS if len(group) == 1 else group
        frames.append(torch.stack([pooled[i] for i in idx], dim=-1))
    return torch.stack(frames)


@torch.no_grad()
def build_condition(pack: ConditionPack, codec):
    """Z_cond = [A_cond (+) M_a ; 0 (+) 0], shape n x h x 2w x (c + 4)."""
    pack.validate()
    images = torch.from_numpy(np.asarray(pack.images, dtype=np.float32))[None]
    A_cond = codec.encode(images)[0][0]
    M_a = latent_mask(pack.mask).to(A_cond.dtype)
    # latent frames with no provided input frame carry no appearance information
    A_cond = A_cond * M_a.amax(dim=-1, keepdim=True)
    left = torch.cat([A_cond, M_a], dim=-1)
    return torch.cat([left, torch.zeros_like(left)], dim=-2)


def draw_condition_flags(rng: np.random.Generator):
    """(mode, drop_descriptor, drop_camera) for one training example."""
    mode = MODES[int(rng.integers(3))]
    drop_descriptor = bool(rng.random() < DESCRIPTOR_DROP)
    drop_camera = bool(rng.random() < CAMERA_DROP)
    return mode, drop_descriptor, drop_camera


def sample_training_condition(rng: np.random.Generator, images, cameras=None, descriptor=0) -> ConditionPack:
    mode, drop_d, drop_c = draw_condition_flags(rng)
    return make_condition_pack(images, mode, cameras, descriptor, drop_d, drop_c)


# -- rotary positions ----------------------------------------------------


def rope_positions(n: int, h: int, w_double: int) -> np.ndarray:
    """(n, h, w_double, 3) integer (f, y, x) positions; the right half reuses the left half's x."""
    if w_double % 2:
        raise ShapeLawError(f"joint width {w_double} must be even")
    w = w_double // 2
    f, y, x = np.meshgrid(np.arange(n), np.arange(h), np.arange(w_double), indexing="ij")
    return np.stack([f, y, x % w], axis=-1)


def _axis_dims(head_dim: int) -> tuple[int, int, int]:
    # spatial axes get equal even shares, time takes the rest
    s = 2 * (head_dim // 6)
    return head_dim - 2 * s, s, s


def rope_angles(positions, head_dim: int, theta: float = 10000.0):
    """positions (T, 3) -> angles (T, head_dim / 2)."""
    pos = torch.as_tensor(positions, dtype=torch.float64)
    parts = []
    for axis, d in enumerate(_axis_dims(head_dim)):
        if d == 0:
            continue
        freqs = theta ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
        parts.append(pos[:, axis : axis + 1] * freqs[None])
    return torch.cat(parts, dim=-1)


def apply_rope(x, cos, sin):
    """x (..., T, d) rotated pairwise by angles given as cos/sin (T, d/2)."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


# -- model ---------------------------------------------------------------


@dataclass
class DiffusionConfig:
    latent_channels: int = 8
    latent_grid: int = 8
    dim: int = 128
    depth: int = 6
    heads: int = 4
    patch: int = 2
    num_classes: int = 8
    trained_with_descriptor_drop: bool = True

    @property
    def in_channels(self) -> int:
        return model_input_channels(self.latent_channels)


def timestep_embedding(t, dim: int):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class CameraEmbedding(nn.Module):
    """Per-frame 9-vector -> model width; a learned null vector replaces dropped cameras."""

    def __init__(self, dim: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(9, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.null = nn.Parameter(torch.zeros(dim))
        self.group = nn.Linear(TEMPORAL_STRIDE * dim, dim)

    def per_frame(self, cameras, drop):
        """cameras (B, N, 9) or None, drop (B,) bool -> (B, N, D)."""
        if cameras is None:
            raise ConditionError("per-frame camera embedding needs cameras (use drop for the null embedding)")
        if not torch.isfinite(cameras).all():
            raise ConditionError("non-finite camera values")
        sign = torch.where(cameras[..., :1] < 0, -1.0, 1.0).to(cameras.dtype)
        canon = torch.cat([cameras[..., :4] * sign, cameras[..., 4:]], dim=-1)
        emb = self.mlp(canon)
        drop = torch.as_tensor(drop, dtype=torch.bool).reshape(-1, 1, 1)
        return torch.where(drop, self.null.to(emb.dtype).expand_as(emb), emb)

    def forward(self, cameras, drop, num_frames: int, batch: int, dtype=torch.float32):
        """Latent-frame embeddings (B, n, D)."""
        if cameras is None:
            emb = self.null.to(dtype).expand(batch, num_frames, -1)
        else:
            emb = self.per_frame(cameras.to(dtype), drop)
        out = []
        for group in latent_frame_groups(num_frames):
            idx = group * TEMPORAL_STRIDE if len(group) == 1 else group
            out.append(self.group(torch.cat([emb[:, i] for i in idx], dim=-1)))
        return torch.stack(out, dim=1)


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(approximate="tanh"), nn.Linear(4 * dim, dim))
        self.ada = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.ada.weight)
        nn.init.zeros_(self.ada.bias)

    def qk(self, x, cond, cos, sin):
        B, T, D = x.shape
        shift, scale = self.ada(F.silu(cond)).chunk(6, dim=-1)[:2]
        h = self.norm1(x) * (1 + scale) + shift
        q, k, v = self.qkv(h).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        return apply_rope(q, cos, sin), apply_rope(k, cos, sin), v

    def attention_logits(self, x, cond, cos, sin):
        q, k, _ = self.qk(x, cond, cos, sin)
        return q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])

    def forward(self, x, cond, cos, sin):
        B, T, D = x.shape
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(F.silu(cond)).chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sc1) + sh1
        q, k, v = self.qkv(h).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        a = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(B, T, D)
        x = x + g1 * self.proj(a)
        return x + g2 * self.mlp(self.norm2(x) * (1 + sc2) + sh2)


class JointDiT(nn.Module):
    def __init__(self, config: DiffusionConfig | None = None):
        super().__init__()
        cfg = self.config = config or DiffusionConfig()
        D, p = cfg.dim, cfg.patch
        self.embed = nn.Linear(cfg.in_channels * p * p, D)
        self.t_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.descriptors = nn.Embedding(cfg.num_classes + 1, D)
        self.camera = CameraEmbedding(D)
        self.blocks = nn.ModuleList(DiTBlock(D, cfg.heads) for _ in range(cfg.depth))
        self.norm_out = nn.LayerNorm(D, elementwise_affine=False)
        self.ada_out = nn.Linear(D, 2 * D)
        self.out = nn.Linear(D, cfg.latent_channels * p * p)
        for m in (self.ada_out, self.out):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    @property
    def null_descriptor(self) -> int:
        return self.config.num_classes

    def _patchify(self, z):
        B, n, h, w2, C = z.shape
        p = self.config.patch
        if h % p or w2 % (2 * p):
            raise ShapeLawError(f"latent {h}x{w2} not divisible by patch {p} per half")
        z = z.reshape(B, n, h // p, p, w2 // p, p, C).permute(0, 1, 2, 4, 3, 5, 6)
        return z.reshape(B, n * (h // p) * (w2 // p), p * p * C)

    def _unpatchify(self, x, n, h, w2):
        B = x.shape[0]
        p, c = self.config.patch, self.config.latent_channels
        x = x.reshape(B, n, h // p, w2 // p, p, p, c).permute(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(B, n, h, w2, c)

    def rope(self, n, h, w2, dtype):
        p = self.config.patch
        pos = rope_positions(n, h // p, w2 // p).reshape(-1, 3)
        ang = rope_angles(pos, self.config.dim // self.config.heads)
        return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)

    def conditioning(self, t, descriptor, cameras, camera_drop, n, B, dtype):
        """Per-latent-frame conditioning vectors (B, n, D)."""
        N = 1 + TEMPORAL_STRIDE * (n - 1)
        temb = self.t_mlp(timestep_embedding(t.to(dtype), self.config.dim))
        demb = self.descriptors(torch.as_tensor(descriptor, dtype=torch.long).reshape(B)).to(dtype)
        if cameras is not None:
            cameras = torch.as_tensor(cameras, dtype=dtype)
            if cameras.shape[1] != N:
                raise ConditionError(f"{cameras.shape[1]} cameras for {n} latent frames (expected {N})")
        drop = torch.ones(B, dtype=torch.bool) if camera_drop is None else torch.as_tensor(camera_drop, dtype=torch.bool).reshape(B)
        cemb = self.camera(cameras, drop, N, B, dtype)
        return (temb + demb)[:, None] + cemb

    def tokens(self, z_t, z_cond, t, descriptor, cameras=None, camera_drop=None):
        B, n, h, w2, _ = z_t.shape
        z_in = torch.cat([z_t, z_cond.expand(B, *z_cond.shape[-4:])], dim=-1)
        if z_in.shape[-1] != self.config.in_channels:
            raise ShapeLawError(f"model input has {z_in.shape[-1]} channels, expected {self.config.in_channels}")
        x = self.embed(self._patchify(z_in))
        cond = self.conditioning(t, descriptor, cameras, camera_drop, n, B, x.dtype)
        per_frame = x.shape[1] // n
        cond = cond.repeat_interleave(per_frame, dim=1)
        cos, sin = self.rope(n, h, w2, x.dtype)
        return x, cond, cos, sin

    def forward(self, z_t, z_cond, t, descriptor, cameras=None, camera_drop=None):
        """Velocity prediction for noised joint latents z_t (B, n, h, 2w, c)."""
        B, n, h, w2, _ = z_t.shape
        x, cond, cos, sin = self.tokens(z_t, z_cond, t, descriptor, cameras, camera_drop)
        for blk in self.blocks:
            x = blk(x, cond, cos, sin)
        shift, scale = self.ada_out(F.silu(cond)).chunk(2, dim=-1)
        x = self.out(self.norm_out(x) * (1 + scale) + shift)
        return self._unpatchify(x, n, h, w2)


# -- objective and sampler -----------------------------------------------


def noised_latent(Z0, noise, t):
    tt = t.reshape(-1, *([1] * (Z0.ndim - 1))).to(Z0.dtype)
    return (1 - tt) * Z0 + tt * noise


def flow_matching_loss(model, Z0, z_cond, t, noise, descriptor, cameras=None, camera_drop=None, weight=None):
    """mean || v_hat - (noise - Z0) ||^2, optionally restricted by a broadcastable weight mask."""
    v_hat = model(noised_latent(Z0, noise, t), z_cond, t, descriptor, cameras, camera_drop)
    err = (v_hat - (noise - Z0)) ** 2
    if weight is None:
        loss = err.mean()
    else:
        w = torch.broadcast_to(weight.to(err.dtype), err.shape)
        loss = (err * w).sum() / w.sum()
    check_finite("flow matching loss", loss.detach())
    return loss


def geometry_weight(n, h, w2, c, include_geometry: bool):
    """Per-element loss weight; the right half is masked out for an RGB-only model."""
    w = torch.ones(1, n, h, w2, c)
    if not include_geometry:
        w[:, :, :, w2 // 2 :] = 0
    return w


def guided_velocity(model, z, z_cond, t, descriptor, cameras, camera_drop, cfg_scale: float):
    v_c = model(z, z_cond, t, descriptor, cameras, camera_drop)
    if cfg_scale == 1.0:
        return v_c
    null = torch.full_like(torch.as_tensor(descriptor, dtype=torch.long).reshape(-1), model.null_descriptor)
    v_u = model(z, z_cond, t, null, cameras, camera_drop)
    return v_u + cfg_scale * (v_c - v_u)


@torch.no_grad()
def sample(model, z_cond, descriptor, cameras=None, camera_drop=None, steps: int = 20, cfg_scale: float = 1.0, seed: int = 0):
    """Euler integration of the velocity field from t=1 (noise) to t=0. Returns (Z, A, G)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if cfg_scale != 1.0 and not model.config.trained_with_descriptor_drop:
        raise GuidanceUnavailableError("classifier-free guidance needs a model trained with descriptor drop")
    z_cond = z_cond if z_cond.ndim == 5 else z_cond[None]
    B = z_cond.shape[0]
    n, h, w2 = z_cond.shape[1:4]
    g = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    z = torch.randn((B, n, h, w2, model.config.latent_channels), generator=g, dtype=torch.float32).to(dtype)
    z_cond = z_cond.to(dtype)
    grid = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    for i in range(steps):
        t = torch.full((B,), float(grid[i]), dtype=dtype)
        v = guided_velocity(model, z, z_cond, t, descriptor, cameras, camera_drop, cfg_scale)
        z = z + float(grid[i + 1] - grid[i]) * v
    A, G = split_joint_latent(z)
    return z, A, G


def train_diffusion(
    examples,
    codec,
    steps: int = 1500,
    seed: int = 0,
    batch_size: int = 4,
    lr: float = 1e-3,
    include_geometry: bool = True,
    config: DiffusionConfig | None = None,
):
    """Train on precomputed examples.

    Each example is a dict with 'A' (n,h,w,c posterior mean), 'G' (same shape),
    'images' (N,H,W,3), 'cameras' (N,9) and 'descriptor'. With
    include_geometry=False the geometry half is zeroed and left out of the
    loss (the RGB-only model used by the two-stage baseline).
    Returns (model, LossLog).
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    n, h, w, c = examples[0]["A"].shape
    cfg = config or DiffusionConfig(latent_channels=c, latent_grid=h)
    model = JointDiT(cfg)
    Z0 = []
    for ex in examples:
        A = torch.as_tensor(ex["A"], dtype=torch.float32)
        G = torch.as_tensor(ex["G"], dtype=torch.float32) if include_geometry else torch.zeros_like(A)
        Z0.append(make_joint_latent(A, G))
    Z0 = torch.stack(Z0)
    cams = torch.from_numpy(np.stack([np.asarray(ex["cameras"], dtype=np.float32) for ex in examples]))
    desc = torch.tensor([int(ex["descriptor"]) for ex in examples])
    weight = geometry_weight(n, h, 2 * w, c, include_geometry)
    cond_cache: dict = {}

    def cond_for(i, mode):
        if (i, mode) not in cond_cache:
            cond_cache[(i, mode)] = build_condition(make_condition_pack(examples[i]["images"], mode), codec)
        return cond_cache[(i, mode)]

    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    history = LossLog()
    for step in range(steps):
        set_lr(opt, cosine_lr(step, steps, lr))
        idx = rng.integers(len(examples), size=min(batch_size, len(examples)))
        flags = [draw_condition_flags(rng) for _ in idx]
        z_cond = torch.stack([cond_for(int(i), f[0]) for i, f in zip(idx, flags)])
        d = torch.where(torch.tensor([f[1] for f in flags]), model.null_descriptor, desc[idx])
        cdrop = torch.tensor([f[2] for f in flags])
        t = torch.rand(len(idx), generator=g)
        noise = torch.randn(Z0[idx].shape, generator=g)
        loss = flow_matching_loss(model, Z0[idx], z_cond, t, noise, d, cams[idx], cdrop, weight)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        history.add(step, total=loss.item())
        if step % 200 == 0:
            log.info("diffusion step %d loss %.5f", step, loss.item())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, history


def diffusion_config_dict(model: JointDiT) -> dict:
    return asdict(model.config)
