"""Staged training, inference modes and result export.

Stages run in dependency order and are recorded in ``<run_dir>/manifest.json``
together with a hash of everything that determines their output. Re-running
a stage with the same hash is a no-op; a different hash over an existing
artifact is refused unless forced.
"""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .appearance_codec import AppearanceCodec, CodecConfig, LatentPriorStats, fit_appearance_prior, pretrain_codec
from .checkpoint import config_hash, load_checkpoint, module_hash, save_checkpoint, seed_everything
from .geometry import CameraPose, PointCloud, pixels_to_world, unproject_depth
from .geometry_adapter import AdapterConfig, GeometryAdapter, alignment_gate, train_adapter
from .io import read_json, write_blob, write_json, write_ply, write_png, write_poses
from .joint_diffusion import DiffusionConfig, JointDiT, build_condition, make_condition_pack, sample, train_diffusion
from .recon_surrogate import ReconSurrogate, SurrogateConfig, pretrain_surrogate, surrogate_from_config
from .scene_synth import SceneDataset

log = logging.getLogger(__name__)

STAGES = ("codec", "surrogate", "prior", "adapter", "adapter-nokl", "diffusion", "rgb-diffusion")
PREREQUISITES = {
    "codec": (),
    "surrogate": (),
    "prior": ("codec",),
    "adapter": ("surrogate", "prior"),
    "adapter-nokl": ("surrogate", "prior"),
    "diffusion": ("codec", "adapter"),
    "rgb-diffusion": ("codec",),
}
# pipeline order used by run_all; the ablation stages are appended
PIPELINE = ("codec", "surrogate", "prior", "adapter", "diffusion")
ABLATIONS = ("adapter-nokl", "rgb-diffusion")


class PipelineError(RuntimeError):
    pass


class MissingPrerequisiteError(PipelineError):
    pass


class ConfigHashMismatchError(PipelineError):
    pass


DEFAULT_CONFIG = {
    "data": {"root": "data/desk", "count": 9, "seed": 0, "resolution": 64, "frames": 9},
    "codec": {"latent_channels": 8, "base_channels": 32, "steps": 800, "lr": 2e-3, "batch_size": 2, "beta": 1e-6, "seed": 1},
    "surrogate": {"image_size": 64, "patch_size": 8, "dim": 64, "depth": 8, "heads": 4, "taps": [1, 3, 5, 7],
                  "head_features": 64, "steps": 800, "lr": 1e-3, "batch_size": 2, "seed": 2},
    "adapter": {"hidden": 128, "steps": 600, "lr": 1e-3, "batch_size": 2, "lambda_rec": 1.0, "lambda_kl": 0.02, "seed": 3},
    "adapter-nokl": {"lambda_kl": 0.0},
    "diffusion": {"dim": 128, "depth": 6, "heads": 4, "patch": 2, "steps": 1500, "lr": 1e-3, "batch_size": 4, "seed": 4},
    "rgb-diffusion": {},
    "sampler": {"steps": 20, "cfg_scale": 1.0, "seed": 0, "confidence_quantile": 0.05},
    "eval": {"sample_k": 2000},
    "run_dir": "runs/desk",
    "deterministic": True,
}


def deep_update(base: dict, overrides: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """'a.b=3' -> {'a': {'b': 3}}; the value is parsed as JSON when possible."""
    import json

    if "=" not in text:
        raise ValueError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def load(cls, path=None, overrides=()):
        values = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            values = deep_update(values, read_json(path))
        for o in overrides:
            values = deep_update(values, parse_override(o) if isinstance(o, str) else o)
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def stage_config(self, stage: str) -> dict:
        if stage == "adapter-nokl":
            return deep_update(self.values["adapter"], self.values["adapter-nokl"])
        if stage == "rgb-diffusion":
            return deep_update(self.values["diffusion"], self.values["rgb-diffusion"])
        if stage == "prior":
            return {}
        return dict(self.values[stage])

    def content(self) -> dict:
        """Everything except machine-local paths."""
        v = copy.deepcopy(self.values)
        v.pop("run_dir", None)
        v["data"].pop("root", None)
        return v

    @property
    def hash(self) -> str:
        return config_hash(self.content())

    @property
    def run_dir(self) -> Path:
        return Path(self.values["run_dir"])

    @property
    def data_root(self) -> Path:
        return Path(self.values["data"]["root"])


def data_config_for_hash(cfg: ExperimentConfig) -> dict:
    d = dict(cfg["data"])
    d.pop("root", None)
    return d


# -- manifest ------------------------------------------------------------


class Manifest:
    def __init__(self, run_dir):
        self.path = Path(run_dir) / "manifest.json"
        self.data = read_json(self.path) if self.path.exists() else {"stages": {}}

    def get(self, stage):
        return self.data["stages"].get(stage)

    def record(self, stage, entry):
        self.data["stages"][stage] = entry
        write_json(self.path, self.data)


def stage_hash(stage: str, cfg: ExperimentConfig, manifest: Manifest) -> str:
    upstream = {p: manifest.get(p)["config_hash"] for p in PREREQUISITES[stage]}
    return config_hash({"stage": stage, "config": cfg.stage_config(stage), "data": data_config_for_hash(cfg), "upstream": upstream})


def ensure_dataset(cfg: ExperimentConfig) -> SceneDataset:
    root = cfg.data_root
    if not (root / "manifest.json").exists():
        raise MissingPrerequisiteError(f"dataset {root} not found; run synth-data first")
    ds = SceneDataset(root)
    d = cfg["data"]
    m = ds.manifest
    if (m["seed"], m["count"], m["frame_count"], m["resolution"][0]) != (d["seed"], d["count"], d["frames"], d["resolution"]):
        raise ConfigHashMismatchError(f"dataset at {root} was generated with different settings")
    return ds


# -- loading -------------------------------------------------------------


class Artifacts:
    """Lazy access to the frozen models of a run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.manifest = Manifest(cfg.run_dir)
        self._cache = {}

    def _entry(self, stage):
        e = self.manifest.get(stage)
        if e is None:
            raise MissingPrerequisiteError(f"stage {stage!r} has not been run in {self.cfg.run_dir}")
        return e

    def _ckpt(self, stage):
        e = self._entry(stage)
        return load_checkpoint(self.cfg.run_dir / e["artifact"])

    def _load(self, stage, build):
        if stage not in self._cache:
            state, mcfg, _ = self._ckpt(stage)
            model = build(mcfg)
            model.load_state_dict(state)
            model.eval()
            for p in model.parameters():
                p.requires_grad_(False)
            self._cache[stage] = model
        return self._cache[stage]

    def codec(self) -> AppearanceCodec:
        return self._load("codec", lambda c: AppearanceCodec(CodecConfig(**c)))

    def surrogate(self) -> ReconSurrogate:
        return self._load("surrogate", surrogate_from_config)

    def adapter(self, stage="adapter") -> GeometryAdapter:
        return self._load(stage, lambda c: GeometryAdapter(AdapterConfig(**c)))

    def diffusion(self, stage="diffusion") -> JointDiT:
        return self._load(stage, lambda c: JointDiT(DiffusionConfig(**c)))

    def prior(self) -> LatentPriorStats:
        return LatentPriorStats.from_dict(read_json(self.cfg.run_dir / self._entry("prior")["artifact"]))

    def stage_hash(self, stage) -> str:
        return self._entry(stage)["config_hash"]


# -- stages --------------------------------------------------------------


def _train_sequences(ds: SceneDataset):
    return [ds.load(s) for s in ds.train_ids]


def _model_config(stage, sc):
    if stage == "codec":
        return CodecConfig(sc["latent_channels"], sc["base_channels"])
    if stage == "surrogate":
        keys = ("image_size", "patch_size", "dim", "depth", "heads", "head_features")
        return SurrogateConfig(**{k: sc[k] for k in keys}, taps=tuple(sc["taps"]))
    raise KeyError(stage)


@torch.no_grad()
def appearance_latents(codec, sequences, chunk: int = 4):
    imgs = torch.from_numpy(np.stack([s.images for s in sequences]).astype(np.float32))
    return torch.cat([codec.encode(imgs[i : i + chunk])[0] for i in range(0, len(imgs), chunk)])


@torch.no_grad()
def geometry_latents(surrogate, adapter, sequences):
    out = []
    for s in sequences:
        tokens = surrogate.encode_views(torch.from_numpy(s.images[None].astype(np.float32)))
        out.append(adapter.encode(tokens)[0][0])
    return torch.stack(out)


def _execute(stage, cfg: ExperimentConfig, art: Artifacts, ds: SceneDataset):
    """Returns (module or dict, model_config dict, history LossLog or None, metrics dict)."""
    sc = cfg.stage_config(stage)
    seqs = _train_sequences(ds)
    if stage == "codec":
        codec, hist = pretrain_codec([s.images for s in seqs], sc["steps"], sc["beta"], sc["seed"], sc["batch_size"], sc["lr"], _model_config(stage, sc))
        lat = appearance_latents(codec, seqs)
        var = lat.reshape(-1, lat.shape[-1]).var(0, unbiased=False)
        with torch.no_grad():
            imgs = torch.from_numpy(np.stack([s.images for s in seqs]).astype(np.float32))
            rec = torch.cat([codec.decode(lat[i : i + 4]) for i in range(0, len(lat), 4)])
            mse = ((rec - imgs) ** 2).mean(dim=(1, 2, 3, 4)).double()
        metrics = {
            "train_psnr": [float(v) for v in (10 * torch.log10(1 / mse))],
            "latent_var": [float(v) for v in var],
            "first_loss": hist.first_ema(), "last_loss": hist.last_ema(),
        }
        return codec, {"latent_channels": codec.config.latent_channels, "base_channels": codec.config.base_channels}, hist, metrics
    if stage == "surrogate":
        model, hist = pretrain_surrogate(seqs, sc["steps"], sc["seed"], sc["batch_size"], sc["lr"], _model_config(stage, sc))
        metrics = {"first_loss": hist.first_ema(), "last_loss": hist.last_ema(), **surrogate_depth_errors(model, ds)}
        from .recon_surrogate import surrogate_config_dict

        return model, surrogate_config_dict(model), hist, metrics
    if stage == "prior":
        prior = fit_appearance_prior(appearance_latents(art.codec(), seqs))
        return prior.to_dict(), {}, None, {"count": prior.count}
    if stage in ("adapter", "adapter-nokl"):
        prior = art.prior()
        surrogate = art.surrogate()
        scfg = surrogate.config
        acfg = AdapterConfig(levels=scfg.levels, token_dim=scfg.dim, token_grid=scfg.grid,
                             latent_grid=scfg.image_size // 8, latent_channels=len(prior.mean), hidden=sc["hidden"])
        adapter, hist, reports = train_adapter(surrogate, prior, seqs, sc["steps"], sc["lambda_rec"], sc["lambda_kl"],
                                               sc["seed"], sc["batch_size"], sc["lr"], acfg)
        G = geometry_latents(surrogate, adapter, seqs)
        gate = alignment_gate(G, prior)
        metrics = {"first_loss": hist.first_ema(), "last_loss": hist.last_ema(), "alignment": gate.to_dict(),
                   "token_relative_error": token_relative_error(surrogate, adapter, seqs)}
        from dataclasses import asdict

        return adapter, asdict(acfg), hist, metrics
    if stage in ("diffusion", "rgb-diffusion"):
        codec = art.codec()
        include_geometry = stage == "diffusion"
        A = appearance_latents(codec, seqs)
        if include_geometry:
            G = geometry_latents(art.surrogate(), art.adapter(), seqs)
        examples = []
        for i, s in enumerate(seqs):
            examples.append({"A": A[i], "G": G[i] if include_geometry else torch.zeros_like(A[i]), "images": s.images,
                             "cameras": s.camera_vectors, "descriptor": s.descriptor_class})
        n, h, w, c = A.shape[1:]
        dcfg = DiffusionConfig(latent_channels=c, latent_grid=h, dim=sc["dim"], depth=sc["depth"], heads=sc["heads"],
                               patch=sc["patch"], num_classes=int(ds.manifest["num_classes"]))
        model, hist = train_diffusion(examples, codec, sc["steps"], sc["seed"], sc["batch_size"], sc["lr"], include_geometry, dcfg)
        from dataclasses import asdict

        return model, asdict(dcfg), hist, {"first_loss": hist.first_ema(), "last_loss": hist.last_ema()}
    raise PipelineError(f"unknown stage {stage!r}")


def run_stage(stage: str, cfg: ExperimentConfig, force: bool = False) -> dict:
    """Run one stage; returns its manifest entry (status 'trained' or 'cached')."""
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    manifest = Manifest(cfg.run_dir)
    for pre in PREREQUISITES[stage]:
        e = manifest.get(pre)
        if e is None or not (cfg.run_dir / e["artifact"]).exists():
            raise MissingPrerequisiteError(f"stage {stage!r} needs stage {pre!r} to be run first")
    ds = ensure_dataset(cfg)
    h = stage_hash(stage, cfg, manifest)
    existing = manifest.get(stage)
    if existing is not None and (cfg.run_dir / existing["artifact"]).exists():
        if existing["config_hash"] == h:
            return {**existing, "status": "cached"}
        if not force:
            raise ConfigHashMismatchError(
                f"stage {stage!r} exists with config hash {existing['config_hash']}, current config hashes to {h}; use --force to retrain"
            )
    seed_everything(cfg.stage_config(stage).get("seed", 0), deterministic=cfg["deterministic"])
    art = Artifacts(cfg)
    before = {s: module_hash(getattr(art, s)()) for s in ("codec", "surrogate") if manifest.get(s) and s != stage}
    t0 = time.time()
    result, model_cfg, hist, metrics = _execute(stage, cfg, art, ds)
    elapsed = time.time() - t0
    for s, hv in before.items():
        if module_hash(getattr(art, s)()) != hv:
            raise PipelineError(f"stage {stage!r} mutated the frozen {s} parameters")
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    meta = {"stage": stage, "config_hash": h, "seed": cfg.stage_config(stage).get("seed")}
    if isinstance(result, dict):
        artifact = f"{stage}.json"
        write_json(cfg.run_dir / artifact, {**result, "config_hash": h})
        param_hash = config_hash(result)
    else:
        artifact = f"checkpoints/{stage}.ckpt"
        param_hash = save_checkpoint(cfg.run_dir / artifact, result.state_dict(), model_cfg, meta)
    if hist is not None:
        hist.write_csv(cfg.run_dir / "logs" / f"{stage}_loss.csv")
    entry = {"config_hash": h, "artifact": artifact, "param_hash": param_hash, "metrics": metrics,
             "loss_curve": f"logs/{stage}_loss.csv" if hist is not None else None, "seconds": round(elapsed, 1)}
    manifest.record(stage, entry)
    log.info("stage %s done in %.1fs", stage, elapsed)
    return {**entry, "status": "trained"}


def run_all(cfg: ExperimentConfig, stages=PIPELINE + ABLATIONS) -> dict:
    return {s: run_stage(s, cfg) for s in stages}


# -- diagnostics ---------------------------------------------------------


@torch.no_grad()
def surrogate_depth_errors(model, ds: SceneDataset) -> dict:
    """Relative depth MAE (mean |d - d_gt| / mean d_gt over valid pixels) per split."""
    out = {}
    for split, ids in (("train", ds.train_ids), ("test", ds.test_ids)):
        vals = []
        for sid in ids:
            s = ds.load(sid)
            pred = model(torch.from_numpy(s.images[None].astype(np.float32))).depths[0, ..., 0].double().numpy()
            v = s.validity
            vals.append(float(np.abs(pred - s.depths)[v].mean() / s.depths[v].mean()))
        out[f"{split}_depth_rel_mae"] = vals
    return out


@torch.no_grad()
def token_relative_error(surrogate, adapter, sequences) -> list[float]:
    """||V_hat - V||^2 / ||V - mean(V)||^2 per sequence, decoding the posterior mean."""
    out = []
    for s in sequences:
        V = surrogate.encode_views(torch.from_numpy(s.images[None].astype(np.float32)))
        V_hat = adapter.decode(adapter.encode(V)[0])
        out.append(float(((V_hat - V) ** 2).sum() / ((V - V.mean()) ** 2).sum()))
    return out


# -- inference -----------------------------------------------------------


@dataclass
class GenerationResult:
    frames: np.ndarray  # N,H,W,3
    depths: np.ndarray  # N,H,W
    cameras: np.ndarray  # N,9
    pointmaps: np.ndarray  # N,H,W,3 (head output)
    confidence: np.ndarray  # N,H,W
    validity: np.ndarray  # N,H,W bool
    cloud: PointCloud
    provenance: dict

    def check_unprojection(self) -> float:
        """Max deviation between the merged cloud and a fresh unprojection."""
        ref = merge_cloud(self.depths, self.cameras, self.validity, self.frames)
        if len(ref) != len(self.cloud):
            return float("inf")
        return float(np.max(np.abs(ref.points - self.cloud.points))) if len(ref) else 0.0


def merge_cloud(depths, cameras, validity, frames=None) -> PointCloud:
    N, H, W = depths.shape
    pts, cols = [], []
    for i in range(N):
        cam = CameraPose.from_vector(cameras[i])
        pts.append(unproject_depth(depths[i], cam, (H, W), validity[i]).points)
        if frames is not None:
            cols.append(frames[i][validity[i]])
    colors = np.concatenate(cols) if frames is not None else None
    return PointCloud(np.concatenate(pts), colors)


def confidence_validity(confidence, depths, quantile: float):
    """Drop the lowest-confidence fraction and any non-positive depth."""
    thr = np.quantile(confidence, quantile) if quantile > 0 else -np.inf
    return (confidence >= thr) & (depths > 0)


def _to_numpy(x):
    return x.detach().double().cpu().numpy()


def _geometry_result(frames, out, cfg, provenance) -> GenerationResult:
    frames = _to_numpy(frames)[0].astype(np.float32)
    depths = _to_numpy(out.depths)[0, ..., 0]
    cameras = _to_numpy(out.cameras)[0]
    conf = _to_numpy(out.confidence)[0]
    validity = confidence_validity(conf, depths, cfg["sampler"]["confidence_quantile"])
    cloud = merge_cloud(depths, cameras, validity, frames)
    return GenerationResult(frames, depths, cameras, _to_numpy(out.pointmaps)[0], conf, validity, cloud, provenance)


def _sampler_opts(cfg, overrides):
    s = dict(cfg["sampler"])
    s.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return s


def _condition_images(images, mode, num_frames):
    images = np.asarray(images, dtype=np.float32)
    if mode == "all-frames":
        if images.shape[0] != num_frames:
            raise ValueError(f"reconstruction needs {num_frames} frames, got {images.shape[0]}")
        return images
    full = np.zeros((num_frames, *images.shape[1:]), dtype=np.float32)
    need = 1 if mode == "first-frame" else 2
    if images.shape[0] != need:
        raise ValueError(f"mode {mode!r} takes {need} image(s), got {images.shape[0]}")
    full[0] = images[0]
    if need == 2:
        full[-1] = images[1]
    return full


def _check_cameras(cameras, num_frames):
    if cameras is None:
        return None
    cameras = np.asarray(cameras, dtype=np.float64)
    if cameras.shape != (num_frames, 9):
        raise ValueError(f"expected {num_frames} cameras, got array of shape {cameras.shape}")
    return cameras


def _sample_latents(art, stage, cfg, images, cameras, mode, descriptor, opts):
    N = cfg["data"]["frames"]
    pack = make_condition_pack(_condition_images(images, mode, N), mode, cameras, descriptor)
    model = art.diffusion(stage)
    z_cond = build_condition(pack, art.codec())
    cams = None if cameras is None else torch.from_numpy(np.asarray(cameras, dtype=np.float32))[None]
    _, A, G = sample(model, z_cond, torch.tensor([descriptor]), cams, torch.tensor([cameras is None]),
                     steps=opts["steps"], cfg_scale=opts["cfg_scale"], seed=opts["seed"])
    return A, G


def _provenance(art, cfg, stages, mode, opts, extra=None):
    return {
        "config_hash": cfg.hash,
        "stage_hashes": {s: art.stage_hash(s) for s in stages},
        "mode": mode,
        "seed": opts["seed"],
        "cfg_scale": opts["cfg_scale"],
        "sampler_steps": opts["steps"],
        **(extra or {}),
    }


def generate(art: Artifacts, images, cameras=None, mode="first-frame", descriptor=None, sampler=None, extra=None) -> GenerationResult:
    """1-view ('first-frame') or 2-view ('first+last') generation, optionally camera-conditioned."""
    cfg = art.cfg
    N = cfg["data"]["frames"]
    cameras = _check_cameras(cameras, N)
    opts = _sampler_opts(cfg, sampler)
    descriptor = art.diffusion().null_descriptor if descriptor is None else int(descriptor)
    A, G = _sample_latents(art, "diffusion", cfg, images, cameras, mode, descriptor, opts)
    with torch.no_grad():
        frames = art.codec().decode(A)
        out = art.surrogate().decode_tokens(art.adapter().decode(G))
    prov = _provenance(art, cfg, ("codec", "surrogate", "adapter", "diffusion"), mode, opts,
                       {"method": "joint", "descriptor": descriptor, "camera_conditioned": cameras is not None, **(extra or {})})
    return _geometry_result(frames, out, cfg, prov)


def reconstruct(art: Artifacts, images, descriptor=None, sampler=None, extra=None) -> GenerationResult:
    """All-frames conditioning without cameras."""
    return generate(art, images, None, "all-frames", descriptor, sampler, extra)


def two_stage_baseline(art: Artifacts, images, cameras=None, mode="first-frame", descriptor=None, sampler=None, extra=None) -> GenerationResult:
    """RGB-only diffusion, then the frozen surrogate on the generated frames."""
    cfg = art.cfg
    N = cfg["data"]["frames"]
    cameras = _check_cameras(cameras, N)
    opts = _sampler_opts(cfg, sampler)
    descriptor = art.diffusion("rgb-diffusion").null_descriptor if descriptor is None else int(descriptor)
    A, _ = _sample_latents(art, "rgb-diffusion", cfg, images, cameras, mode, descriptor, opts)
    with torch.no_grad():
        frames = art.codec().decode(A)
        out = art.surrogate()(frames)
    prov = _provenance(art, cfg, ("codec", "surrogate", "rgb-diffusion"), mode, opts,
                       {"method": "2-stage", "descriptor": descriptor, "camera_conditioned": cameras is not None, **(extra or {})})
    return _geometry_result(frames, out, cfg, prov)


def surrogate_reconstruction(art: Artifacts, images, extra=None) -> GenerationResult:
    """The frozen surrogate applied directly to real frames (reference for reconstruction quality)."""
    cfg = art.cfg
    with torch.no_grad():
        x = torch.from_numpy(np.asarray(images, dtype=np.float32))[None]
        out = art.surrogate()(x)
    opts = _sampler_opts(cfg, None)
    prov = _provenance(art, cfg, ("surrogate",), "surrogate", opts, {"method": "surrogate", **(extra or {})})
    return _geometry_result(x, out, cfg, prov)


def write_result(result: GenerationResult, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(result.frames):
        write_png(out_dir / "frames" / f"{i:03d}.png", f)
    write_blob(out_dir / "depth.f32", result.depths)
    write_blob(out_dir / "pointmaps.f32", result.pointmaps)
    write_blob(out_dir / "confidence.f32", result.confidence)
    write_blob(out_dir / "validity.u8", result.validity, dtype="u1")
    write_poses(out_dir / "poses.json", result.cameras)
    write_ply(out_dir / "cloud.ply", result.cloud)
    write_json(out_dir / "provenance.json", result.provenance)
    return out_dir


def gt_cloud(seq) -> PointCloud:
    """Ground-truth geometry: dataset pointmaps over valid pixels (first-camera frame)."""
    return PointCloud(seq.pointmaps[seq.validity], seq.images[seq.validity])


def dense_unprojection(depths, cameras):
    """N x H x W x 3 unprojection with each frame's camera (no masking)."""
    N, H, W = depths.shape
    return np.stack([pixels_to_world(depths[i], CameraPose.from_vector(cameras[i]), (H, W)) for i in range(N)])
