"""Procedural multi-view scenes rendered by analytic ray casting.

A scene is a finite checkered ground plane with up to seven spheres resting on
it. Cameras follow orbit/dolly/arc trajectories looking at the scene center.
Everything downstream (codec, surrogate, adapter, diffusion) trains on these
sequences, so rendering returns exact depth, cameras and pointmaps alongside
the RGB frames.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraPose, pixels_to_world
from .io import read_blob, read_json, read_png, read_poses, write_blob, write_json, write_png, write_poses

log = logging.getLogger(__name__)

NUM_CLASSES = 8
LIGHT_DIR = np.array([0.4, 1.0, 0.3]) / np.linalg.norm([0.4, 1.0, 0.3])
AMBIENT = 0.3
TARGET = np.array([0.0, 0.4, 0.0])
PALETTES = (
    # warm
    [(0.85, 0.35, 0.25), (0.9, 0.7, 0.2), (0.75, 0.45, 0.6), (0.95, 0.55, 0.35)],
    # cool
    [(0.25, 0.5, 0.85), (0.3, 0.75, 0.55), (0.55, 0.4, 0.85), (0.2, 0.7, 0.8)],
)


class SceneError(ValueError):
    pass


@dataclass
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass
class GroundPlane:
    height: float = 0.0
    color_a: tuple = (0.75, 0.72, 0.65)
    color_b: tuple = (0.55, 0.55, 0.6)
    scale: float = 1.0
    extent: float = 2.6


@dataclass
class SceneSpec:
    seed: int
    spheres: list
    plane: GroundPlane = field(default_factory=GroundPlane)
    descriptor_class: int = 0
    num_classes: int = NUM_CLASSES

    def validate(self):
        count = len(self.spheres) + 1
        if not 1 <= count <= 8:
            raise SceneError(f"object count {count} outside [1, 8]")
        if any(s.radius <= 0 for s in self.spheres):
            raise SceneError("sphere radii must be positive")
        if not 0 <= self.descriptor_class < self.num_classes:
            raise SceneError("descriptor_class out of range")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            seed=d["seed"],
            spheres=[Sphere(tuple(s["center"]), s["radius"], tuple(s["albedo"])) for s in d["spheres"]],
            plane=GroundPlane(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["plane"].items()}),
            descriptor_class=d["descriptor_class"],
            num_classes=d.get("num_classes", NUM_CLASSES),
        )


@dataclass
class Trajectory:
    kind: str  # orbit | dolly | arc
    radius: float
    height: float
    angular_span: float
    start_angle: float = 0.0
    frame_count: int = 9
    fov: float = math.radians(60.0)

    def centers(self) -> np.ndarray:
        s = np.linspace(0.0, 1.0, self.frame_count)
        if self.kind == "orbit":
            ang = self.start_angle + self.angular_span * s
            r = np.full_like(s, self.radius)
            h = np.full_like(s, self.height)
        elif self.kind == "arc":
            ang = self.start_angle + self.angular_span * s
            r = self.radius * (1.0 - 0.2 * s)
            h = self.height * (1.0 + 0.25 * s)
        elif self.kind == "dolly":
            ang = self.start_angle + 0.15 * self.angular_span * s
            r = self.radius * (1.0 - 0.3 * s)
            h = np.full_like(s, self.height)
        else:
            raise SceneError(f"unknown trajectory kind {self.kind!r}")
        return np.stack([r * np.sin(ang), h, r * np.cos(ang)], axis=1)

    def cameras(self) -> list[CameraPose]:
        return [look_at(c, TARGET, self.fov) for c in self.centers()]


@dataclass
class RenderedSequence:
    images: np.ndarray  # N,H,W,3 in [0,1]
    depths: np.ndarray  # N,H,W
    cameras: list  # CameraPose, first camera = identity
    pointmaps: np.ndarray  # N,H,W,3 in the first-camera frame
    validity: np.ndarray  # N,H,W bool
    albedo: np.ndarray | None = None
    descriptor_class: int = 0

    @property
    def camera_vectors(self) -> np.ndarray:
        return np.stack([c.to_vector() for c in self.cameras])

    def check(self, tol=1e-5):
        """Unprojection consistency and depth positivity; raises on failure."""
        H, W = self.depths.shape[1:]
        for i, cam in enumerate(self.cameras):
            valid = self.validity[i]
            if np.any(self.depths[i][valid] <= 0):
                raise SceneError(f"view {i}: non-positive depth at a valid pixel")
            pts = pixels_to_world(self.depths[i], cam, (H, W))
            err = np.abs(pts - self.pointmaps[i])[valid]
            if err.size and err.max() > tol:
                raise SceneError(f"view {i}: unprojection mismatch {err.max():.3g}")


def look_at(eye, target, fov, up=(0.0, 1.0, 0.0)) -> CameraPose:
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    R = np.stack([right, down, f], axis=1)
    return CameraPose.from_matrix(R, eye, (fov, fov))


def sample_scene_spec(rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    cls = int(rng.integers(NUM_CLASSES))
    n_spheres = 1 + cls % 4
    palette = PALETTES[cls // 4]
    spheres = []
    tries = 0
    while len(spheres) < n_spheres:
        tries += 1
        if tries > 500:
            raise SceneError("could not place spheres")
        r = float(rng.uniform(0.35, 0.7))
        c = np.array([rng.uniform(-1.3, 1.3), r, rng.uniform(-1.3, 1.3)])
        if any(np.linalg.norm(c - np.array(s.center)) < r + s.radius + 0.05 for s in spheres):
            continue
        albedo = np.array(palette[len(spheres) % len(palette)]) * rng.uniform(0.85, 1.0)
        spheres.append(Sphere(tuple(float(v) for v in c), r, tuple(float(v) for v in albedo)))
    checker_scale = float(rng.uniform(0.9, 1.3))
    spec = SceneSpec(seed=seed, spheres=spheres, plane=GroundPlane(scale=checker_scale), descriptor_class=cls)
    spec.validate()
    return spec


def sample_trajectory(rng: np.random.Generator, frame_count: int = 9) -> Trajectory:
    kind = ("orbit", "dolly", "arc")[int(rng.integers(3))]
    return Trajectory(
        kind=kind,
        radius=float(rng.uniform(3.0, 3.8)),
        height=float(rng.uniform(1.4, 2.4)),
        angular_span=float(rng.uniform(0.35, 0.7)) * (1 if rng.random() < 0.5 else -1),
        start_angle=float(rng.uniform(0, 2 * np.pi)),
        frame_count=frame_count,
    )


def _check_cameras(spec: SceneSpec, cams: list[CameraPose]):
    centers = np.stack([c.translation for c in cams])
    if np.any(np.linalg.norm(np.diff(centers, axis=0), axis=1) <= 0):
        raise SceneError("consecutive cameras coincide")
    for c in centers:
        if c[1] <= spec.plane.height:
            raise SceneError("camera below the ground plane")
        for s in spec.spheres:
            if np.linalg.norm(c - np.array(s.center)) <= s.radius:
                raise SceneError("camera inside an object")


def _cast(spec: SceneSpec, origin, dirs):
    """Closest hit along unnormalized rays; returns (t, normal, albedo, hit)."""
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    a = np.sum(dirs * dirs, axis=1)
    for s in spec.spheres:
        c = np.array(s.center)
        oc = origin - c
        b = 2.0 * dirs @ oc
        cc = oc @ oc - s.radius**2
        disc = b * b - 4 * a * cc
        ok = disc >= 0
        t = np.full(n, np.inf)
        t[ok] = (-b[ok] - np.sqrt(disc[ok])) / (2 * a[ok])
        closer = ok & (t > 1e-9) & (t < t_best)
        t_best[closer] = t[closer]
        p = origin + t[closer, None] * dirs[closer]
        normal[closer] = (p - c) / s.radius
        albedo[closer] = s.albedo
    pl = spec.plane
    dy = dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (pl.height - origin[1]) / dy
    p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    inside = (np.abs(p[:, 0]) <= pl.extent) & (np.abs(p[:, 2]) <= pl.extent)
    closer = (dy < 0) & (t > 1e-9) & (t < t_best) & inside
    t_best[closer] = t[closer]
    normal[closer] = (0.0, 1.0, 0.0)
    parity = (np.floor(p[closer, 0] / pl.scale) + np.floor(p[closer, 2] / pl.scale)) % 2
    albedo[closer] = np.where(parity[:, None] == 0, np.array(pl.color_a), np.array(pl.color_b))
    hit = np.isfinite(t_best)
    return t_best, normal, albedo, hit


def albedo_at(spec: SceneSpec, points) -> np.ndarray:
    """Surface albedo at world points lying on the scene surfaces."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros_like(pts)
    best = np.full(len(pts), np.inf)
    for s in spec.spheres:
        d = np.abs(np.linalg.norm(pts - np.array(s.center), axis=1) - s.radius)
        m = d < best
        best[m] = d[m]
        out[m] = s.albedo
    pl = spec.plane
    d = np.abs(pts[:, 1] - pl.height)
    m = d < best
    parity = (np.floor(pts[m, 0] / pl.scale) + np.floor(pts[m, 2] / pl.scale)) % 2
    out[m] = np.where(parity[:, None] == 0, np.array(pl.color_a), np.array(pl.color_b))
    return out


def render_sequence(spec: SceneSpec, traj: Trajectory, resolution=(64, 64)) -> RenderedSequence:
    """Render RGB, z-depth, cameras and pointmaps, all in the first-camera frame."""
    spec.validate()
    H, W = resolution
    world_cams = traj.cameras()
    _check_cameras(spec, world_cams)
    anchor = world_cams[0]
    R0, t0 = anchor.rotation, anchor.translation
    N = len(world_cams)
    images = np.zeros((N, H, W, 3))
    albedos = np.zeros((N, H, W, 3))
    depths = np.zeros((N, H, W))
    pointmaps = np.zeros((N, H, W, 3))
    validity = np.zeros((N, H, W), bool)
    cams = []
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    for i, cam in enumerate(world_cams):
        K = cam.intrinsics((H, W))
        d_cam = np.stack([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], np.ones_like(u)], -1).reshape(-1, 3)
        d_world = d_cam @ cam.rotation.T
        t, normal, albedo, hit = _cast(spec, cam.translation, d_world)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, None)
        sky_mix = np.clip(0.5 - 0.5 * d_world[:, 1] / np.linalg.norm(d_world, axis=1), 0, 1)[:, None]
        sky = (1 - sky_mix) * np.array([0.55, 0.7, 0.95]) + sky_mix * np.array([0.85, 0.9, 1.0])
        rgb = np.where(hit[:, None], albedo * shade[:, None], sky)
        rel = cam.relative_to(anchor)
        depth = np.where(hit, t, 0.0).reshape(H, W)
        images[i] = rgb.reshape(H, W, 3)
        albedos[i] = albedo.reshape(H, W, 3)
        depths[i] = depth
        validity[i] = hit.reshape(H, W)
        world_pts = cam.translation + np.where(hit, t, 0.0)[:, None] * d_world
        pointmaps[i] = ((world_pts - t0) @ R0).reshape(H, W, 3)
        pointmaps[i][~validity[i]] = 0.0
        cams.append(rel)
    seq = RenderedSequence(
        images=np.clip(images, 0, 1),
        depths=depths,
        cameras=cams,
        pointmaps=pointmaps,
        validity=validity,
        albedo=albedos,
        descriptor_class=spec.descriptor_class,
    )
    return seq


def anchor_pose(traj: Trajectory) -> CameraPose:
    """World pose of the first camera (maps first-camera coordinates to scene coordinates)."""
    return traj.cameras()[0]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def split_counts(count: int) -> tuple[int, int]:
    n_train = max(1, int(math.floor(0.9 * count + 0.5)))
    return n_train, count - n_train


def sample_scene(seed: int, index: int, frame_count: int):
    """Spec and trajectory for scene ``index``; resamples until the cameras are valid."""
    ss = np.random.SeedSequence([seed, index])
    rng = np.random.default_rng(ss)
    for _ in range(100):
        spec = sample_scene_spec(rng, seed=int(ss.generate_state(1)[0]))
        traj = sample_trajectory(rng, frame_count)
        try:
            _check_cameras(spec, traj.cameras())
        except SceneError:
            continue
        return spec, traj
    raise SceneError(f"no valid camera path for scene {index}")


def make_dataset(root, count: int, seed: int = 0, resolution=(64, 64), frame_count: int = 9) -> "SceneDataset":
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    n_train, n_test = split_counts(count)
    scenes = []
    for idx in range(count):
        spec, traj = sample_scene(seed, idx, frame_count)
        seq = render_sequence(spec, traj, resolution)
        seq.check()
        sid = f"scene_{idx:04d}"
        write_sequence(root / sid, seq, spec, traj)
        scenes.append({"id": sid, "split": "train" if idx < n_train else "test", "descriptor_class": spec.descriptor_class})
    warning = None
    if n_test == 0:
        warning = "no test scenes: count too small for a 90/10 split"
        log.warning(warning)
    manifest = {
        "version": 1,
        "seed": seed,
        "count": count,
        "resolution": list(resolution),
        "frame_count": frame_count,
        "num_classes": NUM_CLASSES,
        "scenes": scenes,
        "split": {
            "train": [s["id"] for s in scenes if s["split"] == "train"],
            "test": [s["id"] for s in scenes if s["split"] == "test"],
        },
        "warning": warning,
    }
    write_json(root / "manifest.json", manifest)
    return SceneDataset(root)


def write_sequence(scene_dir, seq: RenderedSequence, spec: SceneSpec | None = None, traj: Trajectory | None = None):
    scene_dir = Path(scene_dir)
    (scene_dir / "frames").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(seq.images):
        write_png(scene_dir / "frames" / f"{i:03d}.png", img)
    write_blob(scene_dir / "depth.f32", seq.depths)
    write_blob(scene_dir / "pointmaps.f32", seq.pointmaps)
    write_blob(scene_dir / "validity.u8", seq.validity, dtype="u1")
    write_poses(scene_dir / "poses.json", seq.cameras)
    meta = {"descriptor_class": seq.descriptor_class}
    if spec is not None:
        meta["spec"] = spec.to_dict()
    if traj is not None:
        meta["trajectory"] = asdict(traj)
    write_json(scene_dir / "scene.json", meta)


def load_sequence(scene_dir) -> RenderedSequence:
    scene_dir = Path(scene_dir)
    frames = sorted((scene_dir / "frames").glob("*.png"))
    meta = read_json(scene_dir / "scene.json")
    return RenderedSequence(
        images=np.stack([read_png(f) for f in frames]),
        depths=read_blob(scene_dir / "depth.f32").astype(np.float64),
        cameras=read_poses(scene_dir / "poses.json"),
        pointmaps=read_blob(scene_dir / "pointmaps.f32").astype(np.float64),
        validity=read_blob(scene_dir / "validity.u8").astype(bool),
        descriptor_class=int(meta["descriptor_class"]),
    )


class SceneDataset:
    """Read-only view over a directory written by :func:`make_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"{self.root} is not a dataset (no manifest.json)")
        self.manifest = read_json(path)
        self._cache: dict[str, RenderedSequence] = {}

    @property
    def train_ids(self) -> list[str]:
        return list(self.manifest["split"]["train"])

    @property
    def test_ids(self) -> list[str]:
        return list(self.manifest["split"]["test"])

    @property
    def warning(self):
        return self.manifest.get("warning")

    def load(self, scene_id: str) -> RenderedSequence:
        if scene_id not in self._cache:
            self._cache[scene_id] = load_sequence(self.root / scene_id)
        return self._cache[scene_id]

    def scene_spec(self, scene_id: str):
        meta = read_json(self.root / scene_id / "scene.json")
        return SceneSpec.from_dict(meta["spec"]), Trajectory(**meta["trajectory"])
