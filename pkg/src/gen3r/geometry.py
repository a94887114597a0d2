"""Camera model, unprojection, similarity alignment, sampling and point/pose metrics.

Everything here is plain numpy on immutable inputs. Cameras are camera-to-world
rigid transforms with an OpenCV-style frame (x right, y down, looking down +z)
and pinhole intrinsics derived from the field of view, principal point at the
image center.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

CAMERA_LAYOUT = ("qw", "qx", "qy", "qz", "tx", "ty", "tz", "fov_x", "fov_y")

# Below this size the nearest-neighbor query is a dense scan.
BRUTE_FORCE_LIMIT = 256


class GeometryError(ValueError):
    """Rejected input to a geometry operation."""


class DegenerateConfigurationError(GeometryError):
    """The point configuration does not determine a unique transform."""


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def quat_to_matrix(q):
    w, x, y, z = (float(v) for v in q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to a unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def rotation_angle_deg(R):
    """Geodesic angle of a rotation matrix, in degrees."""
    R = np.asarray(R, dtype=np.float64)
    # atan2 keeps full precision near 0 where arccos of the trace does not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arctan2(s, c)))


def axis_angle_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_rotation(rng):
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world pose plus field of view.

    The flat 9-vector layout is ``[qw, qx, qy, qz, tx, ty, tz, fov_x, fov_y]``.
    """

    rotation_quat: np.ndarray
    translation: np.ndarray
    fov: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation_quat, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        fov = np.asarray(self.fov, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t)) and np.all(np.isfinite(fov))):
            raise GeometryError("camera parameters must be finite")
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            raise GeometryError("quaternion has zero norm")
        if abs(norm - 1.0) > 1e-12:
            q = q / norm
        if np.any(fov <= 0) or np.any(fov >= np.pi):
            raise GeometryError(f"fov must lie in (0, pi), got {fov}")
        for name, arr in (("rotation_quat", q), ("translation", t), ("fov", fov)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_vector(cls, vec) -> "CameraPose":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape != (9,):
            raise GeometryError(f"camera vector must have 9 entries, got {vec.shape}")
        return cls(vec[:4], vec[4:7], vec[7:9])

    @classmethod
    def from_matrix(cls, R, t, fov) -> "CameraPose":
        return cls(matrix_to_quat(R), t, fov)

    @classmethod
    def identity(cls, fov=(np.pi / 3, np.pi / 3)) -> "CameraPose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3), fov)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation_quat, self.translation, self.fov])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.rotation_quat)

    def intrinsics(self, image_size) -> np.ndarray:
        H, W = image_size
        fx = (W / 2.0) / np.tan(self.fov[0] / 2.0)
        fy = (H / 2.0) / np.tan(self.fov[1] / 2.0)
        return np.array([[fx, 0.0, (W - 1) / 2.0], [0.0, fy, (H - 1) / 2.0], [0.0, 0.0, 1.0]])

    def relative_to(self, ref: "CameraPose") -> "CameraPose":
        """This pose expressed in the frame of ``ref``."""
        Rr = ref.rotation
        R = Rr.T @ self.rotation
        t = Rr.T @ (self.translation - ref.translation)
        return CameraPose.from_matrix(R, t, self.fov)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if cols.shape[0] != pts.shape[0]:
                raise GeometryError("colors and points differ in length")
            object.__setattr__(self, "colors", cols)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.scale * pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def pixel_grid(image_size):
    H, W = image_size
    v, u = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    return u, v


def unproject_depth(depth, camera: CameraPose, image_size, validity=None) -> PointCloud:
    """World-space points for every valid pixel of a z-depth map.

    ``validity`` defaults to all pixels; pixels are visited in row-major order.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = image_size
    if depth.shape[:2] != (H, W):
        raise GeometryError(f"depth shape {depth.shape} does not match image size {(H, W)}")
    depth = depth.reshape(H, W)
    valid = np.ones((H, W), bool) if validity is None else np.asarray(validity, bool).reshape(H, W)
    if not np.all(np.isfinite(depth[valid])):
        raise GeometryError("non-finite depth under the validity mask")
    if np.any(depth[valid] < 0):
        raise GeometryError("negative depth under the validity mask")
    return PointCloud(pixels_to_world(depth, camera, image_size)[valid])


def pixels_to_world(depth, camera: CameraPose, image_size) -> np.ndarray:
    """Dense H x W x 3 unprojection (no masking)."""
    H, W = image_size
    K = camera.intrinsics(image_size)
    u, v = pixel_grid(image_size)
    x = (u - K[0, 2]) / K[0, 0] * depth
    y = (v - K[1, 2]) / K[1, 1] * depth
    cam = np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)
    return cam @ camera.rotation.T + camera.translation


def project_points(points, camera: CameraPose, image_size):
    """Project world points; returns (u, v, z) with z the camera-frame depth."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = (pts - camera.translation) @ camera.rotation
    K = camera.intrinsics(image_size)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K[0, 0] * cam[:, 0] / z + K[0, 2]
        v = K[1, 1] * cam[:, 1] / z + K[1, 2]
    return u, v, z


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def umeyama_align(src, dst) -> SimilarityTransform:
    """Least-squares similarity transform mapping ``src`` onto ``dst``."""
    X = _as_points(src)
    Y = _as_points(dst)
    if X.shape != Y.shape:
        raise GeometryError(f"point sets differ in shape: {X.shape} vs {Y.shape}")
    m = X.shape[0]
    if m < 3:
        raise GeometryError("Umeyama alignment needs at least 3 correspondences")
    mx, my = X.mean(0), Y.mean(0)
    dx, dy = X - mx, Y - my
    var_x = (dx**2).sum() / m
    sx = np.linalg.svd(dx, compute_uv=False)
    if var_x <= 0 or sx[1] <= 1e-10 * max(sx[0], 1e-300):
        raise DegenerateConfigurationError("source points are collinear or coincident")
    cov = dy.T @ dx / m
    U, d, Vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateConfigurationError("cross-covariance is rank deficient")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.sum(d * np.diag(S)) / var_x)
    if s <= 0:
        raise DegenerateConfigurationError("non-positive scale")
    t = my - s * R @ mx
    return SimilarityTransform(s, R, t)


def normalize_cloud(points):
    """Center on the centroid and divide by the mean radius."""
    pts = _as_points(points)
    c = pts.mean(0)
    r = np.linalg.norm(pts - c, axis=1).mean()
    if r <= 0:
        raise DegenerateConfigurationError("cloud collapses to a single point")
    return (pts - c) / r


def align_clouds(pred, gt) -> SimilarityTransform:
    """Coarse-normalize, match nearest neighbors, then solve Umeyama once."""
    P = _as_points(pred)
    G = _as_points(gt)
    _, idx = nearest_neighbors(normalize_cloud(P), normalize_cloud(G))
    return umeyama_align(P, G[idx])


# ---------------------------------------------------------------------------
# sampling and distances
# ---------------------------------------------------------------------------

def farthest_point_sample(cloud, k: int, start_index: int = 0) -> np.ndarray:
    """Deterministic greedy FPS; ties go to the smallest index."""
    pts = _as_points(cloud)
    m = pts.shape[0]
    if not 1 <= k <= m:
        raise GeometryError(f"k must lie in [1, {m}], got {k}")
    if not 0 <= start_index < m:
        raise GeometryError(f"start_index {start_index} out of range")
    picked = np.empty(k, dtype=np.int64)
    picked[0] = start_index
    min_d = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(min_d))  # argmax returns the first maximum
        picked[i] = nxt
        np.minimum(min_d, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d)
    return picked


def nearest_neighbors(queries, reference):
    """Exact Euclidean nearest neighbor in ``reference`` for each query."""
    Q = _as_points(queries)
    R = _as_points(reference)
    if len(R) == 0:
        raise GeometryError("empty reference cloud")
    if len(R) <= BRUTE_FORCE_LIMIT:
        d2 = ((Q[:, None, :] - R[None, :, :]) ** 2).sum(-1)
        idx = np.argmin(d2, axis=1)
        return np.sqrt(d2[np.arange(len(Q)), idx]), idx
    dist, idx = cKDTree(R).query(Q, k=1)
    return np.asarray(dist, dtype=np.float64), np.asarray(idx, dtype=np.int64)


def chamfer_metrics(pred, gt):
    """(accuracy, completeness, chamfer) with unsquared distances."""
    P = _as_points(pred)
    G = _as_points(gt)
    if len(P) == 0 or len(G) == 0:
        raise GeometryError("chamfer metrics need nonempty clouds")
    acc = float(nearest_neighbors(P, G)[0].mean())
    comp = float(nearest_neighbors(G, P)[0].mean())
    return acc, comp, (acc + comp) / 2.0


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass
class PoseErrors:
    pairs: list[tuple[int, int]]
    rotation_deg: np.ndarray
    translation_deg: np.ndarray
    skipped: list[tuple[int, int]]

    def combined(self) -> np.ndarray:
        return np.maximum(self.rotation_deg, self.translation_deg)


def _relative(cam_i: CameraPose, cam_j: CameraPose):
    # maps camera-i coordinates into camera-j coordinates
    Ri, Rj = cam_i.rotation, cam_j.rotation
    return Rj.T @ Ri, Rj.T @ (cam_i.translation - cam_j.translation)


def _angle_between(a, b):
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b))))


def relative_pose_errors(pred, gt, baseline_eps: float = 1e-9) -> PoseErrors:
    pred = [p if isinstance(p, CameraPose) else CameraPose.from_vector(p) for p in pred]
    gt = [g if isinstance(g, CameraPose) else CameraPose.from_vector(g) for g in gt]
    if len(pred) != len(gt):
        raise GeometryError("pose lists differ in length")
    if len(gt) < 2:
        raise GeometryError("relative pose errors need at least 2 poses")
    pairs, rot, trans, skipped = [], [], [], []
    for i in range(len(gt)):
        for j in range(i + 1, len(gt)):
            Rg, tg = _relative(gt[i], gt[j])
            Rp, tp = _relative(pred[i], pred[j])
            if np.linalg.norm(tg) <= baseline_eps:
                skipped.append((i, j))
                continue
            pairs.append((i, j))
            rot.append(rotation_angle_deg(Rp.T @ Rg))
            trans.append(180.0 if np.linalg.norm(tp) <= baseline_eps else _angle_between(tp, tg))
    return PoseErrors(pairs, np.array(rot), np.array(trans), skipped)


def auc_at_threshold(errors, threshold_deg: float = 30.0) -> float:
    """Normalized area under the accuracy-vs-threshold step curve.

    ``errors`` is a PoseErrors, an (M, 2) array of (rot, trans) errors, or a
    1-D array of already-combined errors.
    """
    if threshold_deg <= 0:
        raise GeometryError("threshold must be positive")
    if isinstance(errors, PoseErrors):
        e = errors.combined()
    else:
        e = np.asarray(errors, dtype=np.float64)
        if e.ndim == 2:
            e = e.max(axis=1)
    if e.size == 0:
        raise GeometryError("empty error list")
    e = np.sort(e.reshape(-1))
    m = e.size
    # frac(e <= tau) is a step function rising by 1/m at each sorted error
    area = 0.0
    for k, ek in enumerate(e):
        if ek >= threshold_deg:
            break
        nxt = e[k + 1] if k + 1 < m else threshold_deg
        area += (min(nxt, threshold_deg) - max(ek, 0.0)) * (k + 1) / m
    return float(area / threshold_deg)


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)
