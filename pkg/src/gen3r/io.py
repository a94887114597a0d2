"""On-disk formats: PLY clouds, pose JSON, float32 blobs with JSON sidecars, PNG frames."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CAMERA_LAYOUT, CameraPose, PointCloud

POSE_ORDER = "qw,qx,qy,qz,tx,ty,tz,fov_x,fov_y"


def write_json(path, obj) -> None:
    """Canonical JSON: sorted keys, fixed separators, trailing newline."""
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


# -- PLY --------------------------------------------------------------------

def write_ply(path, cloud: PointCloud) -> None:
    pts = np.asarray(cloud.points, dtype="<f4")
    has_color = cloud.colors is not None
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if has_color:
        rgb = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "binary_little_endian" not in lines[1]:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    count = 0
    fields = []
    types = {"float": "<f4", "uchar": "u1"}
    for line in lines:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[0] == "property":
            fields.append((parts[2], types[parts[1]]))
    rec = np.frombuffer(data, dtype=fields, count=count, offset=end)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    colors = None
    if "red" in rec.dtype.names:
        colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    return PointCloud(pts, colors)


# -- poses ------------------------------------------------------------------

def write_poses(path, cameras) -> None:
    rows = []
    for cam in cameras:
        vec = cam.to_vector() if isinstance(cam, CameraPose) else np.asarray(cam, dtype=np.float64)
        rows.append([float(v) for v in vec])
    write_json(path, {"order": POSE_ORDER, "poses": rows})


def read_poses(path) -> list[CameraPose]:
    obj = read_json(path)
    if obj.get("order") != POSE_ORDER:
        raise ValueError(f"{path}: unsupported pose layout {obj.get('order')!r}, expected {POSE_ORDER}")
    return [CameraPose.from_vector(row) for row in obj["poses"]]


def read_pose_vectors(path) -> np.ndarray:
    obj = read_json(path)
    if obj.get("order") != POSE_ORDER:
        raise ValueError(f"{path}: unsupported pose layout {obj.get('order')!r}")
    return np.asarray(obj["poses"], dtype=np.float64).reshape(-1, len(CAMERA_LAYOUT))


# -- raw blobs --------------------------------------------------------------

def write_blob(path, array, dtype="<f4") -> None:
    """Raw little-endian array plus ``<path>.json`` sidecar with dtype/shape."""
    arr = np.ascontiguousarray(np.asarray(array).astype(dtype))
    path = Path(path)
    path.write_bytes(arr.tobytes())
    write_json(path.with_name(path.name + ".json"), {"dtype": np.dtype(dtype).str, "shape": list(arr.shape)})


def read_blob(path) -> np.ndarray:
    path = Path(path)
    meta = read_json(path.with_name(path.name + ".json"))
    return np.frombuffer(path.read_bytes(), dtype=np.dtype(meta["dtype"])).reshape(meta["shape"]).copy()


# -- images -----------------------------------------------------------------

def write_png(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
