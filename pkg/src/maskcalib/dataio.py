"""Dataset ingestion and synthetic scene generation.

On-disk layout for evaluation datasets::

    root/manifest.json                 # optional: scene ids + subset tags
    root/<scene_id>/cloud.pcd          # x y z intensity (ascii or binary)
    root/<scene_id>/image.png
    root/<scene_id>/intrinsics.txt     # 3x3 row-major
    root/<scene_id>/extrinsics_gt.txt  # 4x4 row-major, optional

The synthetic generator builds box scenes with exact ground truth: a LiDAR
cloud sampled on the box surfaces, a flat-shaded RGB render, and per-object
truth masks for both modalities. Everything is deterministic in the seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import (
    DEPTH_EPSILON,
    EulerAngles,
    GeometryError,
    Intrinsics,
    RigidTransform,
    canonical_virtual_pose,
    rotation_from_euler,
)
from .masks import MaskSet, masks_from_label_map


class DataIoError(RuntimeError):
    pass


class LayoutError(DataIoError):
    pass


class SpecError(DataIoError):
    pass


@dataclass(frozen=True)
class ScenePair:
    cloud: np.ndarray                      # (N, 4) x y z intensity, LiDAR frame
    image: np.ndarray                      # (H, W, 3) uint8
    intrinsics: Intrinsics
    truth_extrinsics: RigidTransform | None
    scene_id: str
    subset: str = "default"


@dataclass(frozen=True)
class DatasetLoad:
    pairs: list
    skipped: list                          # [(scene_id, reason), ...]


# ---------------------------------------------------------------------------
# Point cloud files
# ---------------------------------------------------------------------------

_PCD_HEADER = """VERSION .7
FIELDS x y z intensity
SIZE 4 4 4 4
TYPE F F F F
COUNT 1 1 1 1
WIDTH {n}
HEIGHT 1
VIEWPOINT 0 0 0 1 0 0 0
POINTS {n}
DATA {mode}
"""


def write_pcd(path, cloud, binary=True):
    arr = np.asarray(cloud, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataIoError("cloud must be (N, 4): x y z intensity")
    header = _PCD_HEADER.format(n=len(arr), mode="binary" if binary else "ascii")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(arr.astype("<f4").tobytes())
        else:
            np.savetxt(f, arr, fmt="%.8g")


def read_pcd(path):
    with open(path, "rb") as f:
        return parse_pcd(f.read(), name=str(path))


def parse_pcd(raw, name="<bytes>"):
    path = name
    lines = []
    offset = 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise DataIoError(f"{path}: truncated PCD header")
        line = raw[offset:end].decode("ascii", errors="replace")
        offset = end + 1
        if line.startswith("#"):
            continue
        lines.append(line.split())
        if line.startswith("DATA"):
            break
    meta = {parts[0]: parts[1:] for parts in lines if parts}
    try:
        fields = meta["FIELDS"]
        n = int(meta["POINTS"][0])
        mode = meta["DATA"][0]
    except (KeyError, IndexError, ValueError) as exc:
        raise DataIoError(f"malformed PCD header in {path}: {exc}") from exc
    want = ["x", "y", "z", "intensity"]
    if [f.lower() for f in fields[:4]] != want:
        raise DataIoError(f"{path}: expected fields {want}, got {fields}")
    if mode == "binary":
        data = np.frombuffer(raw, dtype="<f4", count=n * len(fields), offset=offset)
        data = data.reshape(n, len(fields))[:, :4]
    elif mode == "ascii":
        data = np.loadtxt(raw[offset:].decode("ascii").splitlines(), dtype=np.float64)
        data = np.atleast_2d(data)[:n, :4]
    else:
        raise DataIoError(f"{path}: unsupported DATA mode {mode!r}")
    return np.asarray(data, dtype=np.float64)


# ---------------------------------------------------------------------------
# Dataset layout
# ---------------------------------------------------------------------------


def _read_matrix(path, shape):
    try:
        values = np.loadtxt(path, dtype=float)
    except (OSError, ValueError) as exc:
        raise LayoutError(f"cannot parse {path}: {exc}") from exc
    if values.size != shape[0] * shape[1]:
        raise LayoutError(f"{path}: expected {shape[0]}x{shape[1]} values")
    return values.reshape(shape)


def save_scene(pair: ScenePair, root):
    d = Path(root) / pair.scene_id
    d.mkdir(parents=True, exist_ok=True)
    write_pcd(d / "cloud.pcd", pair.cloud)
    Image.fromarray(pair.image).save(d / "image.png")
    np.savetxt(d / "intrinsics.txt", pair.intrinsics.matrix, fmt="%.10g")
    if pair.truth_extrinsics is not None:
        np.savetxt(d / "extrinsics_gt.txt", pair.truth_extrinsics.matrix, fmt="%.12g")
    return d


def save_dataset(pairs, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        save_scene(pair, root)
    manifest = {
        "scenes": [{"id": p.scene_id, "subset": p.subset} for p in pairs]
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(root, min_points=1000) -> DatasetLoad:
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"dataset root {root} is not a directory")
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
            entries = [(e["id"], e.get("subset", "default")) for e in manifest["scenes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"malformed manifest {manifest_path}: {exc}") from exc
    else:
        entries = [
            (p.name, "default") for p in sorted(root.iterdir()) if p.is_dir()
        ]
    if not entries:
        raise LayoutError(f"no scenes under {root}")

    pairs, skipped = [], []
    for scene_id, subset in entries:
        d = root / scene_id
        cloud_path = d / "cloud.pcd"
        image_path = d / "image.png"
        intr_path = d / "intrinsics.txt"
        gt_path = d / "extrinsics_gt.txt"
        missing = [p.name for p in (cloud_path, image_path, intr_path) if not p.exists()]
        if missing:
            skipped.append((scene_id, f"missing {', '.join(missing)}"))
            continue
        try:
            cloud = read_pcd(cloud_path)
        except DataIoError as exc:
            skipped.append((scene_id, str(exc)))
            continue
        if len(cloud) < min_points:
            skipped.append((scene_id, f"cloud has {len(cloud)} < {min_points} points"))
            continue
        image = np.asarray(Image.open(image_path).convert("RGB"))
        K = _read_matrix(intr_path, (3, 3))
        try:
            intr = Intrinsics.from_matrix(K, image.shape[1], image.shape[0])
        except GeometryError as exc:
            raise LayoutError(f"{intr_path}: {exc}") from exc
        truth = None
        if gt_path.exists():
            M = _read_matrix(gt_path, (4, 4))
            try:
                truth = RigidTransform.from_matrix(M, "lidar", "camera")
            except GeometryError as exc:
                raise LayoutError(f"{gt_path}: {exc}") from exc
        pairs.append(ScenePair(cloud, image, intr, truth, scene_id, subset))
    return DatasetLoad(pairs, skipped)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxSpec:
    center: tuple                          # LiDAR frame, meters
    size: tuple                            # (sx, sy, sz)
    yaw: float                             # rotation about LiDAR z
    intensity: float                       # LiDAR return level, 0..255
    color: tuple                           # flat RGB fill


@dataclass(frozen=True)
class SceneSpec:
    boxes: list
    truth_extrinsics: RigidTransform       # lidar -> camera
    intrinsics: Intrinsics
    target_spacing_px: float = 1.1         # surface sampling density goal
    max_points: int = 400_000

    def __post_init__(self):
        if len(self.boxes) < 3:
            raise SpecError("scene needs at least 3 objects")


def _box_faces(box: BoxSpec):
    """The 6 faces of a yaw-rotated cuboid: (origin, edge_a, edge_b) each."""
    sx, sy, sz = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    ctr = np.asarray(box.center, dtype=float)
    ex = R @ np.array([sx, 0, 0])
    ey = R @ np.array([0, sy, 0])
    ez = np.array([0, 0, sz])
    half = (ex + ey + ez) / 2
    o = ctr - half
    faces = [
        (o, ex, ey),                # bottom
        (o + ez, ex, ey),           # top
        (o, ex, ez),                # -y side
        (o + ey, ex, ez),           # +y side
        (o, ey, ez),                # -x side
        (o + ex, ey, ez),           # +x side
    ]
    return faces


def rasterize_boxes(boxes, pose: RigidTransform, K: Intrinsics):
    """Exact flat-shaded render of box faces with a per-pixel depth test.

    Returns (rgb (H, W, 3) uint8, labels (H, W) int with 0 background,
    depth (H, W) float with inf background). Faces with a vertex behind the
    camera are skipped, which is fine for scenes placed in front of it.
    """
    H, W = K.height, K.width
    rgb = np.zeros((H, W, 3), dtype=np.uint8)
    rgb[:] = (6, 6, 8)
    labels = np.zeros((H, W), dtype=np.int32)
    depth = np.full((H, W), np.inf)
    Kinv = np.linalg.inv(K.matrix)

    for obj_id, box in enumerate(boxes, start=1):
        for origin, ea, eb in _box_faces(box):
            corners = np.array([origin, origin + ea, origin + ea + eb, origin + eb])
            cam = pose.apply(corners)
            if (cam[:, 2] <= DEPTH_EPSILON).any():
                continue
            pix = np.column_stack(
                [K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy]
            )
            u0 = max(int(math.floor(pix[:, 0].min())), 0)
            u1 = min(int(math.ceil(pix[:, 0].max())) + 1, W)
            v0 = max(int(math.floor(pix[:, 1].min())), 0)
            v1 = min(int(math.ceil(pix[:, 1].max())) + 1, H)
            if u0 >= u1 or v0 >= v1:
                continue
            uu, vv = np.meshgrid(np.arange(u0, u1), np.arange(v0, v1))
            inside = _inside_convex(pix, uu, vv)
            if not inside.any():
                continue
            # Ray-cast to the supporting plane for exact per-pixel depth.
            n = np.cross(pose.rotation @ ea, pose.rotation @ eb)
            p0 = cam[0]
            rays = np.stack([uu, vv, np.ones_like(uu)], axis=-1) @ Kinv.T
            denom = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = (p0 @ n) / denom
            z = tt * rays[..., 2]
            ok = inside & np.isfinite(z) & (z > DEPTH_EPSILON)
            tile = depth[v0:v1, u0:u1]
            win = ok & (z < tile)
            tile[win] = z[win]
            labels[v0:v1, u0:u1][win] = obj_id
            rgb[v0:v1, u0:u1][win] = box.color
    return rgb, labels, depth


def _inside_convex(poly, uu, vv):
    """Point-in-convex-polygon for a pixel grid; accepts either winding."""
    inside_pos = np.ones(uu.shape, dtype=bool)
    inside_neg = np.ones(uu.shape, dtype=bool)
    m = len(poly)
    for i in range(m):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % m]
        cross = (bx - ax) * (vv - ay) - (by - ay) * (uu - ax)
        inside_pos &= cross >= -1e-9
        inside_neg &= cross <= 1e-9
    return inside_pos | inside_neg


def _sample_cloud(spec: SceneSpec, rng):
    """Jittered-grid samples on the faces visible from the truth camera."""
    pose = spec.truth_extrinsics
    K = spec.intrinsics
    cam_pos = -pose.rotation.T @ pose.translation   # camera center, LiDAR frame
    pts, intens = [], []
    for box in spec.boxes:
        box_center = np.asarray(box.center, dtype=float)
        for origin, ea, eb in _box_faces(box):
            center = origin + (ea + eb) / 2
            normal = np.cross(ea, eb)
            if np.dot(normal, center - box_center) < 0:
                normal = -normal          # outward
            if np.dot(normal, cam_pos - center) <= 0:
                continue                  # back face, invisible from the camera
            cam = pose.apply(np.array([origin, origin + ea, origin + ea + eb, origin + eb]))
            if (cam[:, 2] <= DEPTH_EPSILON).any():
                continue
            pix = np.column_stack(
                [K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy]
            )
            span_a = max(np.linalg.norm(pix[1] - pix[0]), np.linalg.norm(pix[2] - pix[3]))
            span_b = max(np.linalg.norm(pix[3] - pix[0]), np.linalg.norm(pix[2] - pix[1]))
            na = int(np.clip(math.ceil(span_a / spec.target_spacing_px), 2, 900))
            nb = int(np.clip(math.ceil(span_b / spec.target_spacing_px), 2, 900))
            a = (np.arange(na) + rng.uniform(0.1, 0.9, na)) / na
            b = (np.arange(nb) + rng.uniform(0.1, 0.9, nb)) / nb
            aa, bb = np.meshgrid(a, b)
            face_pts = origin + aa.reshape(-1, 1) * ea + bb.reshape(-1, 1) * eb
            pts.append(face_pts)
            intens.append(np.full(len(face_pts), box.intensity))
    cloud = np.column_stack([np.vstack(pts), np.concatenate(intens)])
    if len(cloud) > spec.max_points:
        keep = rng.choice(len(cloud), size=spec.max_points, replace=False)
        keep.sort()
        cloud = cloud[keep]
    return cloud


def generate_synthetic(spec: SceneSpec, seed, scene_id=None, subset="default"):
    """Build (ScenePair, LIP truth MaskSet, RGB truth MaskSet) from a spec.

    Truth masks for both modalities come from the same exact rasterization
    at the truth extrinsics, so under the truth pose they are pixel-aligned.
    """
    pose = spec.truth_extrinsics
    for i, box in enumerate(spec.boxes):
        ctr = np.asarray(box.center, dtype=float)
        if ctr[0] <= 0:
            raise SpecError(f"box {i} is behind the LiDAR (x <= 0)")
        if pose.apply(ctr)[2] <= 0:
            raise SpecError(f"box {i} is behind the camera")

    rng = np.random.default_rng(seed)
    cloud = _sample_cloud(spec, rng)
    rgb, labels, _ = rasterize_boxes(spec.boxes, pose, spec.intrinsics)
    lip_truth = masks_from_label_map(labels, "LIP")
    rgb_truth = masks_from_label_map(labels, "RGB")
    pair = ScenePair(
        cloud,
        rgb,
        spec.intrinsics,
        pose,
        scene_id or f"synthetic-{seed}",
        subset,
    )
    return pair, lip_truth, rgb_truth


DEFAULT_SYNTH_INTRINSICS = Intrinsics(fx=600.0, fy=600.0, cx=480.0, cy=320.0, width=960, height=640)

_PALETTE = [
    (204, 59, 59), (59, 178, 70), (66, 99, 224), (222, 180, 48),
    (170, 64, 204), (58, 199, 196), (222, 114, 44), (120, 204, 56),
    (204, 70, 140), (86, 140, 204), (160, 160, 72), (96, 72, 204),
]


def perturbed_canonical(rng, max_rot_deg, max_trans):
    """Canonical virtual pose composed with a random rotation and shift.

    The rotation is about a uniform random axis with angle uniform in
    [0, max_rot_deg]; the translation has uniform random direction and
    magnitude uniform in [0, max_trans].
    """
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0, max_rot_deg))
    w = axis * angle
    Wx = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        dR = np.eye(3)
    else:
        dR = (
            np.eye(3)
            + math.sin(theta) / theta * Wx
            + (1 - math.cos(theta)) / theta**2 * (Wx @ Wx)
        )
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    dt = direction * rng.uniform(0, max_trans)
    delta = RigidTransform(dR, dt, "camera", "camera")
    return delta.compose(canonical_virtual_pose("lidar", "camera"))


def random_scene_spec(seed, n_objects=8, intrinsics=DEFAULT_SYNTH_INTRINSICS,
                      max_rot_deg=10.0, max_trans=0.5):
    """Deterministic random box scene with a perturbed truth pose.

    Boxes are placed in front of both sensors with limited projected overlap
    so every object stays distinguishable; intensity levels and colors are
    unique per object.
    """
    rng = np.random.default_rng(seed)
    truth = perturbed_canonical(rng, max_rot_deg, max_trans)
    K = intrinsics

    levels = np.linspace(50, 235, n_objects)
    rng.shuffle(levels)
    colors = [_PALETTE[i % len(_PALETTE)] for i in range(n_objects)]

    boxes = []
    placed = []   # projected bbox (u0, v0, u1, v1) under the truth pose
    attempts = 0
    while len(boxes) < n_objects and attempts < 4000:
        attempts += 1
        x = rng.uniform(4.0, 9.0)
        y = rng.uniform(-0.52, 0.52) * x
        z = rng.uniform(-0.30, 0.30) * x
        size = rng.uniform(0.7, 1.9, size=3)
        size[0] = rng.uniform(0.3, 0.8)   # shallow along the view axis
        yaw = rng.uniform(-0.5, 0.5)
        box = BoxSpec((x, y, z), tuple(size), yaw, float(levels[len(boxes)]), colors[len(boxes)])
        corners = np.array(
            [f[0] + a * f[1] + b * f[2] for f in _box_faces(box) for a in (0, 1) for b in (0, 1)]
        )
        cam = truth.apply(corners)
        if (cam[:, 2] <= 0.5).any():
            continue
        pix = np.column_stack(
            [K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy]
        )
        u0, v0 = pix.min(axis=0)
        u1, v1 = pix.max(axis=0)
        if u0 < 8 or v0 < 8 or u1 > K.width - 8 or v1 > K.height - 8:
            continue
        if min(u1 - u0, v1 - v0) < 45:
            continue
        bad = False
        for o in placed:
            iw = min(u1, o[2]) - max(u0, o[0])
            ih = min(v1, o[3]) - max(v0, o[1])
            if iw > 0 and ih > 0:
                inter = iw * ih
                if inter > 0.25 * min((u1 - u0) * (v1 - v0), (o[2] - o[0]) * (o[3] - o[1])):
                    bad = True
                    break
        if bad:
            continue
        placed.append((u0, v0, u1, v1))
        boxes.append(box)
    if len(boxes) < 3:
        raise SpecError("could not place enough objects; relax the constraints")
    return SceneSpec(boxes, truth, K)
