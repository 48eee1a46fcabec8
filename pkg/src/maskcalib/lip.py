"""LiDAR intensity projection (LIP) rendering.

A point cloud is projected through a virtual pinhole camera into an 8-bit
intensity image. Every set pixel remembers which cloud point produced it so
2D features found in the image can be traced back to 3D points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import DEPTH_EPSILON, Intrinsics, RigidTransform, cloud_to_array

UNSET_INDEX = -1


class EmptyFrustum(RuntimeError):
    """No cloud point projects into the image; the pose is grossly wrong."""


@dataclass(frozen=True)
class LipImage:
    """Rendered intensity image with per-pixel back-references to the cloud.

    intensity: (H, W) uint8. point_index: (H, W) int32, UNSET_INDEX where no
    point landed. depth: (H, W) float, camera-frame z of the winning point.
    filled: (H, W) bool, True where hole filling synthesized the intensity.
    """

    intensity: np.ndarray
    point_index: np.ndarray
    depth: np.ndarray
    filled: np.ndarray
    pose_used: RigidTransform
    intrinsics: Intrinsics

    def __post_init__(self):
        for name in ("intensity", "point_index", "depth", "filled"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def set_mask(self):
        return self.point_index != UNSET_INDEX


def pixel_cell(pixels):
    """Map float pixel coordinates to integer cells (shared rounding rule)."""
    return np.floor(np.asarray(pixels) + 0.5).astype(np.int64)


def render_lip(cloud, pose: RigidTransform, K: Intrinsics) -> LipImage:
    """Project a cloud through the virtual camera at `pose`.

    Per pixel the nearest-depth point wins; depth ties go to the smaller
    cloud index, which makes the output independent of evaluation order.
    Points outside the frustum are dropped, aligning the rendered field of
    view with the camera's.
    """
    arr = cloud_to_array(cloud)
    if len(arr) == 0:
        raise EmptyFrustum("empty cloud")
    cam = pose.apply(arr[:, :3])
    z = cam[:, 2]
    in_front = z > DEPTH_EPSILON

    u = np.where(in_front, K.fx * cam[:, 0] / np.where(in_front, z, 1.0) + K.cx, -1.0)
    v = np.where(in_front, K.fy * cam[:, 1] / np.where(in_front, z, 1.0) + K.cy, -1.0)
    col = pixel_cell(u)
    row = pixel_cell(v)
    ok = in_front & (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    if not ok.any():
        raise EmptyFrustum("no point projects into the image")

    idx = np.nonzero(ok)[0]
    rows, cols, depths = row[idx], col[idx], z[idx]

    # Sort worst-first so the final write per pixel is the nearest point,
    # smallest index on ties.
    order = np.lexsort((idx, depths))[::-1]
    flat = rows[order] * K.width + cols[order]

    point_index = np.full(K.height * K.width, UNSET_INDEX, dtype=np.int32)
    depth = np.zeros(K.height * K.width)
    point_index[flat] = idx[order]
    depth[flat] = depths[order]
    point_index = point_index.reshape(K.height, K.width)
    depth = depth.reshape(K.height, K.width)

    intensity = _normalize_intensity(arr[:, 3], idx, point_index)
    filled = np.zeros((K.height, K.width), dtype=bool)
    return LipImage(intensity, point_index, depth, filled, pose, K)


def _normalize_intensity(raw, in_frustum_idx, point_index):
    """Percentile-clamped linear stretch of raw intensities to uint8."""
    lo, hi = np.percentile(raw[in_frustum_idx], [1.0, 99.0])
    img = np.zeros(point_index.shape, dtype=np.uint8)
    set_mask = point_index != UNSET_INDEX
    vals = raw[point_index[set_mask]]
    if hi - lo < 1e-12:
        img[set_mask] = 255
        return img
    scaled = np.clip((vals - lo) / (hi - lo), 0.0, 1.0) * 255.0
    img[set_mask] = np.rint(scaled).astype(np.uint8)
    return img


def fill_and_enhance(img: LipImage, min_neighbors=5, passes=2) -> LipImage:
    """Fill small holes with the median of set neighbors, then stretch contrast.

    A hole pixel is filled only when at least `min_neighbors` of its 8
    neighbors carry data; filled pixels keep no 3D back-reference and are
    flagged so downstream consumers can exclude them.
    """
    valid = img.set_mask | img.filled
    if not valid.any():
        return img

    intensity = img.intensity.astype(float)
    for _ in range(passes):
        neigh_vals, neigh_valid = _neighbor_stacks(intensity, valid)
        counts = neigh_valid.sum(axis=0)
        fillable = (~valid) & (counts >= min_neighbors)
        if not fillable.any():
            break
        stacked = np.where(neigh_valid, neigh_vals, np.nan)
        medians = np.nanmedian(stacked[:, fillable], axis=0)
        intensity[fillable] = medians
        valid = valid | fillable

    filled = valid & ~img.set_mask
    lo = intensity[valid].min()
    hi = intensity[valid].max()
    out = np.zeros_like(img.intensity)
    if hi - lo < 1e-12:
        out[valid] = 255
    else:
        out[valid] = np.rint((intensity[valid] - lo) / (hi - lo) * 255.0).astype(np.uint8)
    return LipImage(out, img.point_index.copy(), img.depth.copy(), filled, img.pose_used, img.intrinsics)


def _neighbor_stacks(values, valid):
    """Stack the 8-neighborhoods of every pixel: (8, H, W) values and validity."""
    H, W = values.shape
    vals = np.zeros((8, H, W))
    ok = np.zeros((8, H, W), dtype=bool)
    shifts = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
    for k, (dy, dx) in enumerate(shifts):
        ys = slice(max(dy, 0), H + min(dy, 0))
        xs = slice(max(dx, 0), W + min(dx, 0))
        yd = slice(max(-dy, 0), H + min(-dy, 0))
        xd = slice(max(-dx, 0), W + min(-dx, 0))
        vals[k][yd, xd] = values[ys, xs]
        ok[k][yd, xd] = valid[ys, xs]
    return vals, ok


def save_debug(img: LipImage, path_prefix):
    """Write `<prefix>.png` (grayscale) and `<prefix>.idx` (raw int32 grid).

    The index sidecar is row-major 32-bit little-endian with UNSET_INDEX (-1)
    marking pixels that carry no 3D back-reference.
    """
    Image.fromarray(img.intensity, mode="L").save(f"{path_prefix}.png")
    img.point_index.astype("<i4").tofile(f"{path_prefix}.idx")


def load_debug_index(path, height, width):
    data = np.fromfile(path, dtype="<i4")
    return data.reshape(height, width)


def snap_to_set_pixel(pixel, img: LipImage, radius=3):
    """Return the nearest set pixel within `radius` px of `pixel`, or None.

    Used to recover a 3D point for a contour corner that may sit on a filled
    or empty pixel. Ties break in row-major order for determinism.
    """
    c0, r0 = pixel_cell(np.asarray(pixel, dtype=float))
    H, W = img.point_index.shape
    best = None
    best_d2 = (radius + 1e-9) ** 2
    for r in range(max(r0 - radius, 0), min(r0 + radius + 1, H)):
        for c in range(max(c0 - radius, 0), min(c0 + radius + 1, W)):
            if img.point_index[r, c] == UNSET_INDEX:
                continue
            d2 = (r - pixel[1]) ** 2 + (c - pixel[0]) ** 2
            if d2 < best_d2 - 1e-12:
                best_d2 = d2
                best = (r, c)
    return best
