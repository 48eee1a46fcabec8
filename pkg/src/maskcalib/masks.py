"""Segmentation-mask representation and the pluggable mask providers.

Masks from both modalities (the rendered intensity image and the RGB photo)
share one canonical form: a bounding-box instance plus an ordered polygon of
contour corner points. Providers turn an image into a MaskSet; three
implementations cover synthetic scenes, pre-segmented files, and a remote
segmentation service speaking the same mask document schema.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import cv2
import numpy as np

from .lip import LipImage

CORNER_CAP = 32
MIN_AREA = 100.0
DUPLICATE_IOU = 0.95


class MaskError(ValueError):
    pass


class DegenerateContour(MaskError):
    pass


class SchemaError(MaskError):
    pass


class ProviderUnavailable(RuntimeError):
    pass


def polygon_area(points):
    """Signed shoelace area; positive for counter-clockwise winding in (x, y)."""
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def ensure_ccw(points):
    p = np.asarray(points, dtype=float)
    return p if polygon_area(p) >= 0 else p[::-1].copy()


@dataclass(frozen=True)
class MaskObservation:
    """One segmented region: instance bbox plus ordered contour corners."""

    id: int
    center: np.ndarray          # bbox center (cx, cy), pixels
    size: tuple                 # bbox (w, h), pixels
    corners: np.ndarray         # (m, 2) counter-clockwise corner points
    area: float                 # region area, px^2
    source: str                 # "LIP" or "RGB"

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(2)
        pts = np.asarray(self.corners, dtype=float).reshape(-1, 2)
        w, h = self.size
        if w <= 0 or h <= 0:
            raise MaskError(f"mask {self.id}: bbox must have positive size")
        if not 3 <= len(pts) <= CORNER_CAP:
            raise MaskError(f"mask {self.id}: {len(pts)} corners outside [3, {CORNER_CAP}]")
        if polygon_area(pts) < 0:
            raise MaskError(f"mask {self.id}: corners must wind counter-clockwise")
        lo = c - np.array([w / 2 + 2.0, h / 2 + 2.0])
        hi = c + np.array([w / 2 + 2.0, h / 2 + 2.0])
        if (pts < lo).any() or (pts > hi).any():
            raise MaskError(f"mask {self.id}: corner outside bbox (+2 px)")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", (float(w), float(h)))
        object.__setattr__(self, "corners", pts)

    @property
    def width(self):
        return self.size[0]

    @property
    def height(self):
        return self.size[1]

    def bbox_iou(self, other):
        ax0, ay0 = self.center - np.array(self.size) / 2
        ax1, ay1 = self.center + np.array(self.size) / 2
        bx0, by0 = other.center - np.array(other.size) / 2
        bx1, by1 = other.center + np.array(other.size) / 2
        iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
        ih = max(0.0, min(ay1, by1) - max(ay0, by0))
        inter = iw * ih
        union = self.size[0] * self.size[1] + other.size[0] * other.size[1] - inter
        return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class MaskSet:
    masks: list
    image_size: tuple           # (W, H)
    source: str

    def __post_init__(self):
        W, H = self.image_size
        for m in self.masks:
            if m.source != self.source:
                raise MaskError(f"mask {m.id} source {m.source!r} != set source {self.source!r}")
            if (m.corners[:, 0] < -2).any() or (m.corners[:, 0] > W + 2).any():
                raise MaskError(f"mask {m.id} exceeds image width")
            if (m.corners[:, 1] < -2).any() or (m.corners[:, 1] > H + 2).any():
                raise MaskError(f"mask {m.id} exceeds image height")

    def __len__(self):
        return len(self.masks)


def _rdp(points, eps):
    """Ramer-Douglas-Peucker on an open polyline, keeping both endpoints."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n < 3:
        return pts
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        seg = pts[i + 1 : j]
        chord = pts[j] - pts[i]
        norm = np.hypot(*chord)
        diff = seg - pts[i]
        if norm < 1e-12:
            d = np.hypot(diff[:, 0], diff[:, 1])
        else:
            d = np.abs(chord[0] * diff[:, 1] - chord[1] * diff[:, 0]) / norm
        imax = int(np.argmax(d))
        if d[imax] > eps:
            mid = i + 1 + imax
            keep[mid] = True
            stack.append((i, mid))
            stack.append((mid, j))
    return pts[keep]


def _convex_hull(pts):
    """Andrew monotone chain; returns hull vertex coordinates, CCW."""
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    sorted_pts = pts[order]
    uniq = sorted_pts[
        np.concatenate([[True], np.any(np.diff(sorted_pts, axis=0) != 0, axis=1)])
    ]
    if len(uniq) <= 2:
        return uniq

    def half(points):
        chain = []
        for p in points:
            while len(chain) >= 2:
                a, b = chain[-2], chain[-1]
                if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(p)
        return chain

    lower = half(uniq)
    upper = half(uniq[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _diameter_pair(pts):
    """The two farthest-apart points, chosen rotation-invariantly.

    Computed over the convex hull (where the diameter must lie); ties break
    by lexicographic comparison of the point pair so the result depends only
    on the point set, not the traversal order.
    """
    hull = _convex_hull(pts)
    d2 = ((hull[:, None, :] - hull[None, :, :]) ** 2).sum(axis=2)
    best = d2.max()
    ii, jj = np.nonzero(d2 >= best - 1e-9)
    candidates = []
    for i, j in zip(ii, jj):
        if i >= j:
            continue
        a, b = hull[i], hull[j]
        key = min(tuple(a), tuple(b)) + max(tuple(a), tuple(b))
        candidates.append((key, tuple(a), tuple(b)))
    candidates.sort()
    _, a, b = candidates[0]
    return np.array(a), np.array(b)


def _first_index_of(pts, target):
    hits = np.flatnonzero((pts == target).all(axis=1))
    return int(hits[0])


def extract_corners(contour, cap=CORNER_CAP, tolerance=1.5):
    """Simplify a closed contour to at most `cap` corner points.

    Farthest-point (Douglas-Peucker) simplification, anchored at the
    contour's diameter endpoints so the anchors land on true extremes rather
    than noise. The tolerance grows until the corner budget is met. The
    result preserves the input winding, is idempotent on already-simple
    polygons, and is invariant under cyclic rotation of the start point.
    """
    pts = np.asarray(contour, dtype=float).reshape(-1, 2)
    # Drop an explicit closing vertex.
    if len(pts) > 1 and np.allclose(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise DegenerateContour("contour needs at least 3 points")
    if abs(polygon_area(pts)) < 4.0:
        raise DegenerateContour("contour area below 4 px^2")

    ccw = polygon_area(pts) >= 0
    if not ccw:
        pts = pts[::-1]

    a_pt, b_pt = _diameter_pair(pts)
    a = _first_index_of(pts, a_pt)
    rolled = np.roll(pts, -a, axis=0)
    split = _first_index_of(rolled, b_pt)

    eps = float(tolerance)
    while True:
        first = _rdp(rolled[: split + 1], eps)
        second = _rdp(np.vstack([rolled[split:], rolled[:1]]), eps)
        simplified = np.vstack([first[:-1], second[:-1]])
        if len(simplified) <= cap:
            break
        eps *= 1.5
    if len(simplified) < 3:
        raise DegenerateContour("contour collapsed during simplification")
    return simplified if ccw else simplified[::-1].copy()


def mask_from_contour(mask_id, contour, source, area=None, cap=CORNER_CAP):
    """Build a MaskObservation from a raw contour polyline."""
    corners = ensure_ccw(extract_corners(contour, cap=cap))
    pts = np.asarray(contour, dtype=float).reshape(-1, 2)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    size = hi - lo
    center = (lo + hi) / 2
    if area is None:
        area = abs(polygon_area(pts))
    return MaskObservation(mask_id, center, (max(size[0], 1.0), max(size[1], 1.0)), corners, float(area), source)


def dedupe_masks(masks, iou=DUPLICATE_IOU):
    """Drop near-identical masks (bbox IoU above `iou`), keeping the largest."""
    kept = []
    for m in sorted(masks, key=lambda m: -m.area):
        if all(m.bbox_iou(k) <= iou for k in kept):
            kept.append(m)
    kept.sort(key=lambda m: m.id)
    return kept


def masks_from_label_map(labels, source, min_area=MIN_AREA, cap=CORNER_CAP):
    """Convert an integer label image (0 = background) into a MaskSet.

    Each 8-connected component of each label becomes one mask; components
    below `min_area` pixels are discarded.
    """
    from scipy import ndimage

    labels = np.asarray(labels)
    H, W = labels.shape
    out = []
    next_id = 0
    for value in np.unique(labels):
        if value == 0:
            continue
        binary = (labels == value).astype(np.uint8)
        comps, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
        for comp in range(1, n + 1):
            region = (comps == comp).astype(np.uint8)
            area = int(region.sum())
            if area < min_area:
                continue
            contours, _ = cv2.findContours(region, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
            if not contours:
                continue
            contour = max(contours, key=cv2.contourArea).reshape(-1, 2).astype(float)
            try:
                out.append(mask_from_contour(next_id, contour, source, area=area, cap=cap))
            except DegenerateContour:
                continue
            next_id += 1
    return MaskSet(dedupe_masks(out), (W, H), source)


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


class MaskProvider:
    """Provider interface: turn an image (or LipImage) into a MaskSet."""

    def provide_masks(self, image, source) -> MaskSet:
        raise NotImplementedError


class SyntheticMaskProvider(MaskProvider):
    """Segments flat-shaded synthetic renders by exact pixel value.

    Synthetic scenes give every object a unique flat color (RGB) or a unique
    intensity level (LIP), so connected regions of equal value recover the
    generator's object masks without a learned model.
    """

    def __init__(self, min_area=MIN_AREA, cap=CORNER_CAP):
        self.min_area = min_area
        self.cap = cap

    def provide_masks(self, image, source) -> MaskSet:
        if isinstance(image, LipImage):
            valid = image.set_mask | image.filled
            labels = np.where(valid, image.intensity.astype(np.int64) + 1, 0)
        else:
            arr = np.asarray(image)
            if arr.size == 0:
                raise MaskError("empty image")
            if arr.ndim == 3:
                flat = (
                    arr[..., 0].astype(np.int64) * 256 * 256
                    + arr[..., 1].astype(np.int64) * 256
                    + arr[..., 2].astype(np.int64)
                )
            else:
                flat = arr.astype(np.int64)
            labels = flat + 1
            # Most common value is treated as background.
            vals, counts = np.unique(labels, return_counts=True)
            labels = np.where(labels == vals[np.argmax(counts)], 0, labels)
        return masks_from_label_map(labels, source, self.min_area, self.cap)


MASK_DOCUMENT_KEYS = {"image_size", "masks"}


def mask_set_to_document(ms: MaskSet) -> dict:
    return {
        "image_size": [int(ms.image_size[0]), int(ms.image_size[1])],
        "source": ms.source,
        "masks": [
            {
                "id": int(m.id),
                "bbox": {
                    "cx": float(m.center[0]),
                    "cy": float(m.center[1]),
                    "w": float(m.size[0]),
                    "h": float(m.size[1]),
                },
                "polygon": [float(v) for v in m.corners.reshape(-1)],
                "area": float(m.area),
            }
            for m in ms.masks
        ],
    }


def mask_set_from_document(doc, source, min_area=MIN_AREA, cap=CORNER_CAP) -> MaskSet:
    """Parse the mask document schema into a validated MaskSet."""
    try:
        W, H = doc["image_size"]
        raw_masks = doc["masks"]
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed mask document: {exc}") from exc
    masks = []
    for entry in raw_masks:
        try:
            poly = np.asarray(entry["polygon"], dtype=float).reshape(-1, 2)
            bbox = entry["bbox"]
            cx, cy, w, h = bbox["cx"], bbox["cy"], bbox["w"], bbox["h"]
            area = float(entry["area"])
            mid = int(entry["id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed mask entry: {exc}") from exc
        if area < min_area:
            continue
        try:
            corners = ensure_ccw(extract_corners(poly, cap=cap))
        except DegenerateContour:
            continue
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        derived_center = (lo + hi) / 2
        derived_size = hi - lo
        if np.abs(derived_center - [cx, cy]).max() > 2.0 or np.abs(derived_size - [w, h]).max() > 4.0:
            raise SchemaError(f"mask {mid}: bbox disagrees with polygon by more than 2 px")
        try:
            masks.append(MaskObservation(mid, (cx, cy), (w, h), corners, area, source))
        except MaskError as exc:
            raise SchemaError(str(exc)) from exc
    return MaskSet(dedupe_masks(masks), (int(W), int(H)), source)


class FileMaskProvider(MaskProvider):
    """Reads pre-segmented masks from JSON documents, one file per source tag."""

    def __init__(self, paths, min_area=MIN_AREA, cap=CORNER_CAP):
        self.paths = dict(paths)
        self.min_area = min_area
        self.cap = cap

    def provide_masks(self, image, source) -> MaskSet:
        path = self.paths.get(source)
        if path is None:
            raise SchemaError(f"no mask file registered for source {source!r}")
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read mask file {path}: {exc}") from exc
        return mask_set_from_document(doc, source, self.min_area, self.cap)


class RemoteMaskProvider(MaskProvider):
    """Calls a segmentation service speaking POST /segment with PNG bytes.

    Access to the upstream connection pool is serialized; callers may invoke
    provide_masks concurrently.
    """

    def __init__(self, url, timeout=60.0, min_area=MIN_AREA, cap=CORNER_CAP, session=None):
        import requests

        self.url = url.rstrip("/")
        self.timeout = timeout
        self.min_area = min_area
        self.cap = cap
        self._session = session or requests.Session()
        self._lock = threading.Lock()

    def provide_masks(self, image, source) -> MaskSet:
        import requests
        from PIL import Image as PILImage
        import io

        if isinstance(image, LipImage):
            arr = image.intensity
        else:
            arr = np.asarray(image)
        buf = io.BytesIO()
        PILImage.fromarray(arr).save(buf, format="PNG")
        try:
            with self._lock:
                resp = self._session.post(
                    f"{self.url}/segment",
                    data=buf.getvalue(),
                    headers={"Content-Type": "image/png"},
                    timeout=self.timeout,
                )
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"segmentation service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnavailable(f"segmentation service returned {resp.status_code}")
        try:
            doc = resp.json()
        except ValueError as exc:
            raise SchemaError(f"service response is not JSON: {exc}") from exc
        return mask_set_from_document(doc, source, self.min_area, self.cap)
