"""Two-stage cross-modal mask matching.

Stage 1 pairs masks between the projected-intensity image and the RGB image
under a strict cost threshold, producing sparse but reliable matches. From
those a global 2D similarity (scale, rotation, translation) is estimated and
used to warp the projected masks, after which stage 2 re-matches everything
under a relaxed threshold and aggregates corner-level correspondences for
the pose solver.

Matching is mutual-best throughout: a pair is accepted only when its cost is
the strict minimum of both its row and its column in the cost matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import wrap_angle
from .masks import MaskObservation, MaskSet

TAU_STAGE1 = 0.12
TAU_CORNER = 0.25
TAU_STAGE2 = 0.35

_ZERO_NORM = 1e-9


class MatchingError(RuntimeError):
    pass


class NoSparseMatches(MatchingError):
    """Stage 1 produced zero instance pairs; the modalities do not align."""


class InsufficientMatches(MatchingError):
    pass


@dataclass(frozen=True)
class Affine2D:
    """2D similarity warp p -> scale * R(theta) @ p + t, in pixels."""

    scale: float
    theta: float
    t: np.ndarray

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(2))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, np.zeros(2))

    @property
    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def apply(self, points):
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.scale * (self.rotation @ p) + self.t
        return self.scale * (p @ self.rotation.T) + self.t

    def invert(self):
        Rinv = self.rotation.T
        return Affine2D(1.0 / self.scale, -self.theta, -(Rinv @ self.t) / self.scale)


@dataclass(frozen=True)
class MatchPair:
    """One matched mask pair with its corner-level correspondences."""

    lip_mask_id: int
    rgb_mask_id: int
    corner_pairs: list          # [(lip corner idx, rgb corner idx), ...]
    instance_cost: float

    def __post_init__(self):
        lips = [i for i, _ in self.corner_pairs]
        rgbs = [j for _, j in self.corner_pairs]
        if len(set(lips)) != len(lips) or len(set(rgbs)) != len(rgbs):
            raise ValueError("corner pairs must be one-to-one")


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired RGB pixels and LiDAR-frame 3D points for the pose solver."""

    pixels: np.ndarray          # (N, 2)
    lidar_points: np.ndarray    # (N, 3)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        pts = np.asarray(self.lidar_points, dtype=float).reshape(-1, 3)
        if len(px) != len(pts):
            raise ValueError("pixels and lidar_points must pair up")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "lidar_points", pts)

    def __len__(self):
        return len(self.pixels)


def instance_cost(a: MaskObservation, b: MaskObservation, warp: Affine2D) -> float:
    """Bounded [0, 1] bbox cost between a projected-image mask and an RGB mask.

    The projected mask's center is warped and its bbox dims scaled by the
    warp before comparison; with the identity warp the raw observation is
    used, as in the sparse stage.
    """
    wv = warp.scale * a.width
    hv = warp.scale * a.height
    wc, hc = b.width, b.height
    o_hat = warp.apply(a.center)
    dist = float(np.linalg.norm(o_hat - b.center))
    return 0.25 * (
        abs(wc - wv) / (wc + wv)
        + abs(hc - hv) / (hc + hv)
        + 2.0 * (1.0 - math.exp(-dist / (hc + hv + wc + wv)))
    )


def corner_cost(c_v, o_v, c_c, o_c, warp: Affine2D) -> float:
    """Bounded [0, 1] cost comparing center-relative corner offsets.

    Both offset vectors zero counts as a perfect match (0/0 -> 0): identical
    degenerate corners should pair rather than divide by zero.
    """
    dv = warp.apply(np.asarray(c_v, dtype=float)) - warp.apply(np.asarray(o_v, dtype=float))
    dc = np.asarray(c_c, dtype=float) - np.asarray(o_c, dtype=float)
    nv = float(np.linalg.norm(dv))
    nc = float(np.linalg.norm(dc))
    if nv < _ZERO_NORM and nc < _ZERO_NORM:
        return 0.0
    return float(np.linalg.norm(dv - dc)) / (nv + nc)


def mutual_best_select(cost, tau):
    """Pairs (i, j) where cost[i, j] is the strict minimum of row i and column j.

    Entries above `tau` never match; ties produce no pair. The result is
    one-to-one by construction.
    """
    C = np.asarray(cost, dtype=float)
    if C.size == 0:
        return []
    if C.min() < -1e-12 or C.max() > 1.0 + 1e-12:
        raise ValueError("cost entries must lie in [0, 1]")
    pairs = []
    for i in range(C.shape[0]):
        row = C[i]
        j = int(np.argmin(row))
        if row[j] > tau:
            continue
        if (np.delete(row, j) <= row[j]).any():
            continue
        col = C[:, j]
        if (np.delete(col, i) <= col[i]).any():
            continue
        pairs.append((i, j))
    return pairs


def _corner_angles(mask: MaskObservation, pair_indices, center):
    out = []
    for idx in pair_indices:
        v = mask.corners[idx] - center
        if np.linalg.norm(v) < _ZERO_NORM:
            out.append(None)
        else:
            out.append(math.atan2(v[1], v[0]))
    return out


def estimate_affine(pairs, lip: MaskSet, rgb: MaskSet) -> Affine2D:
    """Fit the global similarity warp from stage-1 matches.

    Rotation is the circular mean of per-corner angle differences between
    RGB and projected center-to-corner vectors. Scale comes from bbox area
    ratios: a similarity with length scale s multiplies bbox areas by s^2,
    so each pair contributes the square root of its area ratio. Translation
    then follows from the matched centers.
    """
    lip_by_id = {m.id: m for m in lip.masks}
    rgb_by_id = {m.id: m for m in rgb.masks}
    if not pairs:
        raise InsufficientMatches("need at least one instance pair")
    total_corner_pairs = sum(len(p.corner_pairs) for p in pairs)
    if total_corner_pairs < 2:
        raise InsufficientMatches("need at least two corner pairs")

    diffs = []
    for p in pairs:
        a = lip_by_id[p.lip_mask_id]
        b = rgb_by_id[p.rgb_mask_id]
        ang_v = _corner_angles(a, [i for i, _ in p.corner_pairs], a.center)
        ang_c = _corner_angles(b, [j for _, j in p.corner_pairs], b.center)
        for av, ac in zip(ang_v, ang_c):
            if av is None or ac is None:
                continue
            diffs.append(wrap_angle(ac - av))
    theta = float(np.mean(diffs)) if diffs else 0.0

    scales = []
    for p in pairs:
        a = lip_by_id[p.lip_mask_id]
        b = rgb_by_id[p.rgb_mask_id]
        scales.append(math.sqrt((b.width * b.height) / (a.width * a.height)))
    s = float(np.mean(scales))

    warp = Affine2D(s, theta, np.zeros(2))
    translations = []
    for p in pairs:
        a = lip_by_id[p.lip_mask_id]
        b = rgb_by_id[p.rgb_mask_id]
        translations.append(b.center - warp.apply(a.center))
    t = np.mean(translations, axis=0)
    return Affine2D(s, theta, t)


def _match_corners(a: MaskObservation, b: MaskObservation, warp: Affine2D, tau_corner):
    C = np.empty((len(a.corners), len(b.corners)))
    for r, cv in enumerate(a.corners):
        for s_, cc in enumerate(b.corners):
            C[r, s_] = corner_cost(cv, a.center, cc, b.center, warp)
    return mutual_best_select(C, tau_corner)


def match_with_warp(lip: MaskSet, rgb: MaskSet, warp: Affine2D, tau_instance, tau_corner):
    """One matching pass: mutual-best instances, then mutual-best corners.

    With the identity warp and a strict threshold this is the sparse stage;
    with the fitted warp and a relaxed threshold it is the dense stage.
    """
    cost = np.empty((len(lip.masks), len(rgb.masks)))
    for i, a in enumerate(lip.masks):
        for j, b in enumerate(rgb.masks):
            cost[i, j] = instance_cost(a, b, warp)
    selected = mutual_best_select(cost, tau_instance)
    pairs = []
    for i, j in selected:
        a, b = lip.masks[i], rgb.masks[j]
        corner_pairs = _match_corners(a, b, warp, tau_corner)
        pairs.append(MatchPair(a.id, b.id, corner_pairs, float(cost[i, j])))
    return pairs


@dataclass(frozen=True)
class MatchResult:
    """Dense matching output plus diagnostics for inspection tooling."""

    lip_pixels: np.ndarray      # (N, 2) corner pixels in the projected image
    rgb_pixels: np.ndarray      # (N, 2) matched corner pixels in the RGB image
    affine: Affine2D
    stage1_pairs: list
    stage2_pairs: list
    pair_mask_ids: list         # (lip_mask_id, rgb_mask_id) per correspondence

    def __len__(self):
        return len(self.lip_pixels)

    def to_document(self) -> dict:
        def pairs_doc(pairs):
            return [
                {
                    "lip_mask_id": p.lip_mask_id,
                    "rgb_mask_id": p.rgb_mask_id,
                    "instance_cost": p.instance_cost,
                    "corner_pairs": [[int(i), int(j)] for i, j in p.corner_pairs],
                }
                for p in pairs
            ]

        return {
            "affine": {
                "scale": self.affine.scale,
                "theta": self.affine.theta,
                "t": [float(v) for v in self.affine.t],
            },
            "stage1": pairs_doc(self.stage1_pairs),
            "stage2": pairs_doc(self.stage2_pairs),
            "correspondences": [
                {
                    "lip_pixel": [float(v) for v in lp],
                    "rgb_pixel": [float(v) for v in rp],
                    "lip_mask_id": int(ids[0]),
                    "rgb_mask_id": int(ids[1]),
                }
                for lp, rp, ids in zip(self.lip_pixels, self.rgb_pixels, self.pair_mask_ids)
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_document(), **kwargs)


def two_stage_match(
    lip: MaskSet,
    rgb: MaskSet,
    tau_stage1=TAU_STAGE1,
    tau_corner=TAU_CORNER,
    tau_stage2=TAU_STAGE2,
) -> MatchResult:
    """Run both matching stages and aggregate corner correspondences.

    Raises NoSparseMatches when the strict stage finds no instance pair. If
    the sparse matches carry too few corners to fit the similarity, the
    identity warp is used for stage 2 (conservative fallback).
    """
    if not lip.masks or not rgb.masks:
        raise NoSparseMatches("a mask set is empty")
    stage1 = match_with_warp(lip, rgb, Affine2D.identity(), tau_stage1, tau_corner)
    if not stage1:
        raise NoSparseMatches("no instance pair passed the strict stage")
    try:
        affine = estimate_affine(stage1, lip, rgb)
    except InsufficientMatches:
        affine = Affine2D.identity()

    stage2 = match_with_warp(lip, rgb, affine, tau_stage2, tau_corner)

    lip_by_id = {m.id: m for m in lip.masks}
    rgb_by_id = {m.id: m for m in rgb.masks}
    lip_px, rgb_px, ids = [], [], []
    for p in stage2:
        a = lip_by_id[p.lip_mask_id]
        b = rgb_by_id[p.rgb_mask_id]
        for i, j in p.corner_pairs:
            lip_px.append(a.corners[i])
            rgb_px.append(b.corners[j])
            ids.append((p.lip_mask_id, p.rgb_mask_id))
    return MatchResult(
        np.asarray(lip_px, dtype=float).reshape(-1, 2),
        np.asarray(rgb_px, dtype=float).reshape(-1, 2),
        affine,
        stage1,
        stage2,
        ids,
    )


def propagation_pixel_error(K, rotation, translation, q_v, p_v):
    """Numerical validity check for propagating one mask's warp to a neighbor.

    Given camera intrinsics, a small relative camera motion (R, t), a
    reference point q_v and a target point p_v (both in the first camera's
    frame), compares the target's exact reprojection into the second camera
    against the prediction of the affine map derived from the reference
    point alone. Returns the pixel error. The two agree when reference and
    target are close in depth, which is what justifies warping whole masks
    with a single similarity.
    """
    Km = K.matrix
    Kinv = np.linalg.inv(Km)
    q_v = np.asarray(q_v, dtype=float)
    p_v = np.asarray(p_v, dtype=float)
    q_c = rotation @ q_v + translation
    p_c = rotation @ p_v + translation

    A = (q_v[2] / q_c[2]) * (Km @ rotation @ Kinv)
    b = (Km @ translation) / q_c[2]

    p_tilde_v = (Km @ p_v) / p_v[2]
    pred = A @ p_tilde_v + b
    pred = pred[:2] / pred[2]

    exact = (Km @ p_c) / p_c[2]
    return float(np.linalg.norm(pred - exact[:2]))
