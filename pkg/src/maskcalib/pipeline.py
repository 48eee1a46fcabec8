"""The coarse-to-fine calibration loop.

Each iteration renders the cloud through the current virtual-camera pose,
segments both modalities, matches masks, recovers 3D points for the matched
projected-image corners, and solves a robust PnP. The solved extrinsics
become the next virtual-camera pose; iteration stops as soon as the mean
reprojection error stops improving, returning the last improving iterate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, RigidTransform, canonical_virtual_pose, euler_from_rotation
from .lip import EmptyFrustum, LipImage, fill_and_enhance, render_lip, snap_to_set_pixel
from .masks import MaskError, ProviderUnavailable, SchemaError
from .matching import (
    TAU_CORNER,
    TAU_STAGE1,
    TAU_STAGE2,
    CorrespondenceSet,
    MatchingError,
    MatchResult,
    two_stage_match,
)
from .pnp import NoConsensus, PnpConfig, PnpError, PnpSolution, solve_pnp_ransac

EPSILON_INCREASE = "epsilon_increase"
MAX_ITERS = "max_iters"
FAILURE = "failure"


class CalibrationFailed(RuntimeError):
    def __init__(self, iteration, cause):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    max_iters: int = 6
    initial_pose: RigidTransform | None = None
    seed: int = 0
    snap_radius_px: int = 3
    ransac_iters: int = 500
    inlier_px: float = 2.0
    min_inliers: int = 8
    tau_stage1: float = TAU_STAGE1
    tau_corner: float = TAU_CORNER
    tau_stage2: float = TAU_STAGE2


@dataclass(frozen=True)
class IterationRecord:
    pose: RigidTransform            # lidar -> camera estimate of this iteration
    epsilon: float                  # mean reprojection error, px
    n_correspondences: int
    n_stage1: int
    n_stage2: int


@dataclass(frozen=True)
class CalibrationResult:
    final_pose: RigidTransform
    per_iteration: list
    iterations_run: int
    terminated_by: str
    final_correspondences: CorrespondenceSet
    final_match_doc: dict

    def to_document(self) -> dict:
        e = euler_from_rotation(self.final_pose.rotation)
        return {
            "extrinsic_matrix": [float(v) for v in self.final_pose.matrix.reshape(-1)],
            "euler_deg": {
                "yaw": float(np.degrees(e.yaw)),
                "pitch": float(np.degrees(e.pitch)),
                "roll": float(np.degrees(e.roll)),
            },
            "translation": [float(v) for v in self.final_pose.translation],
            "iterations_run": self.iterations_run,
            "terminated_by": self.terminated_by,
            "per_iteration": [
                {
                    "epsilon": r.epsilon,
                    "n_correspondences": r.n_correspondences,
                    "n_stage1": r.n_stage1,
                    "n_stage2": r.n_stage2,
                    "extrinsic_matrix": [float(v) for v in r.pose.matrix.reshape(-1)],
                }
                for r in self.per_iteration
            ],
            "matches": self.final_match_doc,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_document(), **kwargs)

    def to_text(self) -> str:
        doc = self.to_document()
        lines = ["extrinsic matrix (row-major, lidar -> camera):"]
        M = self.final_pose.matrix
        for row in M:
            lines.append("  " + "  ".join(f"{v: .9f}" for v in row))
        e = doc["euler_deg"]
        lines.append(
            f"euler (deg): yaw {e['yaw']:.4f}  pitch {e['pitch']:.4f}  roll {e['roll']:.4f}"
        )
        t = self.final_pose.translation
        lines.append(f"translation (m): {t[0]:.4f} {t[1]:.4f} {t[2]:.4f}")
        lines.append(f"terminated by: {self.terminated_by} after {self.iterations_run} iteration(s)")
        lines.append("iter   epsilon(px)   corrs  stage1  stage2")
        for i, r in enumerate(self.per_iteration, start=1):
            lines.append(
                f"{i:4d}   {r.epsilon:11.5f}   {r.n_correspondences:5d}  {r.n_stage1:6d}  {r.n_stage2:6d}"
            )
        return "\n".join(lines)


def recover_correspondences(match: MatchResult, lip_img: LipImage, cloud, radius=3):
    """Trade matched projected-image corners for 3D points via the pixel map.

    A corner snaps to the nearest data-carrying pixel within `radius`; corners
    with no such pixel are dropped rather than interpolated, since depth at
    silhouette discontinuities is unreliable.
    """
    cloud = np.asarray(cloud, dtype=float)
    pixels, points = [], []
    for lip_px, rgb_px in zip(match.lip_pixels, match.rgb_pixels):
        hit = snap_to_set_pixel(lip_px, lip_img, radius)
        if hit is None:
            continue
        r, c = hit
        idx = int(lip_img.point_index[r, c])
        points.append(cloud[idx, :3])
        pixels.append(rgb_px)
    return CorrespondenceSet(
        np.asarray(pixels, dtype=float).reshape(-1, 2),
        np.asarray(points, dtype=float).reshape(-1, 3),
    )


def calibrate(cloud, rgb_image, K: Intrinsics, provider, cfg: PipelineConfig = PipelineConfig()):
    """Run the iterative calibration and return a CalibrationResult.

    Raises CalibrationFailed if no iteration produces a pose; failures after
    at least one success terminate the loop and keep the best result.
    """
    virtual_pose = cfg.initial_pose or canonical_virtual_pose("lidar", "virtual_camera")
    rgb_masks = provider.provide_masks(rgb_image, "RGB")

    records = []
    artifacts = []  # (CorrespondenceSet, match doc) per retained iteration
    prev_eps = np.inf
    terminated_by = MAX_ITERS
    for k in range(1, cfg.max_iters + 1):
        try:
            lip_img = fill_and_enhance(render_lip(cloud, virtual_pose, K))
            lip_masks = provider.provide_masks(lip_img, "LIP")
            match = two_stage_match(
                lip_masks, rgb_masks, cfg.tau_stage1, cfg.tau_corner, cfg.tau_stage2
            )
            corr = recover_correspondences(match, lip_img, cloud, cfg.snap_radius_px)
            sol = solve_pnp_ransac(
                corr,
                K,
                PnpConfig(
                    ransac_iters=cfg.ransac_iters,
                    inlier_px=cfg.inlier_px,
                    min_inliers=cfg.min_inliers,
                    seed=cfg.seed + k,
                ),
                init_pose=RigidTransform(
                    virtual_pose.rotation, virtual_pose.translation, "lidar", "camera"
                ),
            )
        except (EmptyFrustum, MatchingError, PnpError, MaskError, ProviderUnavailable) as exc:
            if records:
                terminated_by = FAILURE
                break
            raise CalibrationFailed(k, exc) from exc

        eps = sol.mean_reproj_error
        if eps >= prev_eps:
            terminated_by = EPSILON_INCREASE
            break
        records.append(
            IterationRecord(sol.pose, eps, len(corr), len(match.stage1_pairs), len(match.stage2_pairs))
        )
        artifacts.append((corr, match.to_document()))
        prev_eps = eps
        virtual_pose = RigidTransform(
            sol.pose.rotation, sol.pose.translation, "lidar", "virtual_camera"
        )

    best = records[-1]
    corr, match_doc = artifacts[-1]
    return CalibrationResult(best.pose, records, len(records), terminated_by, corr, match_doc)


@dataclass(frozen=True)
class ManualCalibration:
    solution: PnpSolution
    residuals: np.ndarray           # per-pick pixel error at the solved pose
    planar_degenerate: bool

    def to_document(self) -> dict:
        return {
            "extrinsic_matrix": [float(v) for v in self.solution.pose.matrix.reshape(-1)],
            "epsilon": self.solution.mean_reproj_error,
            "residuals": [float(v) for v in self.residuals],
            "inliers": [bool(v) for v in self.solution.inlier_mask],
            "planar_degenerate": self.planar_degenerate,
        }


def manual_calibrate(picks: CorrespondenceSet, K: Intrinsics, inlier_px=5.0, seed=0,
                     init_pose=None) -> ManualCalibration:
    """Solve from human-clicked correspondences with a relaxed inlier gate.

    Flags planar degeneracy when the picked 3D points have almost no extent
    along their thinnest principal axis, which leaves the pose ambiguous.
    """
    from .pnp import MIN_CORRESPONDENCES, TooFewCorrespondences, residuals

    if len(picks) < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need at least {MIN_CORRESPONDENCES} picks")
    if init_pose is None:
        init_pose = RigidTransform(
            canonical_virtual_pose().rotation, np.zeros(3), "lidar", "camera"
        )
    pts = picks.lidar_points
    centered = pts - pts.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    planar = bool(svals[-1] < 0.05 * svals[0] + 1e-12)

    sol = solve_pnp_ransac(
        picks,
        K,
        PnpConfig(inlier_px=inlier_px, min_inliers=MIN_CORRESPONDENCES, seed=seed),
        init_pose=init_pose,
    )
    res, ok = residuals(sol.pose, picks.lidar_points, picks.pixels, K)
    norms = np.linalg.norm(res, axis=1)
    norms[~ok] = np.inf
    return ManualCalibration(sol, norms, planar)
