"""Robust extrinsic estimation from 2D-3D correspondences.

RANSAC over minimal 6-point subsets, each fitted by damped nonlinear least
squares, followed by refinement on the consensus set. The refinement accepts
a step only when the mean reprojection error (mean of per-point pixel norms,
not squared) decreases, so the reported error is monotone by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DEPTH_EPSILON, Intrinsics, RigidTransform
from .matching import CorrespondenceSet

MIN_CORRESPONDENCES = 6
MINIMAL_SUBSET = 6


class PnpError(RuntimeError):
    pass


class TooFewCorrespondences(PnpError):
    pass


class NoConsensus(PnpError):
    pass


@dataclass(frozen=True)
class PnpConfig:
    ransac_iters: int = 500
    inlier_px: float = 2.0
    min_inliers: int = 8
    lm_damping_init: float = 1e-3
    behind_penalty: float = 1e4
    seed: int = 0
    confidence: float = 0.999
    hypothesis_lm_iters: int = 10
    refine_lm_iters: int = 50
    # Testing hook: override the hypothesis sample sequence.
    sample_sequence: tuple = None


@dataclass(frozen=True)
class PnpSolution:
    pose: RigidTransform
    mean_reproj_error: float
    inlier_mask: np.ndarray
    iterations_used: int

    def __post_init__(self):
        object.__setattr__(self, "inlier_mask", np.asarray(self.inlier_mask, dtype=bool))


def _axis_angle_matrix(w):
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        W = _skew(w)
        return np.eye(3) + W + 0.5 * W @ W
    axis = w / theta
    W = _skew(axis)
    return np.eye(3) + math.sin(theta) * W + (1.0 - math.cos(theta)) * (W @ W)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=float)


def residuals(pose: RigidTransform, points3d, pixels, K: Intrinsics, behind_penalty=1e4):
    """Per-point reprojection residuals (N, 2); behind-camera points get a
    synthetic residual of magnitude `behind_penalty` so they never look good."""
    cam = pose.apply(points3d)
    z = cam[:, 2]
    ok = z > DEPTH_EPSILON
    zz = np.where(ok, z, 1.0)
    proj = np.column_stack([K.fx * cam[:, 0] / zz + K.cx, K.fy * cam[:, 1] / zz + K.cy])
    res = proj - np.asarray(pixels, dtype=float)
    res[~ok] = behind_penalty / math.sqrt(2.0)
    return res, ok


def residual_jacobian(pose: RigidTransform, points3d, K: Intrinsics):
    """Analytic Jacobian of the stacked residual wrt (w, dt).

    The pose increment is a left-composed axis-angle step: R <- exp([w]x) R,
    t <- exp([w]x) t + dt. Rows of behind-camera points are zeroed.
    Returns (J (2N, 6), valid (N,)).
    """
    pts = np.asarray(points3d, dtype=float)
    cam = pose.apply(pts)
    z = cam[:, 2]
    ok = z > DEPTH_EPSILON
    n = len(pts)
    J = np.zeros((2 * n, 6))
    zz = np.where(ok, z, 1.0)
    inv_z = 1.0 / zz
    x, y = cam[:, 0], cam[:, 1]
    # d(proj)/d(cam)
    du = np.column_stack([K.fx * inv_z, np.zeros(n), -K.fx * x * inv_z**2])
    dv = np.column_stack([np.zeros(n), K.fy * inv_z, -K.fy * y * inv_z**2])
    # d(cam)/dw = -[cam]x, and g @ (-[c]x) = c x g; d(cam)/dt = I
    J[0::2, :3] = np.cross(cam, du)
    J[0::2, 3:] = du
    J[1::2, :3] = np.cross(cam, dv)
    J[1::2, 3:] = dv
    bad = ~ok
    J[0::2][bad] = 0.0
    J[1::2][bad] = 0.0
    return J, ok


def reprojection_error(pose: RigidTransform, corr: CorrespondenceSet, K: Intrinsics, behind_penalty=1e4):
    """Mean per-point pixel reprojection error at a fixed pose."""
    if len(corr) < 1:
        raise TooFewCorrespondences("need at least one correspondence")
    res, ok = residuals(pose, corr.lidar_points, corr.pixels, K, behind_penalty)
    norms = np.linalg.norm(res, axis=1)
    norms[~ok] = behind_penalty
    return float(norms.mean())


def _mean_norm(pose, points3d, pixels, K, behind_penalty):
    res, ok = residuals(pose, points3d, pixels, K, behind_penalty)
    norms = np.linalg.norm(res, axis=1)
    norms[~ok] = behind_penalty
    return float(norms.mean())


def _refine(pose, points3d, pixels, K, cfg, max_iters):
    """Damped least squares; accepts a step only if the mean-norm error drops.

    Returns (pose, error, iterations run).
    """
    lam = cfg.lm_damping_init
    err = _mean_norm(pose, points3d, pixels, K, cfg.behind_penalty)
    its = 0
    for its in range(1, max_iters + 1):
        res, _ = residuals(pose, points3d, pixels, K, cfg.behind_penalty)
        J, _ = residual_jacobian(pose, points3d, K)
        r = res.reshape(-1)
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ) + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            dR = _axis_angle_matrix(delta[:3])
            cand = RigidTransform(
                dR @ pose.rotation,
                dR @ pose.translation + delta[3:],
                pose.source_frame,
                pose.target_frame,
            )
            cand_err = _mean_norm(cand, points3d, pixels, K, cfg.behind_penalty)
            if cand_err < err:
                pose = cand
                err = cand_err
                lam = max(lam * 0.3, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
        if err < 1e-12 or np.linalg.norm(delta) < 1e-14:
            break
    return pose, err, its


def solve_pnp_ransac(corr: CorrespondenceSet, K: Intrinsics, cfg: PnpConfig = PnpConfig(), init_pose=None):
    """RANSAC + damped-least-squares PnP.

    Hypotheses are minimal 6-point subsets fitted from `init_pose` (identity
    frame-aligned pose by default); the best hypothesis by (inlier count,
    then error, then hypothesis index) is refined on all its inliers.
    """
    n = len(corr)
    if n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need at least {MIN_CORRESPONDENCES}, got {n}")
    if init_pose is None:
        init_pose = RigidTransform.identity("lidar", "camera")

    rng = np.random.default_rng(cfg.seed)
    if cfg.sample_sequence is not None:
        samples = [np.asarray(s, dtype=int) for s in cfg.sample_sequence]
        max_hyp = len(samples)
    else:
        samples = None
        max_hyp = cfg.ransac_iters

    pts = corr.lidar_points
    pix = corr.pixels

    best = None  # (inlier_count, err, hyp_index, pose, inlier_mask)
    needed = max_hyp
    h = 0
    while h < min(needed, max_hyp):
        idx = samples[h] if samples is not None else rng.choice(n, size=MINIMAL_SUBSET, replace=False)
        hyp_cfg = cfg
        pose_h, _, _ = _refine(init_pose, pts[idx], pix[idx], K, hyp_cfg, cfg.hypothesis_lm_iters)
        res, ok = residuals(pose_h, pts, pix, K, cfg.behind_penalty)
        norms = np.linalg.norm(res, axis=1)
        norms[~ok] = cfg.behind_penalty
        inliers = norms <= cfg.inlier_px
        count = int(inliers.sum())
        if count >= MIN_CORRESPONDENCES:
            err = float(norms[inliers].mean())
            key = (-count, err, h)
            if best is None or key < best[0]:
                best = (key, pose_h, inliers)
                # Adaptive iteration bound from the inlier ratio.
                ratio = count / n
                denom = math.log(max(1.0 - ratio**MINIMAL_SUBSET, 1e-16))
                if denom < 0:
                    needed = min(max_hyp, int(math.ceil(math.log(1.0 - cfg.confidence) / denom)))
        h += 1

    if best is None or int(best[2].sum()) < cfg.min_inliers:
        raise NoConsensus("no hypothesis reached the inlier quorum")

    _, pose_h, inliers = best
    refined, _, its = _refine(pose_h, pts[inliers], pix[inliers], K, cfg, cfg.refine_lm_iters)
    # Re-evaluate membership at the refined pose.
    res, ok = residuals(refined, pts, pix, K, cfg.behind_penalty)
    norms = np.linalg.norm(res, axis=1)
    norms[~ok] = cfg.behind_penalty
    final_inliers = norms <= cfg.inlier_px
    if int(final_inliers.sum()) < max(cfg.min_inliers, 4):
        final_inliers = inliers
    err = float(norms[final_inliers].mean())
    return PnpSolution(refined, err, final_inliers, its)
