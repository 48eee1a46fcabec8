import math

import numpy as np
import pytest

from maskcalib.dataio import generate_synthetic, random_scene_spec
from maskcalib.geometry import (
    RigidTransform,
    canonical_virtual_pose,
    rotation_error,
    translation_error,
)
from maskcalib.masks import SyntheticMaskProvider
from maskcalib.matching import CorrespondenceSet
from maskcalib.pipeline import (
    EPSILON_INCREASE,
    FAILURE,
    MAX_ITERS,
    CalibrationFailed,
    PipelineConfig,
    calibrate,
    manual_calibrate,
)
from maskcalib.pnp import TooFewCorrespondences

PROVIDER = SyntheticMaskProvider()


def scene(seed, **kwargs):
    spec = random_scene_spec(seed, **kwargs)
    pair, _, _ = generate_synthetic(spec, seed=seed + 10_000)
    return pair


class TestCalibrate:
    def test_fixed_point_at_canonical_truth(self):
        spec = random_scene_spec(3, max_rot_deg=0.0, max_trans=0.0)
        pair, _, _ = generate_synthetic(spec, seed=99)
        res = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER,
                        PipelineConfig(max_iters=2, seed=0))
        assert rotation_error(res.final_pose, pair.truth_extrinsics) <= math.radians(0.2)
        assert translation_error(res.final_pose, pair.truth_extrinsics) <= 0.02
        assert res.iterations_run >= 1

    def test_perturbed_truth_recovered(self):
        pair = scene(11)
        res = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER,
                        PipelineConfig(seed=0))
        assert rotation_error(res.final_pose, pair.truth_extrinsics) <= math.radians(0.5)
        assert translation_error(res.final_pose, pair.truth_extrinsics) <= 0.05

    def test_epsilon_strictly_decreases(self):
        pair = scene(12)
        res = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER,
                        PipelineConfig(seed=1))
        eps = [r.epsilon for r in res.per_iteration]
        assert all(b < a for a, b in zip(eps, eps[1:]))
        assert res.final_pose is res.per_iteration[-1].pose
        assert res.iterations_run == len(res.per_iteration)
        assert res.terminated_by in (EPSILON_INCREASE, MAX_ITERS, FAILURE)

    def test_idempotent_given_seed(self):
        pair = scene(13)
        cfg = PipelineConfig(seed=7)
        a = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER, cfg)
        b = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER, cfg)
        assert np.array_equal(a.final_pose.matrix, b.final_pose.matrix)
        assert [r.epsilon for r in a.per_iteration] == [r.epsilon for r in b.per_iteration]

    def test_fov_contract(self):
        pair = scene(14)
        res = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER,
                        PipelineConfig(seed=2))
        K = pair.intrinsics
        cam = res.final_pose.apply(res.final_correspondences.lidar_points)
        assert (cam[:, 2] > 0).all()
        u = K.fx * cam[:, 0] / cam[:, 2] + K.cx
        v = K.fy * cam[:, 1] / cam[:, 2] + K.cy
        assert ((u >= -1) & (u <= K.width) & (v >= -1) & (v <= K.height)).all()

    def test_failure_wraps_cause_and_iteration(self):
        pair = scene(15)
        # Uniform image: segmentation finds nothing -> first iteration fails.
        blank = np.zeros_like(pair.image)
        with pytest.raises(CalibrationFailed) as err:
            calibrate(pair.cloud, blank, pair.intrinsics, PROVIDER, PipelineConfig(seed=0))
        assert err.value.iteration == 1

    def test_result_document(self):
        pair = scene(16)
        res = calibrate(pair.cloud, pair.image, pair.intrinsics, PROVIDER,
                        PipelineConfig(seed=3))
        doc = res.to_document()
        assert len(doc["extrinsic_matrix"]) == 16
        assert set(doc["euler_deg"]) == {"yaw", "pitch", "roll"}
        assert doc["iterations_run"] == len(doc["per_iteration"])
        assert "matches" in doc
        text = res.to_text()
        assert "epsilon" in text and "terminated by" in text


def synth_picks(truth, K, n=8, noise_px=0.0, seed=0, planar=False):
    """Desk-scale scripted picks: lateral spread proportional to depth."""
    rng = np.random.default_rng(seed)
    if planar:
        # all picks on one vertical plane x = 2.5 in the LiDAR frame
        pts = np.column_stack([np.full(n, 2.5), rng.uniform(-1.2, 1.2, n), rng.uniform(-0.8, 0.8, n)])
    else:
        x = rng.uniform(1.5, 3.5, n)
        pts = np.column_stack([x, rng.uniform(-0.6, 0.6, n) * x, rng.uniform(-0.4, 0.4, n) * x])
    cam = truth.apply(pts)
    z = cam[:, 2]
    pix = np.column_stack([K.fx * cam[:, 0] / z + K.cx, K.fy * cam[:, 1] / z + K.cy])
    if noise_px:
        pix = pix + rng.normal(scale=noise_px, size=pix.shape)
    return CorrespondenceSet(pix, pts)


class TestManualCalibrate:
    def _truth(self):
        return RigidTransform(
            canonical_virtual_pose().rotation, np.array([0.05, -0.03, 0.1]), "lidar", "camera"
        )

    def test_exact_picks(self):
        pair = scene(20)
        truth = self._truth()
        picks = synth_picks(truth, pair.intrinsics, n=8)
        manual = manual_calibrate(picks, pair.intrinsics)
        assert np.all(manual.residuals < 1e-6)
        assert not manual.planar_degenerate

    def test_noisy_picks(self):
        pair = scene(21)
        truth = self._truth()
        picks = synth_picks(truth, pair.intrinsics, n=8, noise_px=2.0, seed=4)
        manual = manual_calibrate(picks, pair.intrinsics)
        assert manual.solution.mean_reproj_error <= 5.0
        assert rotation_error(manual.solution.pose, truth) <= math.radians(1.0)
        assert translation_error(manual.solution.pose, truth) <= 0.1

    def test_planar_degeneracy_flagged(self):
        pair = scene(22)
        truth = self._truth()
        picks = synth_picks(truth, pair.intrinsics, n=6, planar=True, seed=5)
        manual = manual_calibrate(picks, pair.intrinsics)
        assert manual.planar_degenerate

    def test_too_few_picks(self):
        pair = scene(23)
        picks = synth_picks(self._truth(), pair.intrinsics, n=5)
        with pytest.raises(TooFewCorrespondences):
            manual_calibrate(picks, pair.intrinsics)

    def test_document(self):
        pair = scene(24)
        picks = synth_picks(self._truth(), pair.intrinsics, n=8)
        doc = manual_calibrate(picks, pair.intrinsics).to_document()
        assert len(doc["extrinsic_matrix"]) == 16
        assert len(doc["residuals"]) == 8
        assert isinstance(doc["planar_degenerate"], bool)
