import math

import numpy as np
import pytest

from maskcalib.geometry import EulerAngles, Intrinsics, rotation_from_euler
from maskcalib.masks import MaskObservation, MaskSet, ensure_ccw
from maskcalib.matching import (
    Affine2D,
    CorrespondenceSet,
    InsufficientMatches,
    MatchPair,
    NoSparseMatches,
    corner_cost,
    estimate_affine,
    instance_cost,
    mutual_best_select,
    propagation_pixel_error,
    two_stage_match,
)

IDENT = Affine2D.identity()


def rect_mask(mid, cx, cy, w, h, source="LIP"):
    corners = ensure_ccw(
        np.array(
            [
                [cx - w / 2, cy - h / 2],
                [cx + w / 2, cy - h / 2],
                [cx + w / 2, cy + h / 2],
                [cx - w / 2, cy + h / 2],
            ]
        )
    )
    return MaskObservation(mid, (cx, cy), (w, h), corners, w * h, source)


def disk_mask(mid, cx, cy, radius, source="LIP", n=12, phase=0.0):
    """Mask whose bbox is exactly rotation-covariant: corners on a circle."""
    ang = phase + 2 * np.pi * np.arange(n) / n
    corners = np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang)])
    return MaskObservation(mid, (cx, cy), (2 * radius, 2 * radius), corners, np.pi * radius**2, source)


def warp_disk_mask(m, warp, source="RGB"):
    center = warp.apply(m.center)
    corners = warp.apply(m.corners)
    size = (warp.scale * m.size[0], warp.scale * m.size[1])
    return MaskObservation(m.id, center, size, corners, m.area * warp.scale**2, source)


class TestAffine2D:
    def test_apply_unapply(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            warp = Affine2D(rng.uniform(0.5, 2), rng.uniform(-1, 1), rng.normal(size=2) * 50)
            pts = rng.normal(size=(10, 2)) * 100
            back = warp.invert().apply(warp.apply(pts))
            assert np.allclose(back, pts, atol=1e-9)

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            Affine2D(0.0, 0.0, np.zeros(2))


class TestInstanceCost:
    def test_identical_masks_zero(self):
        a = rect_mask(0, 100, 100, 50, 40)
        b = rect_mask(0, 100, 100, 50, 40, source="RGB")
        assert instance_cost(a, b, IDENT) == pytest.approx(0.0, abs=1e-12)

    def test_width_ratio_example(self):
        # w terms: |100-50|/150 = 1/3; /4 -> 1/12
        a = rect_mask(0, 100, 100, 50, 40)
        b = rect_mask(0, 100, 100, 100, 40, source="RGB")
        assert instance_cost(a, b, IDENT) == pytest.approx(1 / 12, abs=1e-12)

    def test_far_center_saturates(self):
        a = rect_mask(0, 0, 0, 50, 40)
        b = rect_mask(0, 1e9, 1e9, 50, 40, source="RGB")
        assert instance_cost(a, b, IDENT) == pytest.approx(0.5, abs=1e-6)
        assert instance_cost(a, b, IDENT) <= 1.0

    def test_bounded_random(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            a = rect_mask(0, *rng.uniform(50, 500, 2), *rng.uniform(10, 200, 2))
            b = rect_mask(0, *rng.uniform(50, 500, 2), *rng.uniform(10, 200, 2), source="RGB")
            warp = Affine2D(rng.uniform(0.5, 2), rng.uniform(-0.5, 0.5), rng.normal(size=2) * 30)
            c = instance_cost(a, b, warp)
            assert 0.0 <= c <= 1.0

    def test_symmetric_under_axis_swap(self):
        # Swapping the width/height roles consistently across both masks
        # (transposing all coordinates) leaves the cost unchanged.
        a = rect_mask(0, 120, 80, 60, 30)
        b = rect_mask(0, 140, 95, 50, 44, source="RGB")
        at = rect_mask(0, 80, 120, 30, 60)
        bt = rect_mask(0, 95, 140, 44, 50, source="RGB")
        assert instance_cost(a, b, IDENT) == pytest.approx(instance_cost(at, bt, IDENT), abs=1e-12)

    def test_identity_warp_uses_raw_center(self):
        a = rect_mask(0, 100, 100, 50, 40)
        b = rect_mask(0, 130, 100, 50, 40, source="RGB")
        expected = 0.25 * 2 * (1 - math.exp(-30 / 180))
        assert instance_cost(a, b, IDENT) == pytest.approx(expected, abs=1e-12)


class TestCornerCost:
    def test_identical_offsets_zero(self):
        assert corner_cost((110, 100), (100, 100), (210, 200), (200, 200), IDENT) == 0.0

    def test_opposite_unit_offsets_one(self):
        assert corner_cost((101, 100), (100, 100), (199, 200), (200, 200), IDENT) == pytest.approx(1.0)

    def test_degenerate_zero_by_convention(self):
        assert corner_cost((100, 100), (100, 100), (200, 200), (200, 200), IDENT) == 0.0

    def test_bounded_random(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            cv, ov, cc, oc = rng.normal(size=(4, 2)) * 100
            warp = Affine2D(rng.uniform(0.5, 2), rng.uniform(-0.5, 0.5), rng.normal(size=2) * 30)
            c = corner_cost(cv, ov, cc, oc, warp)
            assert 0.0 <= c <= 1.0 + 1e-12


class TestMutualBest:
    def test_diagonal_dominant(self):
        C = np.full((3, 3), 0.9)
        np.fill_diagonal(C, 0.1)
        assert mutual_best_select(C, 0.5) == [(0, 0), (1, 1), (2, 2)]

    def test_threshold_rejects_all(self):
        assert mutual_best_select(np.full((3, 3), 0.9), 0.5) == []

    def test_row_tie_yields_no_pair(self):
        C = np.array([[0.2, 0.2, 0.9], [0.9, 0.9, 0.1], [0.9, 0.9, 0.9]])
        pairs = mutual_best_select(C, 0.5)
        assert (0, 0) not in pairs and (0, 1) not in pairs
        assert (1, 2) in pairs

    def test_one_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            C = rng.uniform(0, 1, size=(6, 8))
            pairs = mutual_best_select(C, 0.9)
            rows = [i for i, _ in pairs]
            cols = [j for _, j in pairs]
            assert len(set(rows)) == len(rows)
            assert len(set(cols)) == len(cols)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        C = rng.uniform(0, 1, size=(5, 7))
        base = set(mutual_best_select(C, 0.8))
        pr = rng.permutation(5)
        pc = rng.permutation(7)
        permuted = mutual_best_select(C[np.ix_(pr, pc)], 0.8)
        remapped = {(pr[i], pc[j]) for i, j in permuted}
        assert remapped == base

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            mutual_best_select(np.array([[1.5]]), 0.5)


class TestEstimateAffine:
    def test_pure_translation(self):
        d = np.array([12.0, -7.0])
        lip_masks = [disk_mask(i, 100 + 120 * i, 100 + 40 * i, 30 + 4 * i) for i in range(3)]
        warp = Affine2D(1.0, 0.0, d)
        rgb_masks = [warp_disk_mask(m, warp) for m in lip_masks]
        lip = MaskSet(lip_masks, (600, 400), "LIP")
        rgb = MaskSet(rgb_masks, (600, 400), "RGB")
        pairs = [
            MatchPair(m.id, m.id, [(k, k) for k in range(len(m.corners))], 0.0) for m in lip_masks
        ]
        est = estimate_affine(pairs, lip, rgb)
        assert est.theta == pytest.approx(0.0, abs=1e-12)
        assert est.scale == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(est.t, d, atol=1e-9)

    def test_exact_similarity_recovery(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            s0 = rng.uniform(0.5, 2.0)
            th0 = rng.uniform(-np.pi / 6, np.pi / 6)
            t0 = rng.uniform(-200, 200, size=2)
            warp = Affine2D(s0, th0, t0)
            lip_masks = [
                disk_mask(i, *rng.uniform(1000, 1300, 2), rng.uniform(25, 60), phase=rng.uniform(0, 1))
                for i in range(4)
            ]
            rgb_masks = [warp_disk_mask(m, warp) for m in lip_masks]
            lip = MaskSet(lip_masks, (6000, 6000), "LIP")
            rgb = MaskSet(rgb_masks, (6000, 6000), "RGB")
            pairs = [
                MatchPair(m.id, m.id, [(k, k) for k in range(len(m.corners))], 0.0)
                for m in lip_masks
            ]
            est = estimate_affine(pairs, lip, rgb)
            assert est.scale == pytest.approx(s0, abs=1e-6)
            assert est.theta == pytest.approx(th0, abs=1e-6)
            assert np.allclose(est.t, t0, atol=1e-6)

    def test_scale_is_mean_of_per_pair_length_scales(self):
        # bbox area ratios 1.0 and 4.0 give length scales 1.0 and 2.0.
        lip_masks = [disk_mask(0, 100, 100, 30), disk_mask(1, 300, 100, 30)]
        rgb_masks = [
            disk_mask(0, 100, 100, 30, source="RGB"),
            disk_mask(1, 300, 100, 60, source="RGB"),
        ]
        lip = MaskSet(lip_masks, (600, 400), "LIP")
        rgb = MaskSet(rgb_masks, (600, 400), "RGB")
        pairs = [MatchPair(0, 0, [(0, 0), (1, 1)], 0.0), MatchPair(1, 1, [(0, 0)], 0.0)]
        est = estimate_affine(pairs, lip, rgb)
        assert est.scale == pytest.approx(1.5, abs=1e-12)

    def test_insufficient_matches(self):
        lip = MaskSet([disk_mask(0, 100, 100, 30)], (600, 400), "LIP")
        rgb = MaskSet([disk_mask(0, 100, 100, 30, source="RGB")], (600, 400), "RGB")
        with pytest.raises(InsufficientMatches):
            estimate_affine([], lip, rgb)
        with pytest.raises(InsufficientMatches):
            estimate_affine([MatchPair(0, 0, [(0, 0)], 0.0)], lip, rgb)


def make_warp_about(center, scale, theta_deg, shift):
    """Similarity whose fixed point sits near `center` (plus a small shift)."""
    lin = Affine2D(scale, math.radians(theta_deg), np.zeros(2))
    t = np.asarray(center, float) - lin.apply(np.asarray(center, float)) + np.asarray(shift, float)
    return Affine2D(scale, math.radians(theta_deg), t)


def disk_scene(seed, n_masks=6, image=(640, 480)):
    rng = np.random.default_rng(seed)
    masks = []
    centers = []
    tries = 0
    while len(masks) < n_masks and tries < 500:
        tries += 1
        c = rng.uniform([90, 90], [image[0] - 90, image[1] - 90])
        r = rng.uniform(28, 55)
        if any(np.linalg.norm(c - o) < 2.6 * max(r, ro) for o, ro in centers):
            continue
        centers.append((c, r))
        masks.append(disk_mask(len(masks), c[0], c[1], r, phase=rng.uniform(0, 2 * np.pi)))
    return MaskSet(masks, image, "LIP")


class TestTwoStageMatch:
    def test_identical_sets_identity_affine(self):
        lip = disk_scene(0)
        rgb = MaskSet([warp_disk_mask(m, IDENT) for m in lip.masks], lip.image_size, "RGB")
        result = two_stage_match(lip, rgb)
        assert result.affine.scale == pytest.approx(1.0, abs=1e-9)
        assert result.affine.theta == pytest.approx(0.0, abs=1e-9)
        assert {(p.lip_mask_id, p.rgb_mask_id) for p in result.stage2_pairs} == {
            (m.id, m.id) for m in lip.masks
        }

    def test_similarity_warp_full_bijection(self):
        lip = disk_scene(1)
        warp = make_warp_about((320, 240), 1.06, 4.0, (9, -6))
        rgb = MaskSet(
            [warp_disk_mask(m, warp) for m in lip.masks], (1000, 1000), "RGB"
        )
        result = two_stage_match(lip, rgb)
        matched = {(p.lip_mask_id, p.rgb_mask_id) for p in result.stage2_pairs}
        assert matched == {(m.id, m.id) for m in lip.masks}
        # corner-level bijection: each pair must map corner k to corner k
        for p in result.stage2_pairs:
            assert p.corner_pairs == [(k, k) for k in range(12)]
        # stage 2 is a superset of stage 1
        stage1 = {(p.lip_mask_id, p.rgb_mask_id) for p in result.stage1_pairs}
        assert stage1 <= matched
        assert result.affine.scale == pytest.approx(warp.scale, abs=1e-9)

    def test_no_sparse_matches(self):
        lip = MaskSet([disk_mask(0, 100, 100, 8.0)], (640, 480), "LIP")
        rgb = MaskSet([disk_mask(0, 540, 380, 200.0, source="RGB")], (1200, 1200), "RGB")
        with pytest.raises(NoSparseMatches):
            two_stage_match(lip, rgb)

    def test_diagnostics_document(self):
        lip = disk_scene(2)
        rgb = MaskSet([warp_disk_mask(m, IDENT) for m in lip.masks], lip.image_size, "RGB")
        doc = two_stage_match(lip, rgb).to_document()
        assert set(doc) == {"affine", "stage1", "stage2", "correspondences"}
        assert doc["correspondences"]
        first = doc["correspondences"][0]
        assert set(first) == {"lip_pixel", "rgb_pixel", "lip_mask_id", "rgb_mask_id"}


class TestCorrespondenceSet:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            CorrespondenceSet(np.zeros((3, 2)), np.zeros((4, 3)))


class TestPropagationValidity:
    def test_close_depth_small_error(self):
        K = Intrinsics(fx=800, fy=800, cx=600, cy=400, width=1200, height=800)
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(500):
            R = rotation_from_euler(EulerAngles(*rng.uniform(-math.radians(1.0), math.radians(1.0), 3)))
            t = rng.uniform(-0.05, 0.05, size=3)
            z = 5.0
            q = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), z])
            p = q + np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.02, 0.02) * z])
            err = propagation_pixel_error(K, R, t, q, p)
            worst = max(worst, err)
        assert worst <= 0.5

    def test_large_depth_gap_breaks_prediction(self):
        K = Intrinsics(fx=800, fy=800, cx=600, cy=400, width=1200, height=800)
        R = rotation_from_euler(EulerAngles(math.radians(1.0), 0, 0))
        t = np.array([0.05, 0.0, 0.0])
        q = np.array([0.5, 0.2, 5.0])
        p_near = np.array([0.4, 0.1, 5.05])
        p_far = np.array([0.4, 0.1, 15.0])
        assert propagation_pixel_error(K, R, t, q, p_near) < propagation_pixel_error(K, R, t, q, p_far)
