"""Synthetic pairs and self-consistency of the brute-force oracles."""

import numpy as np

from vlodom.geometry import Pose, quat_angle
from vlodom.oracles import brute_cluster_assign, brute_knn, brute_pose_matrix, brute_softmax
from vlodom.projection import project_to_image
from vlodom.synth import CANONICAL_POSE_MAGNITUDE, CANONICAL_SEED, generate_pair, generate_sequence


class TestGeneratePair:
    def test_zero_magnitude_is_identity(self):
        pair = generate_pair(3, n_points=64, pose_magnitude=(0.0, 0.0))
        np.testing.assert_array_equal(pair.gt.matrix(), np.eye(4))
        np.testing.assert_array_equal(pair.target.points, pair.source.points)
        np.testing.assert_array_equal(pair.target_image, pair.source_image)

    def test_zero_magnitude_with_noise(self):
        pair = generate_pair(3, n_points=256, pose_magnitude=(0.0, 0.0), noise_sigma=0.01)
        d = pair.target.points - pair.source.points
        assert 0.005 < d.std() < 0.015

    def test_same_seed_identical(self):
        a, b = generate_pair(11, n_points=100), generate_pair(11, n_points=100)
        np.testing.assert_array_equal(a.source.points, b.source.points)
        np.testing.assert_array_equal(a.target.points, b.target.points)
        np.testing.assert_array_equal(a.source_image, b.source_image)
        np.testing.assert_array_equal(a.gt.matrix(), b.gt.matrix())

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_pair(1, 64).source.points, generate_pair(2, 64).source.points)

    def test_noise_free_target_matches_matrix_oracle(self):
        for seed in range(20):
            pair = generate_pair(seed, n_points=200)
            M = brute_pose_matrix(pair.gt.q, pair.gt.t)
            expected = np.array([M[:3, :3] @ p + M[:3, 3] for p in pair.source.points])
            assert np.max(np.abs(pair.target.points - expected)) < 1e-6

    def test_canonical_magnitude(self):
        pair = generate_pair(CANONICAL_SEED)
        assert len(pair.source) == 512
        np.testing.assert_allclose(np.degrees(quat_angle(pair.gt.q)), 5.0, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(pair.gt.t), 0.3, atol=1e-12)
        assert CANONICAL_POSE_MAGNITUDE[1] == 0.3

    def test_most_points_visible(self):
        pair = generate_pair(CANONICAL_SEED)
        _, mask = project_to_image(pair.source.points, pair.camera)
        assert mask.mean() > 0.9
        assert pair.source_image.shape == (96, 320, 3)
        # 512 splats of 3x3 pixels cover at most 15% of the image
        assert np.count_nonzero(pair.source_image.any(axis=2)) > 0.1 * 96 * 320

    def test_sequence_scene_is_static(self):
        scans, _, poses, _ = generate_sequence(5, 4, n_points=64)
        world0 = scans[0].points
        for scan, P in zip(scans, poses):
            M = P.matrix()
            np.testing.assert_allclose(scan.points @ M[:3, :3].T + M[:3, 3], world0, atol=1e-9)


class TestOracleSelfChecks:
    def test_single_center_takes_every_point(self, rng):
        pseudo = rng.normal(size=(30, 4))
        coords = np.column_stack([rng.uniform(0, 5, 30), rng.uniform(0, 6, 30), np.zeros(30)])
        center_of, _ = brute_cluster_assign(rng.normal(size=(1, 4)), [[2.0, 2.0, 0]], [True], pseudo, coords, (5, 6), (1, 1))
        assert np.all(center_of == 0)

    def test_knn_full_k_sorted(self, rng):
        q, ref = rng.normal(size=(5, 3)), rng.normal(size=(12, 3))
        idx = brute_knn(q, ref, 12)
        for i in range(5):
            d = np.linalg.norm(ref[idx[i]] - q[i], axis=1)
            assert sorted(idx[i].tolist()) == list(range(12))
            assert np.all(np.diff(d) >= 0)

    def test_knn_query_permutation(self, rng):
        q, ref = rng.normal(size=(20, 3)), rng.normal(size=(40, 3))
        perm = rng.permutation(20)
        np.testing.assert_array_equal(brute_knn(q[perm], ref, 4), brute_knn(q, ref, 4)[perm])

    def test_cluster_assign_point_permutation(self, rng):
        C, N = 4, 40
        cf = rng.normal(size=(3, C))
        cc = np.column_stack([rng.uniform(0, 8, 3), rng.uniform(0, 8, 3), np.zeros(3)])
        pf = rng.normal(size=(N, C))
        pc = np.column_stack([rng.integers(0, 8, N), rng.integers(0, 8, N), np.zeros(N)]).astype(float)
        a, sa = brute_cluster_assign(cf, cc, [True] * 3, pf, pc, (8, 8), (2, 2))
        perm = rng.permutation(N)
        b, sb = brute_cluster_assign(cf, cc, [True] * 3, pf[perm], pc[perm], (8, 8), (2, 2))
        np.testing.assert_array_equal(b, a[perm])
        np.testing.assert_array_equal(sb, sa[perm])

    def test_softmax_permutation_and_normalization(self, rng):
        x = rng.normal(size=(6, 9))
        perm = rng.permutation(9)
        np.testing.assert_allclose(brute_softmax(x[:, perm]), brute_softmax(x)[:, perm], atol=1e-15)
        np.testing.assert_allclose(brute_softmax(x).sum(axis=1), 1.0, atol=1e-12)
