"""KNN cost volume, embedding mask, pose regression and coarse-to-fine refinement."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlodom.config import PipelineConfig
from vlodom.errors import InvalidInputError
from vlodom.features import PointFeatureSet
from vlodom.geometry import IDENTITY_QUAT, Pose, compose_refinement, transform_points
from vlodom.gradcheck import OP_TOL, max_rel_error, numeric_grad, rel_error, suite_cost_volume, suite_mask, suite_regress
from vlodom.model import forward_pair, init_params
from vlodom.oracles import brute_cost_volume, brute_embedding_mask, brute_knn
from vlodom.pose_head import (
    BRUTE_KNN_MAX_TARGETS,
    LevelHeadParams,
    LevelInput,
    cost_volume,
    embedding_mask,
    iterative_estimate,
    knn,
    level_backward,
    level_forward,
    regress_pose,
)
from vlodom.synth import CANONICAL_SEED, generate_pair
from vlodom.train import pair_frames


def mlp_params(rng, sizes, scale=0.5):
    return [(rng.normal(scale=scale, size=(a, b)), rng.normal(scale=scale, size=b)) for a, b in zip(sizes[:-1], sizes[1:])]


def head(rng, D, q_bias=(1.0, 0.1, -0.1, 0.05)):
    return LevelHeadParams(
        score=mlp_params(rng, (3 + D, 2, D)),
        value=mlp_params(rng, (D + 3, D, D)),
        mask=mlp_params(rng, (2 * D, D, D)),
        fc_q=(rng.normal(scale=0.3, size=(D, 4)), np.array(q_bias)),
        fc_t=(rng.normal(scale=0.3, size=(D, 3)), rng.normal(scale=0.1, size=3)),
    )


def identity_head(rng, D):
    h = head(rng, D)
    h.fc_q = (np.zeros((D, 4)), IDENTITY_QUAT.copy())
    h.fc_t = (np.zeros((D, 3)), np.zeros(3))
    return h


def zero_last(layers):
    W, b = layers[-1]
    return layers[:-1] + [(np.zeros_like(W), np.zeros_like(b))]


class TestKnn:
    def test_matches_brute(self, rng):
        for _ in range(100):
            q, r = rng.normal(size=(int(rng.integers(1, 30)), 3)), rng.normal(size=(int(rng.integers(1, 64)), 3))
            k = int(rng.integers(1, 8))
            np.testing.assert_array_equal(knn(q, r, k), brute_knn(q, r, k))

    def test_k_equal_n_sorts_everything(self, rng):
        q, r = rng.normal(size=(3, 3)), rng.normal(size=(9, 3))
        np.testing.assert_array_equal(knn(q, r, 9), brute_knn(q, r, 9))
        np.testing.assert_array_equal(np.sort(knn(q, r, 20), axis=1), np.tile(np.arange(9), (3, 1)))

    def test_ties_go_to_lower_index(self):
        r = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
        assert knn(np.zeros((1, 3)), r, 2).tolist() == [[0, 1]]

    def test_tree_path_matches_brute(self, rng):
        r = rng.normal(size=(BRUTE_KNN_MAX_TARGETS + 500, 3))
        q = rng.normal(size=(15, 3))
        np.testing.assert_array_equal(knn(q, r, 6), brute_knn(q, r, 6))

    def test_empty_reference(self):
        with pytest.raises(InvalidInputError):
            knn(np.zeros((1, 3)), np.zeros((0, 3)), 1)


class TestCostVolume:
    def test_self_matching_k1(self, rng):
        D = 4
        p = head(rng, D)
        p.score = zero_last(p.score)
        xyz, f = rng.normal(size=(10, 3)), rng.normal(size=(10, D))
        E = cost_volume(PointFeatureSet(f, xyz), PointFeatureSet(f, xyz), p, 1)
        from vlodom.oracles import brute_mlp

        expected = np.array([brute_mlp(p.value, list(f[i]) + [0.0, 0.0, 0.0]) for i in range(10)])
        np.testing.assert_allclose(E, expected, atol=1e-12)

    def test_single_target_weight_one(self, rng):
        D = 3
        p = head(rng, D)
        src = PointFeatureSet(rng.normal(size=(5, D)), rng.normal(size=(5, 3)))
        tgt = PointFeatureSet(rng.normal(size=(1, D)), rng.normal(size=(1, 3)))
        E = cost_volume(src, tgt, p, 4)
        from vlodom.oracles import brute_mlp

        expected = [brute_mlp(p.value, list(tgt.features[0]) + list(tgt.coords[0] - s)) for s in src.coords]
        np.testing.assert_allclose(E, expected, atol=1e-12)

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(120):
            D = int(rng.integers(2, 5))
            ns, nt = int(rng.integers(1, 33)), int(rng.integers(1, 65))
            p = head(rng, D)
            sx, sf = rng.normal(size=(ns, 3)), rng.normal(size=(ns, D))
            tx, tf = rng.normal(size=(nt, 3)), rng.normal(size=(nt, D))
            E = cost_volume(PointFeatureSet(sf, sx), PointFeatureSet(tf, tx), p, 4)
            assert np.max(np.abs(E - brute_cost_volume(sx, sf, tx, tf, p.score, p.value, 4))) < 1e-6

    def test_source_permutation_equivariance(self, rng):
        D = 4
        p = head(rng, D)
        sx, sf = rng.normal(size=(20, 3)), rng.normal(size=(20, D))
        tgt = PointFeatureSet(rng.normal(size=(25, D)), rng.normal(size=(25, 3)))
        perm = rng.permutation(20)
        E = cost_volume(PointFeatureSet(sf, sx), tgt, p, 4)
        Ep = cost_volume(PointFeatureSet(sf[perm], sx[perm]), tgt, p, 4)
        np.testing.assert_allclose(Ep, E[perm], atol=1e-12)
        pose = regress_pose(E, embedding_mask(E, sf, p), p)
        pose_p = regress_pose(Ep, embedding_mask(Ep, sf[perm], p), p)
        np.testing.assert_allclose(pose_p.q, pose.q, atol=1e-6)
        np.testing.assert_allclose(pose_p.t, pose.t, atol=1e-6)


class TestEmbeddingMask:
    def test_singleton(self, rng):
        p = head(rng, 3)
        np.testing.assert_array_equal(embedding_mask(rng.normal(size=(1, 3)), rng.normal(size=(1, 3)), p), 1.0)

    def test_constant_output_uniform(self, rng):
        p = head(rng, 3)
        p.mask = zero_last(p.mask)
        M = embedding_mask(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)), p)
        np.testing.assert_allclose(M, 1 / 8, atol=1e-15)

    def test_matches_softmax_oracle(self, rng):
        for _ in range(100):
            D, n = int(rng.integers(2, 5)), int(rng.integers(1, 33))
            p = head(rng, D)
            E, F = rng.normal(size=(n, D)), rng.normal(size=(n, D))
            assert np.max(np.abs(embedding_mask(E, F, p) - brute_embedding_mask(E, F, p.mask))) < 1e-9

    def test_columns_sum_to_one(self, rng):
        for _ in range(1000):
            D, n = 4, int(rng.integers(1, 40))
            p = head(rng, D)
            M = embedding_mask(rng.normal(scale=3, size=(n, D)), rng.normal(scale=3, size=(n, D)), p)
            np.testing.assert_allclose(M.sum(axis=0), 1.0, atol=1e-6)


class TestRegressPose:
    def test_identity_output(self, rng):
        p = identity_head(rng, 4)
        pose = regress_pose(rng.normal(size=(5, 4)), rng.random((5, 4)), p)
        np.testing.assert_array_equal(pose.q, IDENTITY_QUAT)

    def test_affine_in_embedding(self, rng):
        p = head(rng, 4)
        E, M = rng.normal(size=(6, 4)), rng.random((6, 4))
        Wt, bt = p.fc_t
        t1, t2 = regress_pose(E, M, p).t, regress_pose(2 * E, M, p).t
        np.testing.assert_allclose(t2, 2 * (t1 - bt) + bt, atol=1e-12)

    def test_matches_pooled_affine_oracle(self, rng):
        for _ in range(100):
            D, n = 4, int(rng.integers(1, 20))
            p = head(rng, D)
            E, M = rng.normal(size=(n, D)), rng.random((n, D))
            pooled = [sum(E[i, c] * M[i, c] for i in range(n)) for c in range(D)]
            q_raw = np.array([sum(pooled[c] * p.fc_q[0][c, j] for c in range(D)) + p.fc_q[1][j] for j in range(4)])
            t = np.array([sum(pooled[c] * p.fc_t[0][c, j] for c in range(D)) + p.fc_t[1][j] for j in range(3)])
            q = q_raw / np.linalg.norm(q_raw) * (1 if q_raw[0] >= 0 else -1)
            pose = regress_pose(E, M, p)
            np.testing.assert_allclose(pose.q, q, atol=1e-9)
            np.testing.assert_allclose(pose.t, t, atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, (5, 3), elements=st.floats(-50, 50)), st.integers(0, 2**31))
    def test_quaternion_unit(self, E, seed):
        rng = np.random.default_rng(seed)
        p = head(rng, 3, q_bias=rng.normal(size=4))
        pose = regress_pose(E, rng.random((5, 3)), p)
        assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9


class TestIterativeEstimate:
    def levels(self, rng, D=4):
        return [
            LevelInput(rng.normal(size=(12, 3)), rng.normal(size=(12, D)), rng.normal(size=(14, 3)), rng.normal(size=(14, D)))
            for _ in range(4)
        ]

    def test_identity_residuals_keep_coarse(self, rng):
        heads = [identity_head(rng, 4) for _ in range(3)] + [head(rng, 4)]
        poses = iterative_estimate(self.levels(rng), heads, 4)
        for p in poses[:3]:
            np.testing.assert_allclose(p.q, poses[3].q, atol=1e-12)
            np.testing.assert_allclose(p.t, poses[3].t, atol=1e-12)

    def test_rigid_consistency(self, rng):
        levels = self.levels(rng)
        heads = [head(rng, 4) for _ in range(4)]
        poses = iterative_estimate(levels, heads, 4)
        M = poses[3].matrix()
        for l in (2, 1, 0):
            delta, _ = level_forward(levels[l], heads[l], 4, poses[l + 1])
            M = delta.matrix() @ M
            np.testing.assert_allclose(poses[l].matrix(), M, atol=1e-9)
            np.testing.assert_allclose(compose_refinement(delta, poses[l + 1]).matrix(), M, atol=1e-9)

    def test_perfect_warp_self_matches(self, rng):
        pair = generate_pair(CANONICAL_SEED, n_points=64)
        src, tgt = pair.source.points, pair.target.points
        warped = transform_points(pair.gt, src)
        np.testing.assert_allclose(warped, tgt, atol=1e-12)
        np.testing.assert_array_equal(knn(warped, tgt, 1)[:, 0], np.arange(64))

    def test_chain_gradient(self, rng):
        D = 3
        inp = LevelInput(rng.normal(size=(20, 3)), rng.normal(size=(20, D)), rng.normal(size=(24, 3)), rng.normal(size=(24, D)))
        p = head(rng, D)
        warp = Pose(np.array([0.99, 0.05, -0.03, 0.02]), rng.normal(scale=0.1, size=3))
        Rq, Rt = rng.normal(size=4), rng.normal(size=3)
        _, cache = level_forward(inp, p, 4, warp)
        nbr = cache["ccache"]["nbr"]

        def f():
            pose, _ = level_forward(inp, p, 4, warp, nbr)
            return float(pose.q @ Rq + pose.t @ Rt)

        dsf, dtf, _, dwt, g = level_backward(cache, p, Rq, Rt)
        assert rel_error(dsf, numeric_grad(f, inp.src_feat)) < 1e-3
        assert rel_error(dtf, numeric_grad(f, inp.tgt_feat)) < 1e-3
        assert rel_error(g["mask.0.weight"], numeric_grad(f, p.mask[0][0])) < 1e-3
        assert rel_error(g["score.0.weight"], numeric_grad(f, p.score[0][0])) < 1e-3

    def test_golden_trajectory(self, micro_cfg):
        src, tgt = pair_frames(generate_pair(CANONICAL_SEED))
        poses, _ = forward_pair(init_params(micro_cfg, 0), src, tgt, micro_cfg)
        golden = [
            [0.9997887414233138, -0.013924370756488487, -0.015112684603503382, 0.0004372485534960826, 0.06257097256331434, 0.017053246551693824, 0.0013594218868931444],
            [0.9998247151401736, -0.01508204244033205, -0.009993182223868602, 0.004817395534881905, 0.03523857165881395, -0.01273888084918582, 0.005388659135558476],
            [0.9999829636682921, -0.0050685583450796245, -0.0026716887967507714, 0.001115422993806211, 0.0012772131090985905, 0.004706933971510827, -0.006499946729789499],
            [0.9999862083826285, -0.004848493753404687, 0.0009372605416751274, -0.0017879305172036188, -0.004147015184984745, 0.0003040885975447077, -0.006359385858884492],
        ]
        for p, g in zip(poses, golden):
            np.testing.assert_allclose(np.concatenate([p.q, p.t]), g, atol=1e-10)


class TestGradients:
    @pytest.mark.parametrize("suite", [suite_cost_volume, suite_mask, suite_regress])
    def test_matches_central_differences(self, suite):
        checks = suite(np.random.default_rng(42))
        assert max_rel_error(checks)[0] < OP_TOL
