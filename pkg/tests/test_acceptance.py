"""Acceptance criteria 1-9.

Each test records one ``criterion N: PASS|FAIL <detail>`` line; the lines are
printed at the end of the pytest run (see ``conftest.py``) and also when this
file is executed directly.
"""

import subprocess
import sys
from itertools import combinations

import numpy as np
import pytest

from conftest import random_pose
from test_global_fuser import random_params as fuser_params
from test_local_fuser import random_instance
from test_pose_head import head
from vlodom.config import PipelineConfig
from vlodom.dataio import load_calib, load_calib_matrices, load_gt_poses, load_scan
from vlodom.features import PointFeatureSet
from vlodom.geometry import Pose, compose_refinement, parse_pose_line, transform_points, write_poses
from vlodom.global_fuser import fuse_rows_forward
from vlodom.gradcheck import E2E_TOL, OP_TOL, run_gradcheck
from vlodom.layers import bilinear_sample, conv2d
from vlodom.local_fuser import aggregate_clusters, assign_clusters
from vlodom.losses import LossWeights, layer_loss, total_loss
from vlodom.metrics import accumulate_trajectory, kitti_eval
from vlodom.model import init_params
from vlodom.oracles import (
    brute_adaptive_fuse,
    brute_aggregate,
    brute_bilinear,
    brute_cluster_assign,
    brute_conv,
    brute_cost_volume,
    brute_pose_matrix,
    straight_line_trajectories,
)
from vlodom.pose_head import cost_volume, embedding_mask, regress_pose
from vlodom.synth import CANONICAL_POSE_MAGNITUDE, CANONICAL_SEED, generate_pair, micro_camera, write_calib, write_scan
from vlodom.train import micro_train

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def vlodom(*args):
    proc = subprocess.run([sys.executable, "-m", "vlodom.cli", *map(str, args)], capture_output=True)
    assert proc.returncode == 0, proc.stderr.decode()
    return proc.stdout


def test_criterion_1_oracle_equivalence():
    rng = np.random.default_rng(42)
    worst = dict.fromkeys(["assign", "aggregate", "adaptive_fuse", "cost_volume", "conv", "bilinear"], 0.0)
    trials = 100
    for _ in range(trials):
        H, W = (int(v) for v in rng.integers(2, 17, 2))
        centers, pseudo, lp, shape = random_instance(rng, H=H, W=W, C=4, n_centers=int(rng.integers(1, 65)))
        a = assign_clusters(centers, pseudo, lp, shape)
        center_of, sims = brute_cluster_assign(centers.features, centers.coords, centers.mask, pseudo.features, pseudo.coords, shape, (2, 2))
        mismatch = float(np.any(a.center_of != center_of))
        worst["assign"] = max(worst["assign"], mismatch, float(np.max(np.abs(a.similarities - sims))))
        out = aggregate_clusters(a, centers, pseudo, lp).features
        ref = brute_aggregate(centers.features, centers.mask, pseudo.features, a.center_of, a.similarities, lp.alpha, lp.beta, lp.value_weight, lp.value_bias)
        worst["aggregate"] = max(worst["aggregate"], float(np.max(np.abs(out - ref))))

        N, C, D = int(rng.integers(1, 65)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
        gp = fuser_params(rng, C, D)
        fp, fl, mask = rng.normal(size=(N, D)), rng.normal(size=(N, C)), rng.random(N) < 0.7
        fg, _ = fuse_rows_forward(fp, fl, mask, gp)
        ref = brute_adaptive_fuse(fp, fl, mask, gp.gate_point, gp.gate_local, gp.align_weight, gp.align_bias)
        worst["adaptive_fuse"] = max(worst["adaptive_fuse"], float(np.max(np.abs(fg - ref))))

        D = int(rng.integers(2, 5))
        ns, nt = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        hp = head(rng, D)
        sx, sf, tx, tf = rng.normal(size=(ns, 3)), rng.normal(size=(ns, D)), rng.normal(size=(nt, 3)), rng.normal(size=(nt, D))
        E = cost_volume(PointFeatureSet(sf, sx), PointFeatureSet(tf, tx), hp, 4)
        worst["cost_volume"] = max(worst["cost_volume"], float(np.max(np.abs(E - brute_cost_volume(sx, sf, tx, tf, hp.score, hp.value, 4)))))

        cin, cout = (int(v) for v in rng.integers(1, 4, 2))
        Wk, b, x = rng.normal(size=(3, 3, cin, cout)), rng.normal(size=cout), rng.normal(size=(H, W, cin))
        stride = int(rng.integers(1, 3))
        worst["conv"] = max(worst["conv"], float(np.max(np.abs(conv2d(Wk, b, x, stride) - brute_conv(Wk, b, x, stride)))))

        grid = rng.normal(size=(H, W, 3))
        coords = rng.uniform(-1, [W, H], size=(64, 2))
        ref = np.array([brute_bilinear(grid, u, v) for u, v in coords])
        worst["bilinear"] = max(worst["bilinear"], float(np.max(np.abs(bilinear_sample(grid, coords) - ref))))
    ok = all(v < 1e-6 for v in worst.values())
    record(1, ok, f"{trials} instances per kernel, max abs error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def test_criterion_2_geometry():
    rng = np.random.default_rng(42)
    comp = 0.0
    for _ in range(1000):
        d, p = random_pose(rng), random_pose(rng)
        got = compose_refinement(d, p).matrix()
        comp = max(comp, float(np.max(np.abs(got - brute_pose_matrix(d.q, d.t) @ brute_pose_matrix(p.q, p.t)))))
    dist = 0.0
    for _ in range(100):
        pts = rng.normal(scale=10, size=(30, 3))
        moved = transform_points(random_pose(rng), pts)
        for i, j in combinations(range(30), 2):
            dist = max(dist, abs(np.linalg.norm(moved[i] - moved[j]) - np.linalg.norm(pts[i] - pts[j])))
    record(2, comp < 1e-9 and dist < 1e-9, f"compose max |dT|={comp:.1e} over 1000 pairs, distance drift={dist:.1e}")


def test_criterion_3_gradient_checks():
    report = run_gradcheck(seed=0, cfg=PipelineConfig.micro())
    per_op = [r for r in report.results if r.op != "end_to_end"]
    e2e = [r for r in report.results if r.op == "end_to_end"][0]
    ops = {r.op for r in per_op}
    required = {"dense", "conv", "bilinear", "local_fuse", "global_fuse", "cost_volume", "mask", "regress"}
    worst = max(per_op, key=lambda r: r.max_rel_error)
    ok = required <= ops and all(r.max_rel_error < OP_TOL for r in per_op) and e2e.max_rel_error < E2E_TOL
    record(3, ok, f"worst per-op {worst.op}={worst.max_rel_error:.1e} (<{OP_TOL:g}), end-to-end={e2e.max_rel_error:.1e} (<{E2E_TOL:g})")


def test_criterion_4_structural_invariants():
    rng = np.random.default_rng(42)
    col_err = quat_err = 0.0
    hull_fg = hull_fl = partition = 0
    for _ in range(1000):
        D, N = int(rng.integers(2, 6)), int(rng.integers(1, 40))
        hp = head(rng, D, q_bias=tuple(rng.normal(size=4)))
        E, F = rng.normal(size=(N, D)), rng.normal(size=(N, D))
        M = embedding_mask(E, F, hp)
        col_err = max(col_err, float(np.max(np.abs(M.sum(axis=0) - 1))))
        q = regress_pose(E, M, hp).q
        quat_err = max(quat_err, abs(float(np.linalg.norm(q)) - 1))

        gp = fuser_params(rng, 3, 4, scale=2.0)
        fp, fl, mask = rng.normal(size=(8, 4)), rng.normal(size=(8, 3)), rng.random(8) < 0.6
        fg, cache = fuse_rows_forward(fp, fl, mask, gp)
        lo, hi = np.minimum(fp, cache["fl2"]), np.maximum(fp, cache["fl2"])
        hull_fg += int(np.any(fg[mask] < lo[mask] - 1e-12) or np.any(fg[mask] > hi[mask] + 1e-12) or np.any(fg[~mask] != fp[~mask]))

        centers, pseudo, lp, shape = random_instance(rng, H=6, W=6, C=3, n_centers=int(rng.integers(1, 8)))
        a = assign_clusters(centers, pseudo, lp, shape)
        flat = np.concatenate(a.members)
        partition += int(len(np.unique(flat)) != len(flat) or len(flat) + a.n_unassigned != len(pseudo))
        out = aggregate_clusters(a, centers, pseudo, lp).features
        vc = centers.features @ lp.value_weight + lp.value_bias
        vp = pseudo.features @ lp.value_weight + lp.value_bias
        for i, m in enumerate(a.members):
            if centers.mask[i]:
                pool = np.vstack([vc[i : i + 1], vp[m]])
                hull_fl += int(np.any(out[i] < pool.min(axis=0) - 1e-12) or np.any(out[i] > pool.max(axis=0) + 1e-12))
    ok = col_err < 1e-6 and quat_err < 1e-9 and hull_fg == hull_fl == partition == 0
    record(4, ok, f"mask column error={col_err:.1e}, |q|-1={quat_err:.1e}, F_G hull violations={hull_fg}, F_L hull violations={hull_fl}, partition violations={partition} (1000 instances)")


def test_criterion_5_loss():
    rng = np.random.default_rng(42)
    gt = random_pose(rng)
    a = layer_loss(gt, gt, 0.0, -2.5)
    b = layer_loss(Pose(gt.q, gt.t + [1.0, 0, 0]), gt, 0.0, -2.5)
    weights = LossWeights()
    dot_err = 0.0
    for _ in range(100):
        L = rng.normal(size=4)
        dot_err = max(dot_err, abs(total_loss(L, weights) - float(np.dot([1.6, 0.8, 0.4, 0.2], L))))
    ok = abs(a + 2.5) < 1e-12 and abs(b + 1.5) < 1e-12 and dot_err < 1e-12 and tuple(weights.alpha_l) == (1.6, 0.8, 0.4, 0.2)
    record(5, ok, f"pred=gt -> {a:.12g}, unit residual -> {b:.12g}, total vs dot product max error={dot_err:.1e}")


def test_criterion_6_metrics():
    rng = np.random.default_rng(42)
    rel = [Pose(random_pose(rng, 0.1).q * [1, 0.02, 0.02, 0.02], [0, 0, 1.5] + rng.normal(scale=0.1, size=3)).normalized() for _ in range(299)]
    traj = accumulate_trajectory(rel)
    same = kitti_eval(traj, traj, (100, 200, 300))
    gt, est = straight_line_trajectories(1001, 1.0, 0.01)
    line = kitti_eval(gt, est)
    noisy = [p @ Pose(random_pose(rng).q * [1, 0.002, 0.002, 0.002], rng.normal(scale=0.05, size=3)).normalized() for p in traj]
    G = random_pose(rng, 100.0)
    e1 = kitti_eval(traj, noisy, (100, 200))
    e2 = kitti_eval([G @ p for p in traj], [G @ p for p in noisy], (100, 200))
    inv = max(abs(e1.t_rel - e2.t_rel), abs(e1.r_rel - e2.r_rel))
    ok = (same.t_rel, same.r_rel) == (0.0, 0.0) and abs(line.t_rel - 1.0) < 1e-6 and line.r_rel == 0.0 and inv < 1e-9
    record(6, ok, f"identical -> ({same.t_rel:g}, {same.r_rel:g}), straight line t_rel={line.t_rel:.9f}%, rigid-transform change={inv:.1e}")


@pytest.fixture(scope="module")
def overfit():
    pair = generate_pair(CANONICAL_SEED, n_points=512, pose_magnitude=CANONICAL_POSE_MAGNITUDE, noise_sigma=0.0)
    return pair, micro_train(PipelineConfig.micro(), pair, steps=500)


def test_criterion_7_micro_overfit(overfit):
    pair, res = overfit
    rot, trans = res.errors(pair.gt)
    ok = rot < 1.0 and trans < 0.05 and res.losses[500] < res.losses[0]
    record(7, ok, f"seed {CANONICAL_SEED}, 500 steps: rotation error {rot:.3f} deg, translation error {trans:.4f} m, loss {res.losses[0]:.4f} -> {res.losses[500]:.4f}")


def test_micro_train_no_divergence(overfit):
    # over any 50-step window the loss may rise by at most 10% of its magnitude
    losses = np.array(overfit[1].losses)
    rise = losses[50:] - losses[:-50]
    assert np.all(rise <= 0.1 * np.abs(losses[:-50]))


def test_criterion_8_determinism(tmp_path):
    data, weights = tmp_path / "kitti", tmp_path / "w.txt"
    vlodom("synth", "--out", data, "--frames", 3, "--seed", 1)
    init_params(PipelineConfig.micro(), 0).save(weights, dtype="<f8")
    same = {}
    runs = [tmp_path / f"t{i}.txt" for i in range(3)]
    for out, threads in zip(runs, (1, 1, 4)):
        vlodom("run", "--config", "micro", "--data", data, "--seq", "00", "--weights", weights, "--out", out, "--threads", threads)
    same["run"] = runs[0].read_bytes() == runs[1].read_bytes() == runs[2].read_bytes()
    grads = [vlodom("gradcheck", "--seed", 0, "--threads", t) for t in (1, 1, 4)]
    same["gradcheck"] = grads[0] == grads[1] == grads[2]
    imgs = [tmp_path / f"c{i}.ppm" for i in range(3)]
    for out, threads in zip(imgs, (1, 1, 4)):
        vlodom("cluster-viz", "--config", "micro", "--data", data, "--seq", "00", "--out", out, "--threads", threads)
    same["cluster-viz"] = imgs[0].read_bytes() == imgs[1].read_bytes() == imgs[2].read_bytes()
    record(8, all(same.values()), "byte-identical across 2 runs and --threads 1 vs 4: " + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_criterion_9_format_fidelity(tmp_path):
    rng = np.random.default_rng(42)
    checks = {}
    pts = rng.normal(scale=30, size=(2000, 3)).astype(np.float32)
    inten = rng.random(2000).astype(np.float32)
    write_scan(tmp_path / "s.bin", pts, inten)
    scan = load_scan(tmp_path / "s.bin")
    write_scan(tmp_path / "s2.bin", scan.points, scan.intensity)
    checks["scan"] = (
        np.array_equal(scan.points, pts.astype(np.float64))
        and np.array_equal(scan.intensity, inten.astype(np.float64))
        and (tmp_path / "s.bin").read_bytes() == (tmp_path / "s2.bin").read_bytes()
    )

    cam = micro_camera()
    cam = type(cam)(fx=rng.uniform(300, 900), fy=rng.uniform(300, 900), cx=rng.uniform(100, 600), cy=rng.uniform(50, 200), width=320, height=96, extrinsic=random_pose(rng, 0.5))
    write_calib(tmp_path / "calib.txt", cam)
    mats = load_calib_matrices(tmp_path / "calib.txt")
    back = load_calib(tmp_path / "calib.txt")
    checks["calib"] = (
        np.array_equal(mats["Tr"], cam.extrinsic.matrix())
        and np.array_equal(mats["P2"][:, :3], cam.intrinsic_matrix())
        and (back.fx, back.fy, back.cx, back.cy) == (cam.fx, cam.fy, cam.cx, cam.cy)
    )

    poses = [random_pose(rng, 50.0) for _ in range(100)]
    write_poses(tmp_path / "p.txt", poses)
    raw = [parse_pose_line(l) for l in (tmp_path / "p.txt").read_text().splitlines()]
    loaded = load_gt_poses(tmp_path / "p.txt")
    checks["pose"] = all(np.array_equal(r[:3], p.matrix()[:3]) for r, p in zip(raw, poses)) and all(
        np.max(np.abs(a.matrix() - b.matrix())) < 1e-9 for a, b in zip(loaded, poses)
    )

    data, weights, traj = tmp_path / "kitti", tmp_path / "w.txt", tmp_path / "traj.txt"
    vlodom("synth", "--out", data, "--frames", 3, "--seed", 2)
    init_params(PipelineConfig.micro(), 0).save(weights)
    vlodom("run", "--config", "micro", "--data", data, "--seq", "00", "--weights", weights, "--out", traj)
    checks["trajectory"] = len(load_gt_poses(traj)) == 3
    record(9, all(checks.values()), "round trips: " + ", ".join(f"{k}={v}" for k, v in checks.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
