"""Finite-difference checks of every hand-written adjoint.

Each per-op suite builds a small random instance, contracts the op output
with a fixed random tensor to get a scalar, and compares the analytic
gradient of every input/parameter tensor against central differences.
The end-to-end suite does the same for the full network loss using one
random direction per parameter tensor.

Piecewise decisions (cluster assignments, neighbour sets, leaky-ReLU and
absolute-value branches, quaternion sign alignment) are recorded on the
unperturbed evaluation and replayed for every perturbed one, so a step never
crosses a kink.

Error metric per tensor: ``|a - n| / max(|a|, |n|, floor)`` with 2-norms
(for directional checks the values are scalars). For the per-op suites the
floor is 1e-6 times the norm of the op's whole gradient; end to end it is
``1e3 * eps * |loss| / h``, a bound on the round-off of a central difference.
Either way, gradients that are exactly zero (for example a bias added before
a softmax) are not judged on round-off noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from .config import PipelineConfig
from .geometry import Pose, compose_refinement_backward, compose_refinement_forward, quat_normalize
from .global_fuser import GlobalFuserParams, fuse_rows_backward, fuse_rows_forward
from .local_fuser import LocalFuserParams, local_fuse_backward, local_fuse_forward
from .losses import layer_loss_backward, layer_loss_forward
from .pose_head import (
    LevelHeadParams,
    cost_volume_backward,
    cost_volume_forward,
    embedding_mask_backward,
    embedding_mask_forward,
    regress_pose_backward,
    regress_pose_forward,
)

STEP = 1e-4
OP_TOL = 1e-4
E2E_TOL = 1e-3

Check = Tuple[str, np.ndarray, np.ndarray]


@dataclass
class OpResult:
    op: str
    max_rel_error: float
    tolerance: float
    worst_tensor: str

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


@dataclass
class GradcheckReport:
    results: List[OpResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def format(self) -> str:
        lines = [f"{'op':<16} {'max_rel_err':>12} {'tol':>8}  worst tensor"]
        for r in self.results:
            lines.append(
                f"{r.op:<16} {r.max_rel_error:>12.3e} {r.tolerance:>8.0e}  {r.worst_tensor:<28} {'PASS' if r.ok else 'FAIL'}"
            )
        lines.append("gradcheck: " + ("PASS" if self.ok else "FAIL"))
        return "\n".join(lines)


def rel_error(a, n, floor: float = 1e-10) -> float:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` with respect to the array ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def _frozen(f: Callable[[], float]) -> Callable[[], float]:
    """Pin the elementwise branches of ``f`` to those of its current evaluation.

    A step of 1e-4 can cross a leaky-ReLU or sign kink; replaying the
    recorded branches keeps every evaluation on the same smooth piece.
    """
    tape = L.BranchTape()
    with L.branch_tape(tape):
        f()

    def replay():
        tape.rewind()
        with L.branch_tape(tape):
            return f()

    return replay


def _mlp_layers(rng, sizes, scale=0.5):
    return [(rng.normal(scale=scale, size=(a, b)), rng.normal(scale=0.1, size=b)) for a, b in zip(sizes[:-1], sizes[1:])]


def _mlp_checks(name, layers, grads, f) -> List[Check]:
    out = []
    for i, ((W, b), (dW, db)) in enumerate(zip(layers, grads)):
        out.append((f"{name}.{i}.weight", dW, numeric_grad(f, W)))
        out.append((f"{name}.{i}.bias", db, numeric_grad(f, b)))
    return out


# --- per-op suites ---------------------------------------------------------


def suite_dense(rng) -> List[Check]:
    W, b, x = rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=(6, 5))
    R = rng.normal(size=(6, 4))
    f = lambda: float(np.sum(L.dense(W, b, x) * R))
    dx, dW, db = L.dense_backward(W, x, R)
    return [("x", dx, numeric_grad(f, x)), ("weight", dW, numeric_grad(f, W)), ("bias", db, numeric_grad(f, b))]


def suite_conv(rng) -> List[Check]:
    out = []
    for stride in (1, 2):
        x = rng.normal(size=(7, 6, 3))
        W, b = rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
        y, cache = L.conv2d_forward(W, b, x, stride)
        R = rng.normal(size=y.shape)
        f = lambda: float(np.sum(L.conv2d(W, b, x, stride) * R))
        dx, dW, db = L.conv2d_backward(cache, R)
        out += [(f"s{stride}.x", dx, numeric_grad(f, x)), (f"s{stride}.weight", dW, numeric_grad(f, W)),
                (f"s{stride}.bias", db, numeric_grad(f, b))]
    return out


def suite_masked_conv(rng) -> List[Check]:
    out = []
    for stride in (1, 2):
        x = rng.normal(size=(6, 8, 2))
        occ = rng.random((6, 8)) < 0.6
        W, b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        y, cache = L.masked_conv2d_forward(W, b, x, occ, stride)
        R = rng.normal(size=y.shape)
        f = lambda: float(np.sum(L.masked_conv2d_forward(W, b, x, occ, stride)[0] * R))
        dx, dW, db = L.masked_conv2d_backward(cache, R)
        out += [(f"s{stride}.x", dx, numeric_grad(f, x)), (f"s{stride}.weight", dW, numeric_grad(f, W)),
                (f"s{stride}.bias", db, numeric_grad(f, b))]
    return out


def suite_bilinear(rng) -> List[Check]:
    grid = rng.normal(size=(5, 6, 3))
    n = 10
    # keep away from integer nodes, where the interpolant has kinks
    coords = np.stack([rng.integers(0, 5, n) + rng.uniform(0.1, 0.9, n), rng.integers(0, 4, n) + rng.uniform(0.1, 0.9, n)], 1)
    R = rng.normal(size=(n, 3))
    f = lambda: float(np.sum(L.bilinear_sample(grid, coords) * R))
    dgrid, dcoords = L.bilinear_sample_backward(grid, coords, R)
    return [("grid", dgrid, numeric_grad(f, grid)), ("coords", dcoords, numeric_grad(f, coords))]


def suite_local_fuse(rng) -> List[Check]:
    H, W, C = 6, 8, 4
    img = rng.normal(size=(H, W, C))
    n = 9
    pix = np.stack([rng.uniform(0.2, W - 1.2, n), rng.uniform(0.2, H - 1.2, n)], 1)
    mask = rng.random(n) < 0.8
    mask[0] = True
    p = LocalFuserParams(0.7, -0.2, rng.normal(scale=0.5, size=(C, C)), rng.normal(scale=0.1, size=C), 2, 2)
    R = rng.normal(size=(n, C))

    _, cache = local_fuse_forward(img, pix, mask, p)
    fixed = cache["assignment"].center_of
    f = _frozen(lambda: float(np.sum(local_fuse_forward(img, pix, mask, p, fixed)[0] * R)))
    dimg, g = local_fuse_backward(cache, R)
    ab = np.array([p.alpha, p.beta])

    def f_ab():
        p.alpha, p.beta = float(ab[0]), float(ab[1])
        return f()

    num_ab = numeric_grad(f_ab, ab)
    p.alpha, p.beta = float(ab[0]), float(ab[1])
    return [
        ("image", dimg, numeric_grad(f, img)),
        ("value.weight", g["value.weight"], numeric_grad(f, p.value_weight)),
        ("value.bias", g["value.bias"], numeric_grad(f, p.value_bias)),
        ("alpha_beta", np.array([g["alpha"], g["beta"]]), num_ab),
    ]


def suite_global_fuse(rng) -> List[Check]:
    n, C, D = 7, 3, 4
    fp, fl = rng.normal(size=(n, D)), rng.normal(size=(n, C))
    mask = rng.random(n) < 0.7
    p = GlobalFuserParams(_mlp_layers(rng, (D, 2, D)), _mlp_layers(rng, (D, 2, D)), rng.normal(size=(C, D)), rng.normal(size=D))
    R = rng.normal(size=(n, D))
    f = _frozen(lambda: float(np.sum(fuse_rows_forward(fp, fl, mask, p)[0] * R)))
    _, cache = fuse_rows_forward(fp, fl, mask, p)
    dfp, dfl, g = fuse_rows_backward(cache, R)
    out = [("fp", dfp, numeric_grad(f, fp)), ("fl", dfl, numeric_grad(f, fl)),
           ("align.weight", g["align.weight"], numeric_grad(f, p.align_weight)),
           ("align.bias", g["align.bias"], numeric_grad(f, p.align_bias))]
    for name, layers in (("gate_point", p.gate_point), ("gate_local", p.gate_local)):
        out += _mlp_checks(name, layers, [(g[f"{name}.{i}.weight"], g[f"{name}.{i}.bias"]) for i in range(len(layers))], f)
    return out


def _head(rng, D):
    return LevelHeadParams(
        score=_mlp_layers(rng, (3 + D, 2, D)),
        value=_mlp_layers(rng, (D + 3, D, D)),
        mask=_mlp_layers(rng, (2 * D, D, D)),
        fc_q=(rng.normal(scale=0.3, size=(D, 4)), np.array([1.0, 0.1, -0.1, 0.05])),
        fc_t=(rng.normal(scale=0.3, size=(D, 3)), rng.normal(scale=0.1, size=3)),
    )


def suite_cost_volume(rng) -> List[Check]:
    D, ns, nt, k = 3, 6, 8, 3
    sx, sf = rng.normal(size=(ns, 3)), rng.normal(size=(ns, D))
    tx, tf = rng.normal(size=(nt, 3)), rng.normal(size=(nt, D))
    p = _head(rng, D)
    E, cache = cost_volume_forward(sx, sf, tx, tf, p, k)
    R = rng.normal(size=E.shape)
    f = _frozen(lambda: float(np.sum(cost_volume_forward(sx, sf, tx, tf, p, k, cache["nbr"])[0] * R)))
    dsx, dsf, dtf, g = cost_volume_backward(cache, R)
    out = [("src_xyz", dsx, numeric_grad(f, sx)), ("src_feat", dsf, numeric_grad(f, sf)), ("tgt_feat", dtf, numeric_grad(f, tf))]
    out += _mlp_checks("score", p.score, g["score"], f)
    out += _mlp_checks("value", p.value, g["value"], f)
    return out


def suite_mask(rng) -> List[Check]:
    D, n = 3, 7
    E, F = rng.normal(size=(n, D)), rng.normal(size=(n, D))
    p = _head(rng, D)
    M, cache = embedding_mask_forward(E, F, p)
    R = rng.normal(size=M.shape)
    f = _frozen(lambda: float(np.sum(embedding_mask_forward(E, F, p)[0] * R)))
    dE, dF, g = embedding_mask_backward(cache, p, R)
    return [("E", dE, numeric_grad(f, E)), ("F", dF, numeric_grad(f, F))] + _mlp_checks("mask", p.mask, g, f)


def suite_regress(rng) -> List[Check]:
    D, n = 4, 6
    E, M = rng.normal(size=(n, D)), rng.random((n, D))
    p = _head(rng, D)
    Rq, Rt = rng.normal(size=4), rng.normal(size=3)

    def f():
        pose = regress_pose_forward(E, M, p)[0]
        return float(pose.q @ Rq + pose.t @ Rt)

    _, cache = regress_pose_forward(E, M, p)
    dE, dM, g = regress_pose_backward(cache, p, Rq, Rt)
    return [
        ("E", dE, numeric_grad(f, E)), ("M", dM, numeric_grad(f, M)),
        ("fc_q.weight", g["fc_q"][0], numeric_grad(f, p.fc_q[0])), ("fc_q.bias", g["fc_q"][1], numeric_grad(f, p.fc_q[1])),
        ("fc_t.weight", g["fc_t"][0], numeric_grad(f, p.fc_t[0])), ("fc_t.bias", g["fc_t"][1], numeric_grad(f, p.fc_t[1])),
    ]


def suite_compose(rng) -> List[Check]:
    dq, dt = rng.normal(size=4), rng.normal(size=3)
    qp, tp = quat_normalize(rng.normal(size=4)), rng.normal(size=3)
    Rq, Rt = rng.normal(size=4), rng.normal(size=3)

    def f():
        pose = compose_refinement_forward(dq, dt, qp, tp)[0]
        return float(pose.q @ Rq + pose.t @ Rt)

    _, cache = compose_refinement_forward(dq, dt, qp, tp)
    g = compose_refinement_backward(cache, Rq, Rt)
    return [(n, a, numeric_grad(f, x)) for n, a, x in zip(("delta.q", "delta.t", "prev.q", "prev.t"), g, (dq, dt, qp, tp))]


def suite_loss(rng) -> List[Check]:
    gt = Pose(quat_normalize(rng.normal(size=4)), rng.normal(size=3))
    q, t = quat_normalize(rng.normal(size=4)), rng.normal(size=3)
    k = np.array([0.3, -1.2])
    f = _frozen(lambda: float(layer_loss_forward(q, t, gt, k[0], k[1])[0]))
    _, cache = layer_loss_forward(q, t, gt, k[0], k[1])
    dq, dt, dkx, dkq = layer_loss_backward(cache)
    return [("q", dq, numeric_grad(f, q)), ("t", dt, numeric_grad(f, t)), ("k", np.array([dkx, dkq]), numeric_grad(f, k))]


OP_SUITES: Dict[str, Callable] = {
    "dense": suite_dense,
    "conv": suite_conv,
    "masked_conv": suite_masked_conv,
    "bilinear": suite_bilinear,
    "local_fuse": suite_local_fuse,
    "global_fuse": suite_global_fuse,
    "cost_volume": suite_cost_volume,
    "mask": suite_mask,
    "regress": suite_regress,
    "compose": suite_compose,
    "loss": suite_loss,
}


# --- end to end ------------------------------------------------------------


def end_to_end_checks(cfg: PipelineConfig, seed: int, n_points: int = 160) -> Tuple[List[Check], float]:
    """Directional derivative of the total loss along one random unit direction per parameter tensor.

    The network is piecewise smooth, and a step of 1e-4 can cross a piece
    boundary (an argmax flip, a leaky-ReLU or absolute-value kink). Cluster
    assignments, neighbour sets and elementwise branches are therefore frozen
    at their values for the unperturbed parameters.
    Returns the checks and the round-off floor for :func:`rel_error`.
    """
    from .model import Frame, decisions_of, forward_pair, init_params, loss_and_grads
    from .synth import generate_pair

    pair = generate_pair(seed, n_points=n_points)
    store = init_params(cfg, seed)
    src = Frame(pair.source, pair.source_image, pair.camera)
    tgt = Frame(pair.target, pair.target_image, pair.camera)
    loss, _, _, grads = loss_and_grads(store, src, tgt, pair.gt, cfg)
    floor = 1e3 * np.finfo(np.float64).eps * abs(loss) / STEP
    frozen = decisions_of(forward_pair(store, src, tgt, cfg)[1])
    tape = L.BranchTape()
    with L.branch_tape(tape):
        loss_and_grads(store, src, tgt, pair.gt, cfg, with_grads=False)
    rng = np.random.default_rng(seed + 1)
    out = []
    for name in store.names():
        x = store[name]
        v = rng.normal(size=x.shape)
        v /= np.linalg.norm(v)
        base = x.copy()

        def f(s):
            store[name] = base + s * v
            tape.rewind()
            with L.branch_tape(tape):
                return loss_and_grads(store, src, tgt, pair.gt, cfg, with_grads=False, decisions=frozen)[0]

        num = (f(STEP) - f(-STEP)) / (2 * STEP)
        store[name] = base
        out.append((name, np.array(float(np.sum(grads.get(name, 0.0) * v))), np.array(num)))
    return out, floor


OP_SCALE_FLOOR = 1e-6


def op_floor(checks: List[Check]) -> float:
    """Per-op denominator floor: ``1e-6`` times the norm of the op's whole numeric gradient.

    Some tensors have an exactly zero true gradient (a bias added before a
    softmax over the same axis); their analytic and numeric values are pure
    round-off and are judged against the op's gradient scale instead.
    """
    total = np.sqrt(sum(float(np.sum(np.square(n))) for _, _, n in checks))
    return max(1e-10, OP_SCALE_FLOOR * total)


def max_rel_error(checks: List[Check], floor: Optional[float] = None) -> Tuple[float, str]:
    floor = op_floor(checks) if floor is None else floor
    worst, worst_name = 0.0, ""
    for name, a, n in checks:
        e = rel_error(a, n, floor)
        if e >= worst:
            worst, worst_name = e, name
    return worst, worst_name


def _summarize(op: str, checks: List[Check], tol: float, corrupt: bool, floor: Optional[float] = None) -> OpResult:
    if corrupt:
        name, a, n = checks[0]
        checks = [(name, np.asarray(a) * 1.01 + 1e-3, n)] + list(checks[1:])
    worst, worst_name = max_rel_error(checks, floor)
    return OpResult(op, worst, tol, worst_name)


def run_gradcheck(
    seed: int = 0,
    cfg: Optional[PipelineConfig] = None,
    ops: Optional[List[str]] = None,
    end_to_end: bool = True,
    corrupt: Optional[str] = None,
) -> GradcheckReport:
    """Run the per-op suites (and optionally the end-to-end check).

    ``corrupt`` names an op whose first analytic gradient is deliberately
    perturbed; used to confirm the checker can fail.
    """
    report = GradcheckReport()
    for op in ops or list(OP_SUITES):
        rng = np.random.default_rng([seed, sorted(OP_SUITES).index(op)])
        report.results.append(_summarize(op, OP_SUITES[op](rng), OP_TOL, corrupt == op))
    if end_to_end:
        cfg = cfg or PipelineConfig.micro()
        checks, floor = end_to_end_checks(cfg, seed)
        report.results.append(_summarize("end_to_end", checks, E2E_TOL, corrupt == "end_to_end", floor))
    return report
