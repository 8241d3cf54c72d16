"""Explicit-parameter network primitives with hand-written adjoints.

Arrays are ``float64``. Grids are ``(H, W, C)``; point rows are ``(N, C)``.
Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward(cache, dout)`` returns input and parameter gradients.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError, LoadError

LEAKY_SLOPE = 0.1

MANIFEST_HEADER = "# vlodom weights v1"


# --- parameter store -------------------------------------------------------


class ParamStore:
    """Named parameter arrays plus the seed they were initialized from."""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None, seed: Optional[int] = None):
        self._params: Dict[str, np.ndarray] = {}
        self.seed = seed
        for k, v in (params or {}).items():
            self[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __setitem__(self, name: str, value) -> None:
        self._params[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self._params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._params.items()}, seed=self.seed)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._params.items()}

    def num_params(self) -> int:
        return int(sum(v.size for v in self._params.values()))

    def mlp(self, prefix: str) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Layers ``prefix.0``, ``prefix.1``, ... as (weight, bias) pairs."""
        layers = []
        i = 0
        while f"{prefix}.{i}.weight" in self._params:
            layers.append((self[f"{prefix}.{i}.weight"], self[f"{prefix}.{i}.bias"]))
            i += 1
        if not layers:
            raise KeyError(f"no MLP layers under {prefix!r}")
        return layers

    # initialization

    def add_uniform(self, name: str, shape: Sequence[int], fan_in: int, rng: np.random.Generator):
        """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], rounded to float32."""
        s = 1.0 / math.sqrt(fan_in)
        self[name] = rng.uniform(-s, s, size=tuple(shape)).astype(np.float32)

    def add_dense(self, prefix: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.add_uniform(f"{prefix}.weight", (n_in, n_out), n_in, rng)
        self.add_uniform(f"{prefix}.bias", (n_out,), n_in, rng)

    def add_mlp(self, prefix: str, dims: Sequence[int], rng: np.random.Generator):
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.add_dense(f"{prefix}.{i}", a, b, rng)

    def add_conv(self, prefix: str, k: int, c_in: int, c_out: int, rng: np.random.Generator):
        fan_in = k * k * c_in
        self.add_uniform(f"{prefix}.weight", (k, k, c_in, c_out), fan_in, rng)
        self.add_uniform(f"{prefix}.bias", (c_out,), fan_in, rng)

    # serialization

    def save(self, path, dtype: str = "<f4") -> None:
        """Write ``path`` (text manifest) and its sibling ``.bin`` blob."""
        path = Path(path)
        blob_path = path.with_suffix(".bin")
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [MANIFEST_HEADER, f"seed {self.seed if self.seed is not None else -1}"]
        chunks = []
        offset = 0
        for name, arr in self._params.items():
            raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
            shape = "x".join(str(d) for d in arr.shape) or "scalar"
            lines.append(f"{name} {shape} {dtype} {offset}")
            chunks.append(raw)
            offset += len(raw)
        path.write_text("\n".join(lines) + "\n")
        blob_path.write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, expected: Optional[Dict[str, Tuple[int, ...]]] = None) -> "ParamStore":
        """Read a manifest + blob; validate names/shapes against ``expected``."""
        path = Path(path)
        blob_path = path.with_suffix(".bin")
        if not path.exists() or not blob_path.exists():
            raise LoadError(f"weights not found: {path} / {blob_path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise LoadError(f"{path}: not a weight manifest")
        blob = blob_path.read_bytes()
        store = cls()
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "seed":
                seed = int(parts[1])
                store.seed = None if seed < 0 else seed
                continue
            if len(parts) != 4:
                raise LoadError(f"{path}:{lineno}: malformed manifest line")
            name, shape_s, dtype, off = parts
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            dt = np.dtype(dtype)
            count = int(np.prod(shape, dtype=np.int64))
            off = int(off)
            end = off + count * dt.itemsize
            if end > len(blob):
                raise LoadError(f"{path}:{lineno}: {name} extends past end of blob")
            store._params[name] = np.frombuffer(blob, dtype=dt, count=count, offset=off).astype(np.float64).reshape(shape)
        if expected is not None:
            missing = sorted(set(expected) - set(store._params))
            extra = sorted(set(store._params) - set(expected))
            if missing or extra:
                raise LoadError(f"{path}: parameter set mismatch (missing {missing[:5]}, unexpected {extra[:5]})")
            for name, shape in expected.items():
                if store[name].shape != tuple(shape):
                    raise LoadError(f"{path}: {name} has shape {store[name].shape}, expected {tuple(shape)}")
        return store


def accumulate(grads: Dict[str, np.ndarray], name: str, g) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = np.array(g, dtype=np.float64)


# --- branch tape -----------------------------------------------------------


class BranchTape:
    """Records elementwise branch choices and replays them on later passes.

    Piecewise-smooth ops (leaky ReLU, absolute value, sign alignment) route
    their branch condition through :func:`branch`. Replaying a recording
    evaluates the network on one fixed smooth piece, which is what finite
    differences must see to be comparable with the analytic adjoint.
    """

    def __init__(self):
        self.records: List[np.ndarray] = []
        self.replaying = False
        self.pos = 0

    def rewind(self) -> None:
        self.replaying = True
        self.pos = 0


_tape: Optional[BranchTape] = None


@contextmanager
def branch_tape(tape: BranchTape):
    """Activate ``tape``; forces single-threaded execution so calls stay ordered."""
    from . import parallel

    global _tape
    prev, prev_threads = _tape, parallel.get_threads()
    _tape = tape
    parallel.set_threads(1)
    try:
        yield tape
    finally:
        _tape = prev
        parallel.set_threads(prev_threads)


def branch(cond) -> np.ndarray:
    cond = np.asarray(cond, dtype=bool)
    t = _tape
    if t is None:
        return cond
    if t.replaying:
        rec = t.records[t.pos]
        t.pos += 1
        if rec.shape != cond.shape:
            raise RuntimeError("branch tape replay out of sync")
        return rec
    t.records.append(cond.copy())
    return cond


# --- activations -----------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def leaky_relu(x):
    return np.where(branch(x > 0), x, LEAKY_SLOPE * x)


def leaky_relu_grad(x):
    return np.where(x > 0, 1.0, LEAKY_SLOPE)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y, dy, axis=-1):
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


# --- dense / MLP -----------------------------------------------------------


def dense(W, b, x):
    W = np.asarray(W)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0] or np.shape(b) != (W.shape[1],):
        raise InvalidInputError(f"dense: input {x.shape} incompatible with weight {W.shape}")
    return x @ W + b


def dense_backward(W, x, dy):
    """Returns (dx, dW, db) for ``y = x @ W + b`` with arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return dy @ W.T, x2.T @ d2, d2.sum(axis=0)


def mlp_forward(layers, x):
    """Leaky-ReLU hidden layers, linear output layer."""
    cache = []
    h = np.asarray(x, dtype=np.float64)
    for i, (W, b) in enumerate(layers):
        z = dense(W, b, h)
        cache.append((h, z))
        h = leaky_relu(z) if i < len(layers) - 1 else z
    return h, cache


def mlp(layers, x):
    return mlp_forward(layers, x)[0]


def mlp_backward(layers, cache, dy):
    """Returns (dx, [(dW, db), ...])."""
    grads = [None] * len(layers)
    d = dy
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h, z = cache[i]
        if i < len(layers) - 1:
            d = d * leaky_relu_grad(z)
        d, dW, db = dense_backward(W, h, d)
        grads[i] = (dW, db)
    return d, grads


def add_mlp_grads(grads: Dict[str, np.ndarray], prefix: str, layer_grads) -> None:
    for i, (dW, db) in enumerate(layer_grads):
        accumulate(grads, f"{prefix}.{i}.weight", dW)
        accumulate(grads, f"{prefix}.{i}.bias", db)


# --- convolution -----------------------------------------------------------


def _same_padding(n, k, s):
    n_out = -(-n // s)
    total = max((n_out - 1) * s + k - n, 0)
    return n_out, total // 2, total - total // 2


def _taps(xp, k, s, Ho, Wo):
    for i in range(k):
        for j in range(k):
            yield i, j, xp[i : i + s * (Ho - 1) + 1 : s, j : j + s * (Wo - 1) + 1 : s]


def _conv_geometry(x_shape, k, stride):
    H, W = x_shape[:2]
    Ho, pt, pb = _same_padding(H, k, stride)
    Wo, pl, pr = _same_padding(W, k, stride)
    return Ho, Wo, ((pt, pb), (pl, pr))


def conv2d_forward(W, b, x, stride=1):
    """'Same'-padded cross-correlation; W is (k, k, C_in, C_out)."""
    x = np.asarray(x, dtype=np.float64)
    k = W.shape[0]
    if x.ndim != 3 or W.ndim != 4 or W.shape[0] != W.shape[1] or x.shape[2] != W.shape[2]:
        raise InvalidInputError(f"conv2d: input {x.shape} incompatible with kernel {W.shape}")
    Ho, Wo, pads = _conv_geometry(x.shape, k, stride)
    xp = np.pad(x, (*pads, (0, 0)))
    out = np.zeros((Ho, Wo, W.shape[3]))
    for i, j, patch in _taps(xp, k, stride, Ho, Wo):
        out += patch @ W[i, j]
    out += b
    return out, (W, xp, x.shape, pads, stride)


def conv2d(W, b, x, stride=1):
    return conv2d_forward(W, b, x, stride)[0]


def conv2d_backward(cache, dy):
    """Returns (dx, dW, db)."""
    W, xp, x_shape, pads, stride = cache
    k = W.shape[0]
    Ho, Wo = dy.shape[:2]
    dxp = np.zeros_like(xp)
    dW = np.zeros_like(W)
    d2 = dy.reshape(-1, dy.shape[2])
    for i, j, patch in _taps(xp, k, stride, Ho, Wo):
        dW[i, j] = patch.reshape(-1, patch.shape[2]).T @ d2
        dxp[i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dy @ W[i, j].T
    (pt, _), (pl, _) = pads
    dx = dxp[pt : pt + x_shape[0], pl : pl + x_shape[1]]
    return dx, dW, dy.sum(axis=(0, 1))


def pool_occupancy(occ: np.ndarray, stride: int) -> np.ndarray:
    """Output occupancy of a strided layer: any occupied cell in each stride block."""
    if stride == 1:
        return occ.copy()
    H, W = occ.shape
    Ho, Wo = -(-H // stride), -(-W // stride)
    padded = np.zeros((Ho * stride, Wo * stride), dtype=bool)
    padded[:H, :W] = occ
    return padded.reshape(Ho, stride, Wo, stride).any(axis=(1, 3))


def _tap_count(mask, k, stride):
    Ho, Wo, pads = _conv_geometry(mask.shape, k, stride)
    mp = np.pad(mask.astype(np.float64), pads)
    cnt = np.zeros((Ho, Wo))
    for _, _, patch in _taps(mp, k, stride, Ho, Wo):
        cnt += patch
    return cnt


def masked_conv2d_forward(W, b, x, occ, stride=1):
    """Occupancy-aware convolution over a sparse pseudo-image.

    Empty cells contribute nothing; each output is rescaled by
    ``in-bounds taps / occupied taps`` so that a fully occupied grid gives
    exactly :func:`conv2d`. Outputs at empty output cells are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    occ = np.asarray(occ, dtype=bool)
    k = W.shape[0]
    occ_out = pool_occupancy(occ, stride)
    n_occ = _tap_count(occ, k, stride)
    n_in = _tap_count(np.ones_like(occ), k, stride)
    scale = np.where(n_occ > 0, n_in / np.maximum(n_occ, 1), 0.0) * occ_out
    raw, ccache = conv2d_forward(W, np.zeros(W.shape[3]), x * occ[..., None], stride)
    out = (raw * scale[..., None] + b) * occ_out[..., None]
    return out, (ccache, occ, occ_out, scale)


def masked_conv2d_backward(cache, dy):
    ccache, occ, occ_out, scale = cache
    dy = dy * occ_out[..., None]
    db = dy.sum(axis=(0, 1))
    dx, dW, _ = conv2d_backward(ccache, dy * scale[..., None])
    return dx * occ[..., None], dW, db


# --- bilinear sampling -----------------------------------------------------


def _bilinear_setup(shape, coords):
    H, W = shape[:2]
    coords = np.asarray(coords, dtype=np.float64)
    x = np.clip(coords[:, 0], 0, W - 1)
    y = np.clip(coords[:, 1], 0, H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    return x, y, x0, y0, x1, y1, x - x0, y - y0


def bilinear_sample(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) grid at (N, 2) pixel coords given as (x=col, y=row).

    Coordinates are clamped to the border; integer coordinates return the
    stored node value exactly.
    """
    if len(coords) == 0:
        return np.zeros((0, grid.shape[2]))
    _, _, x0, y0, x1, y1, fx, fy = _bilinear_setup(grid.shape, coords)
    fx = fx[:, None]
    fy = fy[:, None]
    top = (1 - fx) * grid[y0, x0] + fx * grid[y0, x1]
    bot = (1 - fx) * grid[y1, x0] + fx * grid[y1, x1]
    return (1 - fy) * top + fy * bot


def bilinear_sample_backward(grid: np.ndarray, coords: np.ndarray, dout: np.ndarray):
    """Returns (dgrid, dcoords); coordinate gradients vanish where clamped."""
    dgrid = np.zeros_like(grid, dtype=np.float64)
    if len(coords) == 0:
        return dgrid, np.zeros((0, 2))
    H, W = grid.shape[:2]
    coords = np.asarray(coords, dtype=np.float64)
    x, y, x0, y0, x1, y1, fx, fy = _bilinear_setup(grid.shape, coords)
    a, c = fx[:, None], fy[:, None]
    np.add.at(dgrid, (y0, x0), (1 - a) * (1 - c) * dout)
    np.add.at(dgrid, (y0, x1), a * (1 - c) * dout)
    np.add.at(dgrid, (y1, x0), (1 - a) * c * dout)
    np.add.at(dgrid, (y1, x1), a * c * dout)
    g00, g01, g10, g11 = grid[y0, x0], grid[y0, x1], grid[y1, x0], grid[y1, x1]
    dfx = np.sum(((1 - c) * (g01 - g00) + c * (g11 - g10)) * dout, axis=1)
    dfy = np.sum(((1 - a) * (g10 - g00) + a * (g11 - g01)) * dout, axis=1)
    inside_x = (coords[:, 0] >= 0) & (coords[:, 0] <= W - 1) & (W > 1)
    inside_y = (coords[:, 1] >= 0) & (coords[:, 1] <= H - 1) & (H > 1)
    return dgrid, np.stack([dfx * inside_x, dfy * inside_y], axis=1)
