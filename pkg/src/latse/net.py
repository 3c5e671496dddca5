"""Dense nets with hand-derived backward passes, plus the spherical head.

Everything is float64 numpy.  The encoder maps flattened images to unit
embeddings (the pre-normalization lengths are kept for the backward pass),
the decoder maps embeddings back to pixel space through a sigmoid, and the
classifier is a bias-free matrix of unit-norm class centers compared to
embeddings by angle.

Checkpoint format (little endian throughout):

    magic   6 bytes  b"LATSE1"
    kind    u32      1 = dense net, 2 = classifier centers
    hash    32 bytes sha256 of the experiment config, zero padded
    net:     ndims u32, dims u32 each, hidden-activation u32, output u32,
             then per layer W (in*out f64, row major) and b (out f64)
    centers: num_classes u32, dim u32, then the row-major f64 matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from latse.margins import AngleBatch

LEAKY_SLOPE = 0.01
DEGENERATE_NORM = 1e-12
COS_CLAMP = 1e-7

MAGIC = b"LATSE1"
_KIND_NET = 1
_KIND_CENTERS = 2
_HIDDEN_CODES = {"leaky_relu": 1, "identity": 2}
_OUTPUT_CODES = {"linear": 1, "sigmoid": 2}


class ShapeMismatchError(ValueError):
    pass


class DegenerateEmbeddingError(RuntimeError):
    """Raised when a raw embedding is too short to normalize meaningfully."""


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class Topology:
    """Layer widths and activations of a dense net.

    dims includes input and output: (in, h1, ..., out).  hidden applies to
    every layer but the last, output to the last."""

    dims: tuple[int, ...]
    hidden: str = "leaky_relu"
    output: str = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2 or any(d <= 0 for d in self.dims):
            raise ValueError(f"bad dims {self.dims}")
        if self.hidden not in _HIDDEN_CODES:
            raise ValueError(f"unknown hidden activation {self.hidden!r}")
        if self.output not in _OUTPUT_CODES:
            raise ValueError(f"unknown output activation {self.output!r}")

    @property
    def num_layers(self) -> int:
        return len(self.dims) - 1


@dataclass
class NetParams:
    topology: Topology
    weights: list[np.ndarray]  # per layer, (in, out)
    biases: list[np.ndarray]   # per layer, (out,)

    def copy(self) -> "NetParams":
        return NetParams(self.topology,
                         [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in a fixed order (for the optimizer)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def init_params(topology: Topology, seed) -> NetParams:
    """Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fi, fo in zip(topology.dims[:-1], topology.dims[1:]):
        limit = np.sqrt(6.0 / (fi + fo))
        weights.append(rng.uniform(-limit, limit, size=(fi, fo)))
        biases.append(np.zeros(fo))
    return NetParams(topology, weights, biases)


def _activate(kind: str, pre: np.ndarray) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(pre > 0.0, pre, LEAKY_SLOPE * pre)
    if kind == "sigmoid":
        return expit(pre)
    return pre  # linear / identity


def _activation_grad(kind: str, pre: np.ndarray) -> np.ndarray | None:
    if kind == "leaky_relu":
        return np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
    if kind == "sigmoid":
        out = expit(pre)
        return out * (1.0 - out)
    return None  # identity: multiplying is a no-op


def net_forward(params: NetParams, x: np.ndarray):
    """Forward pass.  Returns (output, cache) with cache consumed by
    net_backward; inputs are (N, dims[0])."""
    x = np.asarray(x, dtype=float)
    topo = params.topology
    if x.ndim != 2 or x.shape[1] != topo.dims[0]:
        raise ShapeMismatchError(
            f"expected input (N, {topo.dims[0]}), got {x.shape}")
    last = topo.num_layers - 1
    cache = []
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        pre = h @ w + b
        kind = topo.output if i == last else topo.hidden
        cache.append((h, pre, kind))
        h = _activate(kind, pre)
    return h, cache


def net_backward(params: NetParams, cache, dout: np.ndarray):
    """Backward pass for mean-style losses: dout is d(loss)/d(output).

    Returns (dx, grads) where grads matches params.arrays() order."""
    grads_w: list[np.ndarray] = [None] * params.topology.num_layers  # type: ignore
    grads_b: list[np.ndarray] = [None] * params.topology.num_layers  # type: ignore
    d = np.asarray(dout, dtype=float)
    for i in range(params.topology.num_layers - 1, -1, -1):
        h_in, pre, kind = cache[i]
        ag = _activation_grad(kind, pre)
        if ag is not None:
            d = d * ag
        grads_w[i] = h_in.T @ d
        grads_b[i] = d.sum(axis=0)
        d = d @ params.weights[i].T
    grads: list[np.ndarray] = []
    for gw, gb in zip(grads_w, grads_b):
        grads.append(gw)
        grads.append(gb)
    return d, grads


@dataclass
class EmbeddingBatch:
    """Unit-norm embeddings plus the lengths they had before normalization."""

    vectors: np.ndarray          # (N, d), unit rows
    pre_norm_lengths: np.ndarray  # (N,)


def encode_with_cache(params: NetParams, images: np.ndarray):
    raw, cache = net_forward(params, images)
    lengths = np.linalg.norm(raw, axis=1)
    if np.any(lengths < DEGENERATE_NORM):
        worst = int(np.argmin(lengths))
        raise DegenerateEmbeddingError(
            f"embedding norm {lengths[worst]:.3e} below {DEGENERATE_NORM} "
            f"at row {worst}")
    return EmbeddingBatch(raw / lengths[:, None], lengths), cache


def encode(params: NetParams, images: np.ndarray) -> EmbeddingBatch:
    return encode_with_cache(params, images)[0]


def normalize_backward(emb: EmbeddingBatch, d_vectors: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. unit vectors back through v = raw/|raw|."""
    dots = np.einsum("nd,nd->n", d_vectors, emb.vectors)
    return (d_vectors - dots[:, None] * emb.vectors) / emb.pre_norm_lengths[:, None]


@dataclass
class ClassifierWeights:
    """Bias-free class centers, one unit row per class."""

    centers: np.ndarray  # (K, d)

    def renormalize(self) -> None:
        norms = np.linalg.norm(self.centers, axis=1, keepdims=True)
        if np.any(norms < DEGENERATE_NORM):
            raise DegenerateEmbeddingError("class center collapsed to zero")
        self.centers /= norms

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def init_centers(num_classes: int, dim: int, seed) -> ClassifierWeights:
    rng = np.random.default_rng(seed)
    w = ClassifierWeights(rng.standard_normal((num_classes, dim)))
    w.renormalize()
    return w


def cos_angles(emb: EmbeddingBatch, weights: ClassifierWeights,
               labels: np.ndarray) -> AngleBatch:
    """Angles between each embedding and every class center.

    Cosines are clamped to [-1 + 1e-7, 1 - 1e-7] before arccos so the angle
    derivative stays finite."""
    if emb.vectors.shape[1] != weights.centers.shape[1]:
        raise ShapeMismatchError(
            f"embedding dim {emb.vectors.shape[1]} vs center dim "
            f"{weights.centers.shape[1]}")
    c = emb.vectors @ weights.centers.T
    theta = np.arccos(np.clip(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP))
    return AngleBatch(angles=theta, target_index=labels)


def head_backward(emb: EmbeddingBatch, weights: ClassifierWeights,
                  grad_theta: np.ndarray):
    """Push d(loss)/d(angles) back to embeddings and centers.

    Where the cosine clamp was active the derivative is zero, matching the
    piecewise-constant clip."""
    c = emb.vectors @ weights.centers.T
    inside = (c > -1.0 + COS_CLAMP) & (c < 1.0 - COS_CLAMP)
    cc = np.clip(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
    dc = np.where(inside, grad_theta * (-1.0 / np.sqrt(1.0 - cc * cc)), 0.0)
    d_emb = dc @ weights.centers
    d_centers = dc.T @ emb.vectors
    return d_emb, d_centers


def backward(params: NetParams, weights: ClassifierWeights,
             grad_theta: np.ndarray, emb: EmbeddingBatch, cache):
    """Full composition: angles -> embeddings -> normalization -> net.

    Returns (net grads in arrays() order, center grads)."""
    d_emb, d_centers = head_backward(emb, weights, grad_theta)
    d_raw = normalize_backward(emb, d_emb)
    _, grads = net_backward(params, cache, d_raw)
    return grads, d_centers


# ---------------------------------------------------------------------------
# flattening helpers and the finite-difference oracle

def params_to_vector(params: NetParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def vector_to_params(topology: Topology, vec: np.ndarray) -> NetParams:
    vec = np.asarray(vec, dtype=float)
    weights, biases = [], []
    pos = 0
    for fi, fo in zip(topology.dims[:-1], topology.dims[1:]):
        weights.append(vec[pos:pos + fi * fo].reshape(fi, fo).copy())
        pos += fi * fo
        biases.append(vec[pos:pos + fo].copy())
        pos += fo
    if pos != vec.size:
        raise ShapeMismatchError(f"vector length {vec.size}, expected {pos}")
    return NetParams(topology, weights, biases)


def grads_to_vector(grads: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(g).ravel() for g in grads])


def fd_oracle(fn: Callable[[np.ndarray], float], point: np.ndarray,
              h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, one coordinate at a time."""
    point = np.asarray(point, dtype=float)
    grad = np.empty(point.size)
    flat = point.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(point)
        flat[i] = orig - h
        f_minus = fn(point)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# checkpoints

def _hash_to_bytes(config_hash) -> bytes:
    if config_hash is None:
        return b"\0" * 32
    if isinstance(config_hash, str):
        config_hash = bytes.fromhex(config_hash)
    if len(config_hash) > 32:
        raise ValueError("config hash longer than 32 bytes")
    return config_hash.ljust(32, b"\0")


def save_params(path, params: NetParams, config_hash=None) -> None:
    topo = params.topology
    parts = [MAGIC, struct.pack("<I", _KIND_NET), _hash_to_bytes(config_hash)]
    parts.append(struct.pack("<I", len(topo.dims)))
    parts.append(struct.pack(f"<{len(topo.dims)}I", *topo.dims))
    parts.append(struct.pack("<II", _HIDDEN_CODES[topo.hidden],
                             _OUTPUT_CODES[topo.output]))
    for w, b in zip(params.weights, params.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _read_header(fh, expect_kind: int):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    (kind,) = struct.unpack("<I", fh.read(4))
    if kind != expect_kind:
        raise CheckpointError(f"checkpoint kind {kind}, expected {expect_kind}")
    return fh.read(32)


def load_params(path) -> NetParams:
    with open(path, "rb") as fh:
        _read_header(fh, _KIND_NET)
        (ndims,) = struct.unpack("<I", fh.read(4))
        dims = struct.unpack(f"<{ndims}I", fh.read(4 * ndims))
        hid, out = struct.unpack("<II", fh.read(8))
        rev_h = {v: k for k, v in _HIDDEN_CODES.items()}
        rev_o = {v: k for k, v in _OUTPUT_CODES.items()}
        if hid not in rev_h or out not in rev_o:
            raise CheckpointError("unknown activation code")
        topo = Topology(dims, hidden=rev_h[hid], output=rev_o[out])
        weights, biases = [], []
        for fi, fo in zip(dims[:-1], dims[1:]):
            wb = fh.read(8 * fi * fo)
            bb = fh.read(8 * fo)
            if len(wb) != 8 * fi * fo or len(bb) != 8 * fo:
                raise CheckpointError("truncated payload")
            weights.append(np.frombuffer(wb, dtype="<f8").reshape(fi, fo).copy())
            biases.append(np.frombuffer(bb, dtype="<f8").copy())
        if fh.read(1):
            raise CheckpointError("trailing bytes after payload")
    return NetParams(topo, weights, biases)


def save_centers(path, weights: ClassifierWeights, config_hash=None) -> None:
    k, d = weights.centers.shape
    parts = [MAGIC, struct.pack("<I", _KIND_CENTERS), _hash_to_bytes(config_hash),
             struct.pack("<II", k, d),
             np.ascontiguousarray(weights.centers, dtype="<f8").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_centers(path) -> ClassifierWeights:
    with open(path, "rb") as fh:
        _read_header(fh, _KIND_CENTERS)
        k, d = struct.unpack("<II", fh.read(8))
        buf = fh.read(8 * k * d)
        if len(buf) != 8 * k * d:
            raise CheckpointError("truncated payload")
        if fh.read(1):
            raise CheckpointError("trailing bytes after payload")
        return ClassifierWeights(np.frombuffer(buf, dtype="<f8").reshape(k, d).copy())


def checkpoint_hash(path) -> str:
    """The config hash embedded in a checkpoint, as hex."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        fh.read(4)
        return fh.read(32).hex()
