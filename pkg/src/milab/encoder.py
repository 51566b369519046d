"""MLP feature extractor, projection head, SGD and the MILE1 checkpoint format.

Checkpoint layout (little-endian)::

    magic    6 bytes   b"MILE1\\0"
    dims     3 x u32   input m, embedding d, projection d'
    n_feat   u32       number of feature-extractor layers
    n_proj   u32       number of projection-head layers
    layers   repeated  u32 rows, u32 cols, rows*cols f64 weight, cols f64 bias
                       (feature layers first, then projection layers)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, FormatError, ShapeError

MAGIC = b"MILE1\0"


@dataclass
class EncoderParams:
    feature_layers: list  # [(W (in, out), b (out,)), ...]
    projection_layers: list
    dims: tuple

    def flat(self):
        out = []
        for w, b in self.feature_layers + self.projection_layers:
            out.extend([w, b])
        return out

    @classmethod
    def from_flat(cls, arrays, n_feature, dims):
        pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        return cls(pairs[:n_feature], pairs[n_feature:], tuple(dims))

    def copy(self):
        return EncoderParams.from_flat([a.copy() for a in self.flat()], len(self.feature_layers), self.dims)


def init_params(dims, hidden_widths=(64,), seed=0, projection_hidden=()):
    """He-initialized encoder.

    ``dims = (m, d, d')``; the feature extractor is m -> hidden... -> d and the
    projection head d -> projection_hidden... -> d'.
    """
    m, d, dp = (int(v) for v in dims)
    widths = [m, *[int(h) for h in hidden_widths], d]
    proj = [d, *[int(h) for h in projection_hidden], dp]
    if min(widths + proj) <= 0:
        raise ConfigError(f"all layer widths must be positive, got {widths} / {proj}")
    rng = np.random.default_rng(seed)

    def layers(ws):
        out = []
        for fan_in, fan_out in zip(ws[:-1], ws[1:]):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            out.append((w, np.zeros(fan_out)))
        return out

    return EncoderParams(layers(widths), layers(proj), (m, d, dp))


def _mlp(layers, x, final_relu=False):
    h = x
    n = len(layers)
    for i, (w, b) in enumerate(layers):
        h = nc.add(nc.matmul(h, w), b)
        if i < n - 1 or final_relu:
            h = nc.relu(h)
    return h


def forward_features(p, x, layers=None):
    """Embeddings h = f(x).  ``layers`` may hold tape Vars for training."""
    layers = p.feature_layers if layers is None else layers
    xv = nc.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != p.dims[0]:
        raise ShapeError(f"expected input with {p.dims[0]} columns, got shape {xv.shape}")
    return _mlp(layers, x)


def forward_projection(p, h, layers=None):
    """Unit-norm projections z = psi(h) / ||psi(h)||."""
    layers = p.projection_layers if layers is None else layers
    hv = nc.value_of(h)
    if hv.ndim != 2 or hv.shape[1] != p.dims[1]:
        raise ShapeError(f"expected embeddings with {p.dims[1]} columns, got shape {hv.shape}")
    return nc.l2_normalize(_mlp(layers, h))


def embed(p, x, chunk=4096):
    """Inference-only embeddings for a large table."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= chunk:
        return forward_features(p, x)
    return np.concatenate([forward_features(p, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def tape_layers(tape, p):
    """Register every parameter of ``p`` on ``tape``; returns (feature, projection) Var layers."""
    feat = [(tape.param(w), tape.param(b)) for w, b in p.feature_layers]
    proj = [(tape.param(w), tape.param(b)) for w, b in p.projection_layers]
    return feat, proj


@dataclass
class SgdState:
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def sgd_step(params, grads, state):
    """In-place momentum SGD on a list of arrays.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v
    """
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        p -= state.learning_rate * v
    return params


def cosine_lr(epoch, total_epochs, base_lr):
    if total_epochs <= 0 or not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def to_bytes(p):
    m, d, dp = p.dims
    parts = [MAGIC, struct.pack("<5I", m, d, dp, len(p.feature_layers), len(p.projection_layers))]
    for w, b in p.feature_layers + p.projection_layers:
        rows, cols = w.shape
        parts.append(struct.pack("<2I", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(buf):
    if buf[:6] != MAGIC:
        raise FormatError("bad encoder checkpoint magic", 0)
    off = 6
    if len(buf) < off + 20:
        raise FormatError("truncated encoder header", len(buf))
    m, d, dp, nf, npj = struct.unpack_from("<5I", buf, off)
    off += 20
    layers = []
    for _ in range(nf + npj):
        if len(buf) < off + 8:
            raise FormatError("truncated layer header", len(buf))
        rows, cols = struct.unpack_from("<2I", buf, off)
        off += 8
        need = 8 * (rows * cols + cols)
        if len(buf) < off + need:
            raise FormatError("truncated layer data", len(buf))
        w = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64)
        off += 8 * rows * cols
        b = np.frombuffer(buf, dtype="<f8", count=cols, offset=off).astype(np.float64)
        off += 8 * cols
        layers.append((w, b))
    if off != len(buf):
        raise FormatError("trailing bytes after encoder checkpoint", off)
    return EncoderParams(layers[:nf], layers[nf:], (m, d, dp))


def save_checkpoint(p, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(p))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
