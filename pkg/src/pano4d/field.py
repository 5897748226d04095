"""Scene geometry as a small MLP over view directions.

The field maps a unit direction to a positive radial distance. It is small
enough that plain numpy matmuls with hand-written backward passes are fast
and keep the whole optimization dependency-free and deterministic.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .io import FormatError

FIELD_MAGIC = b"P4GF"
FIELD_VERSION = 1


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.asarray(0.0, z.dtype), z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


class GeometricField:
    """MLP from encoded directions to positive depth.

    Input is the direction plus sin/cos at octave frequencies 1, 2, ..., 2^5
    per component (39 features). Hidden layers use ReLU, the head applies
    softplus so the output is positive for any input. Evaluation is
    deterministic: the same directions always produce identical outputs.
    """

    def __init__(self, hidden: int = 128, layers: int = 4, octaves: int = 6,
                 seed: int = 0, dtype=np.float32):
        self.hidden = hidden
        self.layers = layers
        self.octaves = octaves
        self.dtype = np.dtype(dtype)
        in_dim = 3 + 6 * octaves
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * layers + [1]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / d_in) if i < layers else np.sqrt(1.0 / d_in)
            self.weights.append(rng.normal(0.0, scale, (d_in, d_out)).astype(self.dtype))
            self.biases.append(np.zeros(d_out, self.dtype))
        # Start the field near depth 1 everywhere.
        self.biases[-1][0] = softplus_inverse(1.0)

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "GeometricField":
        other = GeometricField.__new__(GeometricField)
        other.hidden = self.hidden
        other.layers = self.layers
        other.octaves = self.octaves
        other.dtype = self.dtype
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other

    def encode(self, dirs: np.ndarray) -> np.ndarray:
        """Frequency-encode directions, normalizing non-unit inputs."""
        d = np.asarray(dirs, self.dtype).reshape(-1, 3)
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        d = d / np.maximum(norm, np.asarray(1e-12, self.dtype))
        parts = [d]
        for i in range(self.octaves):
            s = d * self.dtype.type(2.0**i)
            parts += [np.sin(s), np.cos(s)]
        return np.concatenate(parts, axis=1)

    def forward(self, enc: np.ndarray, want_cache: bool = False):
        """Depth for pre-encoded inputs; optionally keep the backward cache."""
        h = enc
        pre = []
        act = []
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = h @ w + b
            h = np.maximum(z, 0.0)
            if want_cache:
                pre.append(z)
                act.append(h)
        z_out = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        depth = softplus(z_out)
        if want_cache:
            return depth, (enc, pre, act, z_out)
        return depth

    def backward(self, cache, grad_depth: np.ndarray) -> list[np.ndarray]:
        """Gradients of sum(grad_depth * depth) w.r.t. params, in params order."""
        enc, pre, act, z_out = cache
        dz = (grad_depth * sigmoid(z_out))[:, None]
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = act[-1].T @ dz
        grads_b[-1] = dz.sum(axis=0)
        dh = dz @ self.weights[-1].T
        for i in range(len(pre) - 1, -1, -1):
            dz = dh * (pre[i] > 0.0)
            below = act[i - 1] if i > 0 else enc
            grads_w[i] = below.T @ dz
            grads_b[i] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ self.weights[i].T
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        return out

    def evaluate(self, dirs: np.ndarray, chunk: int = 1 << 16) -> np.ndarray:
        """Positive depths for directions of any leading shape."""
        d = np.asarray(dirs)
        flat = d.reshape(-1, 3)
        out = np.empty(len(flat), self.dtype)
        for start in range(0, len(flat), chunk):
            sl = slice(start, start + chunk)
            out[sl] = self.forward(self.encode(flat[sl]))
        return out.reshape(d.shape[:-1])


class Adam:
    """Stock Adam; params are updated in place each step."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray | None]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                m += (1.0 - self.beta1) * g
                v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_field(path: str | Path, field: GeometricField,
               alphas: np.ndarray | None = None,
               betas: np.ndarray | None = None) -> None:
    """Checkpoint a field and optional per-view affine state.

    Layout: 16-byte header (magic, version, octaves, hidden width, hidden
    layer count, view count), then float32 weights in layer order (matrix
    then bias), then the per-view alphas, then the beta grids preceded by
    their height and width.
    """
    n_views = 0 if alphas is None else len(alphas)
    if (betas is None) != (alphas is None):
        raise ValueError("alphas and betas must be given together")
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<IHHHH", FIELD_VERSION, field.octaves,
                            field.hidden, field.layers, n_views))
        for p in field.params:
            f.write(p.astype("<f4").tobytes())
        if n_views:
            f.write(np.asarray(alphas, "<f4").tobytes())
            f.write(struct.pack("<II", betas.shape[1], betas.shape[2]))
            f.write(np.asarray(betas, "<f4").tobytes())


def load_field(path: str | Path, dtype=np.float32):
    """Load a checkpoint; returns (field, alphas, betas), the latter None
    when the file holds no view state."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError("field checkpoint shorter than its header", len(data))
    if data[:4] != FIELD_MAGIC:
        raise FormatError(f"bad field magic {data[:4]!r}, expected {FIELD_MAGIC!r}", 0)
    version, octaves, hidden, layers, n_views = struct.unpack_from("<IHHHH", data, 4)
    if version != FIELD_VERSION:
        raise FormatError(f"unsupported field version {version}", 4)
    field = GeometricField(hidden=hidden, layers=layers, octaves=octaves, dtype=dtype)
    pos = 16
    for i, p in enumerate(field.params):
        end = pos + 4 * p.size
        if len(data) < end:
            raise FormatError("field weights truncated", len(data))
        flat = np.frombuffer(data[pos:end], dtype="<f4")
        target = field.weights[i // 2] if i % 2 == 0 else field.biases[i // 2]
        target[...] = flat.reshape(target.shape).astype(dtype)
        pos = end
    if n_views == 0:
        return field, None, None
    end = pos + 4 * n_views
    if len(data) < end + 8:
        raise FormatError("view state truncated", len(data))
    alphas = np.frombuffer(data[pos:end], dtype="<f4").astype(dtype)
    h, w = struct.unpack_from("<II", data, end)
    pos = end + 8
    end = pos + 4 * n_views * h * w
    if len(data) < end:
        raise FormatError("beta grids truncated", len(data))
    betas = np.frombuffer(data[pos:end], dtype="<f4").reshape(n_views, h, w).astype(dtype)
    return field, alphas, betas
