"""Small dense networks with hand-written backprop and Adam."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("identity", "relu", "sigmoid")


def _sigmoid(z):
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


sigmoid = _sigmoid


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in) and bias (out,)")

    @property
    def n_in(self) -> int:
        return self.weights.shape[1]

    @property
    def n_out(self) -> int:
        return self.weights.shape[0]

    def params(self):
        return [self.weights, self.bias]


def dense(n_in: int, n_out: int, activation: str = "identity", rng=None, zero=False) -> DenseLayer:
    """Uniform fan-in initialisation, U(-1/sqrt(n_in), 1/sqrt(n_in)) for weights and bias."""
    if zero:
        return DenseLayer(np.zeros((n_out, n_in)), np.zeros(n_out), activation)
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return DenseLayer(W, b, activation)


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def forward(layers: list[DenseLayer], x: np.ndarray):
    """Run a batch ``x`` of shape ``(B, n_in)`` (or a single vector) through ``layers``.

    Returns the output and a cache of (input, pre-activation, output) per layer.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None] if single else x
    cache = []
    for layer in layers:
        if h.shape[1] != layer.n_in:
            raise ValueError(f"shape mismatch: got {h.shape[1]} inputs, layer expects {layer.n_in}")
        z = h @ layer.weights.T + layer.bias
        a = _activate(z, layer.activation)
        cache.append((h, z, a))
        h = a
    return (h[0] if single else h), Cache(cache, [id(l.weights) for l in layers], single)


@dataclass
class Cache:
    entries: list
    owners: list
    single: bool
    consumed: bool = False


def backward(layers: list[DenseLayer], cache: Cache, grad_out: np.ndarray):
    """Reverse-mode pass; returns ``([(dW, db), ...], grad_input)``.

    Gradients are summed over the batch.
    """
    if cache.owners != [id(l.weights) for l in layers] or len(cache.entries) != len(layers):
        raise ValueError("stale cache: layers differ from the forward call")
    g = np.asarray(grad_out, dtype=float)
    if cache.single:
        g = g[None]
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        layer = layers[k]
        h, z, a = cache.entries[k]
        if layer.activation == "relu":
            g = g * (z > 0)
        elif layer.activation == "sigmoid":
            g = g * a * (1.0 - a)
        grads[k] = (g.T @ h, g.sum(axis=0))
        g = g @ layer.weights
    return grads, (g[0] if cache.single else g)


def finite_difference_grads(loss_fn, params: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.empty_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    """``max|a - n| / max|n|`` over all entries of all arrays."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = np.abs(n).max()
    return float(np.abs(a - n).max() / scale) if scale > 0 else float(np.abs(a).max())


def count_parameters(layers: list[DenseLayer]) -> int:
    return sum(l.weights.size + l.bias.size for l in layers)


@dataclass
class AdamState:
    lr: float = 0.002
    decay: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # optional L2 term, off by default
    step: int = 0
    epoch: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @property
    def effective_lr(self) -> float:
        return self.lr * self.decay**self.epoch

    def end_epoch(self):
        self.epoch += 1


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter/gradient/state lists differ in length")
    state.step += 1
    t = state.step
    lr = state.effective_lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t if b1 > 0 else 1.0
    c2 = 1.0 - b2**t if b2 > 0 else 1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --- checkpoints ----------------------------------------------------------------------

CKPT_MAGIC = b"ANNC"
CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], seed: int, epoch: int, meta: bytes = b"") -> None:
    """Write named f64 arrays plus seed/epoch and an opaque metadata blob."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sHqqI", CKPT_MAGIC, CKPT_VERSION, seed, epoch, len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}q", *a.shape))
            fh.write(a.tobytes())
        fh.write(struct.pack("<I", len(meta)) + meta)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(arrays, seed, epoch, meta)``."""
    raw = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        s = struct.calcsize(fmt)
        if off + s > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, raw, off)
        off += s
        return out

    magic, version, seed, epoch, count = take("<4sHqqI")
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a checkpoint file")
    arrays = {}
    for _ in range(count):
        (klen,) = take("<H")
        name = raw[off : off + klen].decode()
        off += klen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}q") if ndim else ()
        nbytes = 8 * int(np.prod(shape)) if ndim else 8
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=off).reshape(tuple(shape)).copy()
        off += nbytes
    (mlen,) = take("<I")
    meta = raw[off : off + mlen]
    return arrays, seed, epoch, meta
