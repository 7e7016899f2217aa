"""Readout models over the diffusion reservoir.

All models predict a scalar per sample and share one calling convention:
``model.forward(batch) -> (prediction, cache)`` and
``model.backward(cache, dpred) -> grads`` with ``grads`` aligned to
``model.params()``. A :class:`Batch` carries whatever a model needs: fixed
measurements ``r_fix`` for the attention input, ``r_out`` (fixed readout
values, AERC/linear), ``fields`` (snapshots for adaptive sampling) and
``windows`` (delay vectors).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .neural import (
    DenseLayer,
    backward as nn_backward,
    count_parameters,
    dense,
    forward as nn_forward,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
)
from .reservoir import Grid, sample_bilinear_batch

MODEL_KINDS = ("linear", "aerc", "asaerc", "delay-mlp")
HIDDEN = 128


@dataclass
class Batch:
    r_fix: np.ndarray | None = None
    r_out: np.ndarray | None = None
    fields: np.ndarray | None = None
    windows: np.ndarray | None = None
    y: np.ndarray | None = None


# --- measurement layouts ------------------------------------------------------------


def default_margin(grid: Grid) -> float:
    return 2.0 * max(grid.hx, grid.hy)


def lattice_points(n: int, grid: Grid, margin: float | None = None) -> np.ndarray:
    """``n`` fixed sensor locations inside ``[margin, L - margin]^2``.

    Square ``n`` gives a cell-centred ``sqrt(n) x sqrt(n)`` lattice; other
    counts fall back to an unscrambled 2-D Halton scatter.
    """
    m = default_margin(grid) if margin is None else margin
    side = math.isqrt(n)
    if side * side == n:
        u = (np.arange(side) + 0.5) / side
        U, V = np.meshgrid(u, u, indexing="ij")
        unit = np.column_stack([U.ravel(), V.ravel()])
    else:
        unit = qmc.Halton(d=2, scramble=False).random(n + 1)[1:]
    return np.column_stack([m + unit[:, 0] * (grid.Lx - 2 * m), m + unit[:, 1] * (grid.Ly - 2 * m)])


def _sample(fields, points, grid):
    B = fields.shape[0]
    qx = np.broadcast_to(points[:, 0], (B, len(points)))
    qy = np.broadcast_to(points[:, 1], (B, len(points)))
    return sample_bilinear_batch(fields, qx, qy, grid, grad=False)


def _combine(w, r):
    return (w * r).sum(axis=1)


# --- linear readout ---------------------------------------------------------------------


class LinearReadout:
    kind = "linear"

    def __init__(self, points: np.ndarray, grid: Grid, weights: np.ndarray | None = None):
        self.points = np.asarray(points, dtype=float)
        self.readout_points = self.points
        self.grid = grid
        self.W = np.zeros(len(self.points)) if weights is None else np.asarray(weights, dtype=float)
        if self.W.shape != (len(self.points),):
            raise ValueError("readout weights must match the number of measurement points")

    @property
    def n_fix(self):
        return len(self.points)

    def params(self):
        return [self.W]

    def n_params(self):
        return self.W.size

    def forward(self, batch: Batch):
        r = batch.r_fix
        if r.shape[-1] != len(self.W):
            raise ValueError("measurement vector length does not match readout")
        return r @ self.W, r

    def backward(self, cache, dpred):
        return [dpred @ cache]


def linear_forward(readout: LinearReadout, r_tilde):
    return np.asarray(r_tilde, dtype=float) @ readout.W


class SingularSystemError(np.linalg.LinAlgError):
    pass


def ridge_fit(R: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(R^T R + lam I) W = R^T Y`` by Cholesky (SVD-backed lstsq at ``lam == 0``)."""
    R = np.asarray(R, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if lam < 0:
        raise ValueError("ridge parameter must be non-negative")
    if lam == 0:
        rank = np.linalg.matrix_rank(R)
        if rank < R.shape[1]:
            raise SingularSystemError("R^T R is singular at lambda=0; use lambda > 0")
        return np.linalg.lstsq(R, Y, rcond=None)[0]
    A = R.T @ R + lam * np.eye(R.shape[1])
    L = np.linalg.cholesky(A)
    return np.linalg.solve(L.T, np.linalg.solve(L, R.T @ Y))


# --- AERC ---------------------------------------------------------------------------------


class AercModel:
    """Attention weights from fixed measurements, applied to fixed readout points."""

    kind = "aerc"

    def __init__(self, points, readout_points, grid: Grid, hidden: int = HIDDEN, rng=None):
        rng = np.random.default_rng(rng)
        self.points = np.asarray(points, dtype=float)
        self.readout_points = np.asarray(readout_points, dtype=float)
        self.grid = grid
        self.backbone = dense(len(self.points), hidden, "relu", rng)
        self.weight_head = dense(hidden, len(self.readout_points), "identity", rng)

    @property
    def n_fix(self):
        return len(self.points)

    @property
    def n_out(self):
        return len(self.readout_points)

    def layers(self):
        return [self.backbone, self.weight_head]

    def params(self):
        return [p for l in self.layers() for p in l.params()]

    def n_params(self):
        return count_parameters(self.layers())

    def attention(self, r_fix):
        h, c1 = nn_forward([self.backbone], r_fix)
        w, c2 = nn_forward([self.weight_head], h)
        return w, (c1, c2)

    def forward(self, batch: Batch):
        r = batch.r_out if batch.r_out is not None else _sample(batch.fields, self.readout_points, self.grid)
        w, caches = self.attention(batch.r_fix)
        return _combine(w, r), (caches, w, r)

    def backward(self, cache, dpred):
        (c1, c2), w, r = cache
        dw = dpred[:, None] * r
        g_head, dh = nn_backward([self.weight_head], c2, dw)
        g_bb, _ = nn_backward([self.backbone], c1, dh)
        return [*g_bb[0], *g_head[0]]


def aerc_forward(model: AercModel, field, r_tilde):
    """Single-field or batched AERC prediction."""
    fields, r_tilde, single = _as_batch(field, r_tilde)
    pred, cache = model.forward(Batch(r_fix=r_tilde, fields=fields))
    return (pred[0] if single else pred), cache


def _as_batch(field, r_tilde):
    field = np.asarray(field, dtype=float)
    r_tilde = np.asarray(r_tilde, dtype=float)
    if field.ndim == 2:
        return field[None], r_tilde[None], True
    return field, r_tilde, False


# --- ASAERC ---------------------------------------------------------------------------------


class AsaercModel:
    """Shared backbone with a query-position head and a weight head.

    Raw position outputs are ordered ``(x_0, y_0, x_1, y_1, ...)`` and squashed
    to ``margin + (L - 2 margin) * sigmoid(raw)``. Setting ``pinned_queries``
    bypasses the position head and samples at those fixed points.
    """

    kind = "asaerc"

    def __init__(
        self,
        points,
        n_queries: int,
        grid: Grid,
        hidden: int = HIDDEN,
        margin: float | None = None,
        kernel: str = "bilinear",
        kernel_width: float = 0.02,
        rng=None,
        init_queries=None,
    ):
        if kernel not in ("bilinear", "gaussian"):
            raise ValueError(f"unknown kernel {kernel!r}")
        rng = np.random.default_rng(rng)
        self.points = np.asarray(points, dtype=float)
        self.grid = grid
        self.margin = default_margin(grid) if margin is None else margin
        self.kernel = kernel
        self.kernel_width = kernel_width
        self.backbone = dense(len(self.points), hidden, "relu", rng)
        self.weight_head = dense(hidden, n_queries, "identity", rng)
        self.position_head = dense(hidden, 2 * n_queries, "identity", rng)
        self.pinned_queries = None
        if init_queries is not None:
            self.start_at(init_queries)

    @property
    def n_fix(self):
        return len(self.points)

    @property
    def n_out(self):
        return self.weight_head.n_out

    def layers(self):
        return [self.backbone, self.weight_head, self.position_head]

    def params(self):
        return [p for l in self.layers() for p in l.params()]

    def n_params(self):
        return count_parameters(self.layers())

    def start_at(self, points):
        """Zero the position-head weights and aim its bias at ``points``."""
        p = (np.asarray(points, dtype=float) - self.margin) / self.span
        if p.shape != (self.n_out, 2) or np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("initial queries must be (N, 2) and strictly inside the squashing box")
        self.position_head.weights[...] = 0.0
        self.position_head.bias[...] = np.log(p / (1.0 - p)).ravel()

    @property
    def span(self):
        return np.array([self.grid.Lx - 2 * self.margin, self.grid.Ly - 2 * self.margin])

    def queries(self, r_fix):
        """Query coordinates ``(B, N, 2)`` for fixed measurements ``r_fix``."""
        h, _ = nn_forward([self.backbone], r_fix)
        raw, _ = nn_forward([self.position_head], h)
        return self._squash(raw)[0]

    def _squash(self, raw):
        s = sigmoid(raw).reshape(raw.shape[0], -1, 2)
        return self.margin + self.span * s, s

    def _measure(self, fields, q):
        if self.kernel == "bilinear":
            return sample_bilinear_batch(fields, q[..., 0], q[..., 1], self.grid)
        return sample_gaussian_batch(fields, q[..., 0], q[..., 1], self.kernel_width, self.grid)

    def forward(self, batch: Batch):
        h, c1 = nn_forward([self.backbone], batch.r_fix)
        w, c2 = nn_forward([self.weight_head], h)
        if self.pinned_queries is not None:
            q = np.broadcast_to(self.pinned_queries, (len(h), *self.pinned_queries.shape))
            r = _sample(batch.fields, self.pinned_queries, self.grid)
            return _combine(w, r), (c1, c2, None, w, r, None, None, None)
        raw, c3 = nn_forward([self.position_head], h)
        q, s = self._squash(raw)
        r, dx, dy = self._measure(batch.fields, q)
        return _combine(w, r), (c1, c2, c3, w, r, dx, dy, s)

    def backward(self, cache, dpred):
        c1, c2, c3, w, r, dx, dy, s = cache
        g_w, dh = nn_backward([self.weight_head], c2, dpred[:, None] * r)
        if c3 is None:
            g_pos = [(np.zeros_like(self.position_head.weights), np.zeros_like(self.position_head.bias))]
        else:
            dr = dpred[:, None] * w
            dq = np.stack([dr * dx, dr * dy], axis=-1)  # (B, N, 2)
            draw = (dq * self.span * s * (1.0 - s)).reshape(len(dr), -1)
            g_pos, dh_pos = nn_backward([self.position_head], c3, draw)
            dh = dh + dh_pos
        g_bb, _ = nn_backward([self.backbone], c1, dh)
        return [*g_bb[0], *g_w[0], *g_pos[0]]


def asaerc_forward(model: AsaercModel, field_T, r_tilde):
    fields, r_tilde, single = _as_batch(field_T, r_tilde)
    pred, cache = model.forward(Batch(r_fix=r_tilde, fields=fields))
    return (pred[0] if single else pred), cache


def asaerc_backward(model: AsaercModel, cache, loss_gradient):
    return model.backward(cache, np.atleast_1d(np.asarray(loss_gradient, dtype=float)))


def sample_gaussian_batch(fields, qx, qy, width, grid: Grid, radius: float = 4.0):
    """Batched form of :func:`reservoir.sample_gaussian_kernel`."""
    R = int(math.floor(radius * width / min(grid.hx, grid.hy))) + 1
    off = np.arange(-R, R + 1)
    ci = np.rint(qx / grid.hx).astype(np.int64)
    cj = np.rint(qy / grid.hy).astype(np.int64)
    I = ci[..., None, None] + off[:, None]  # (B, N, W, 1)
    J = cj[..., None, None] + off[None, :]  # (B, N, 1, W)
    DX = I * grid.hx - qx[..., None, None]
    DY = J * grid.hy - qy[..., None, None]
    d2 = DX**2 + DY**2
    inside = (I >= 0) & (I < grid.nx) & (J >= 0) & (J < grid.ny) & (d2 <= (radius * width) ** 2)
    e = np.where(inside, np.exp(-d2 / (2 * width**2)), 0.0)
    b = np.arange(fields.shape[0])[:, None, None, None]
    u = fields[b, np.clip(I, 0, grid.nx - 1), np.clip(J, 0, grid.ny - 1)]
    s0 = e.sum(axis=(-1, -2))
    value = (e * u).sum(axis=(-1, -2)) / s0
    s2 = width**2
    gx = ((e * u * DX).sum(axis=(-1, -2)) - value * (e * DX).sum(axis=(-1, -2))) / (s0 * s2)
    gy = ((e * u * DY).sum(axis=(-1, -2)) - value * (e * DY).sum(axis=(-1, -2))) / (s0 * s2)
    return value, gx, gy


# --- delay-embedding MLP --------------------------------------------------------------------


class DelayMlp:
    """MLP on ``(x_t, x_{t-1}, ..., x_{t-k})``."""

    kind = "delay-mlp"

    def __init__(self, k: int, hidden: int = HIDDEN, rng=None, activation: str = "relu"):
        rng = np.random.default_rng(rng)
        self.k = k
        self.hidden_layer = dense(k + 1, hidden, activation, rng)
        self.out = dense(hidden, 1, "identity", rng)

    def layers(self):
        return [self.hidden_layer, self.out]

    def params(self):
        return [p for l in self.layers() for p in l.params()]

    def n_params(self):
        return count_parameters(self.layers())

    def forward(self, batch: Batch):
        x = batch.windows
        if x.shape[-1] != self.k + 1:
            raise ValueError(f"window length {x.shape[-1]} != k+1 = {self.k + 1}")
        out, cache = nn_forward(self.layers(), x)
        return out[:, 0], cache

    def backward(self, cache, dpred):
        grads, _ = nn_backward(self.layers(), cache, dpred[:, None])
        return [g for pair in grads for g in pair]


def delay_forward(model: DelayMlp, window):
    w = np.asarray(window, dtype=float)
    pred, _ = model.forward(Batch(windows=w[None] if w.ndim == 1 else w))
    return pred[0] if w.ndim == 1 else pred


def delay_windows(inputs: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """Rows ``(x_n, x_{n-1}, ..., x_{n-k})`` for each ``n`` in ``idx``."""
    return np.stack([inputs[idx - j] for j in range(k + 1)], axis=1)


# --- parameter bookkeeping -----------------------------------------------------------------


def parameter_count(kind: str, n_fix: int, n: int, hidden: int = HIDDEN, k: int = 0) -> int:
    if kind == "linear":
        return n_fix
    aerc = n_fix * hidden + hidden + hidden * n + n
    if kind == "aerc":
        return aerc
    if kind == "asaerc":
        return aerc + hidden * 2 * n + 2 * n
    if kind == "delay-mlp":
        return (k + 1) * hidden + hidden + hidden + 1
    raise ValueError(f"unknown model kind {kind!r}")


def model_parameter_table(n_fix_values, n_values, hidden: int = HIDDEN) -> list[dict]:
    rows = []
    for n_fix in n_fix_values:
        for n in n_values:
            for kind in ("linear", "aerc", "asaerc"):
                rows.append(dict(model=kind, n_fix=n_fix, n=n, params=parameter_count(kind, n_fix, n, hidden)))
    return rows


# --- construction and checkpoints ----------------------------------------------------------


def build_model(kind: str, grid: Grid, n_fix: int = 64, n: int = 64, hidden: int = HIDDEN, seed: int = 0, **kw):
    rng = np.random.default_rng(seed)
    margin = kw.get("margin")
    psi = lattice_points(n_fix, grid, margin)
    if kind == "linear":
        return LinearReadout(psi, grid)
    if kind == "aerc":
        readout = psi if n == n_fix else lattice_points(n, grid, margin)
        return AercModel(psi, readout, grid, hidden, rng)
    if kind == "asaerc":
        start = psi if n == n_fix else lattice_points(n, grid, margin)
        return AsaercModel(
            psi,
            n,
            grid,
            hidden,
            margin,
            kw.get("kernel", "bilinear"),
            kw.get("kernel_width", 0.02),
            rng,
            init_queries=start if kw.get("lattice_start", True) else None,
        )
    if kind == "delay-mlp":
        return DelayMlp(kw.get("k", 0), hidden, rng)
    raise ValueError(f"unknown model kind {kind!r}")


def _layer_arrays(model) -> dict:
    if isinstance(model, LinearReadout):
        return {"W": model.W}
    out = {}
    for i, layer in enumerate(model.layers()):
        out[f"layer{i}.weights"] = layer.weights
        out[f"layer{i}.bias"] = layer.bias
    return out


def save_model(path, model, seed: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    """Neural checkpoint plus a JSON block with the model kind and measurement layout.

    ``extra`` is stored alongside (e.g. the hash of the config that produced it)
    and comes back as ``model.meta`` from :func:`load_model`.
    """
    meta = {"kind": model.kind, "extra": extra or {}}
    if hasattr(model, "grid"):
        g = model.grid
        meta["grid"] = dict(nx=g.nx, ny=g.ny, Lx=g.Lx, Ly=g.Ly)
        meta["points"] = model.points.tolist()
    if isinstance(model, AercModel):
        meta["readout_points"] = model.readout_points.tolist()
    if isinstance(model, AsaercModel):
        meta.update(margin=model.margin, kernel=model.kernel, kernel_width=model.kernel_width)
    if isinstance(model, DelayMlp):
        meta["k"] = model.k
    save_checkpoint(path, _layer_arrays(model), seed, epoch, json.dumps(meta).encode())


def load_model(path):
    arrays, seed, epoch, blob = load_checkpoint(path)
    meta = json.loads(blob)
    kind = meta["kind"]
    if kind == "delay-mlp":
        k = meta["k"]
        hidden = arrays["layer0.weights"].shape[0]
        model = DelayMlp(k, hidden)
    else:
        grid = Grid(**meta["grid"])
        psi = np.array(meta["points"])
        if kind == "linear":
            model = LinearReadout(psi, grid, arrays["W"])
            model.meta = meta.get("extra", {})
            return model, seed, epoch
        hidden = arrays["layer0.weights"].shape[0]
        if kind == "aerc":
            model = AercModel(psi, np.array(meta["readout_points"]), grid, hidden)
        else:
            n = arrays["layer1.weights"].shape[0]
            model = AsaercModel(psi, n, grid, hidden, meta["margin"], meta["kernel"], meta["kernel_width"])
    for i, layer in enumerate(model.layers()):
        layer.weights[...] = arrays[f"layer{i}.weights"]
        layer.bias[...] = arrays[f"layer{i}.bias"]
    model.meta = meta.get("extra", {})
    return model, seed, epoch
