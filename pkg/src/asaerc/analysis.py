"""Post-hoc analyses: readout-contribution correlations, query histograms, sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynsys import Dataset
from .neural import forward as nn_forward
from .models import AercModel, AsaercModel, Batch, LinearReadout, build_model, parameter_count
from .train import FeatureSource, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

RHO_BINS = 50
QUERY_BINS = 64
POOLING = "pairs pooled across systems; rho per system over its test steps"
COVARIANCE = "population (1/T)"


def pearson(a, b) -> float | None:
    """Population Pearson correlation; ``None`` when either series is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("pearson needs two 1-D series of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    # relative threshold so that rounding noise on a constant series is not a signal
    if sa <= 1e-14 * max(1.0, np.abs(a).max()) or sb <= 1e-14 * max(1.0, np.abs(b).max()):
        return None
    return float(np.clip(np.mean(da * db) / (sa * sb), -1.0, 1.0))


def pairwise_correlations(X: np.ndarray) -> tuple[np.ndarray, int]:
    """All ``rho_ij`` (i < j) between the columns of ``X`` (T, N).

    Pairs involving a constant column are dropped; returns ``(rho, n_dropped)``.
    """
    X = np.asarray(X, dtype=float)
    T, N = X.shape
    if T < 2:
        raise ValueError("need at least two time steps")
    D = X - X.mean(axis=0)
    s = np.sqrt(np.mean(D * D, axis=0))
    ok = s > 1e-14 * np.maximum(1.0, np.abs(X).max(axis=0))
    Z = np.zeros_like(D)
    Z[:, ok] = D[:, ok] / s[ok]
    C = np.clip(Z.T @ Z / T, -1.0, 1.0)
    iu, ju = np.triu_indices(N, k=1)
    defined = ok[iu] & ok[ju]
    return C[iu, ju][defined], int((~defined).sum())


@dataclass
class ContributionTrace:
    values: np.ndarray  # (T, N)
    weights: np.ndarray
    products: np.ndarray
    system_of: np.ndarray  # (T,) index into dataset.boundaries
    kind: str

    def __post_init__(self):
        if not (self.values.shape == self.weights.shape == self.products.shape):
            raise ValueError("values, weights and products must share (T, N)")


def contribution_trace(model, dataset: Dataset, store=None, split: str = "test", source=None, chunk: int = 2048):
    """Per-step readout values, weights and products over a split."""
    source = source or FeatureSource(model, dataset, store)
    idx = source.usable(split)
    vals, wts = [], []
    for s in range(0, len(idx), chunk):
        batch = source.batch(idx[s : s + chunk])
        if isinstance(model, LinearReadout):
            r = batch.r_fix
            w = np.broadcast_to(model.W, r.shape)
        elif isinstance(model, AercModel):
            _, (_, w, r) = model.forward(batch)
        elif isinstance(model, AsaercModel):
            _, cache = model.forward(batch)
            w, r = cache[3], cache[4]
        else:
            raise ValueError(f"no readout contributions for {model.kind}")
        vals.append(np.array(r, dtype=float))
        wts.append(np.array(w, dtype=float))
    values, weights = np.concatenate(vals), np.concatenate(wts)
    return ContributionTrace(values, weights, values * weights, dataset.system_of[idx], model.kind)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    n_pairs: int
    n_undefined: int

    @property
    def mean_abs(self) -> float:
        centres = 0.5 * (self.edges[1:] + self.edges[:-1])
        return float((np.abs(centres) * self.counts).sum() / max(self.counts.sum(), 1))

    def rows(self):
        for k in range(len(self.counts)):
            yield dict(bin_left=float(self.edges[k]), bin_right=float(self.edges[k + 1]), count=int(self.counts[k]))


def _pooled(X, system_of):
    rhos, dropped = [], 0
    for k in np.unique(system_of):
        rho, d = pairwise_correlations(X[system_of == k])
        rhos.append(rho)
        dropped += d
    return np.concatenate(rhos) if rhos else np.empty(0), dropped


def correlation_distributions(trace: ContributionTrace, model_kind: str | None = None, bins: int = RHO_BINS):
    """Histograms of pairwise correlations for values, weights and products.

    The static weights of a linear readout have no defined correlation; by
    convention every weight-weight entry is then set to 0 rather than dropped.
    Also returns the raw pooled correlations under ``"raw"``.
    """
    kind = model_kind or trace.kind
    edges = np.linspace(-1.0, 1.0, bins + 1)
    out, raw = {}, {}
    for name in ("values", "weights", "products"):
        X = getattr(trace, name)
        if name == "weights" and kind == "linear":
            n = X.shape[1]
            per_sys = len(np.unique(trace.system_of))
            rho, dropped = np.zeros(per_sys * n * (n - 1) // 2), 0
        else:
            rho, dropped = _pooled(X, trace.system_of)
        counts, _ = np.histogram(rho, bins=edges)
        out[name] = Histogram(edges, counts, len(rho), dropped)
        raw[name] = rho
    out["raw"] = raw
    return out


def mean_abs_rho(rho: np.ndarray) -> float:
    return float(np.mean(np.abs(rho))) if len(rho) else float("nan")


@dataclass
class QueryHistogram:
    counts: np.ndarray  # (bins_x, bins_y) total |w| mass
    x_edges: np.ndarray
    y_edges: np.ndarray
    total_weight: float

    def rows(self):
        for i in range(len(self.x_edges) - 1):
            for j in range(len(self.y_edges) - 1):
                yield dict(
                    x_left=float(self.x_edges[i]),
                    x_right=float(self.x_edges[i + 1]),
                    y_left=float(self.y_edges[j]),
                    y_right=float(self.y_edges[j + 1]),
                    mass=float(self.counts[i, j]),
                )


def query_histogram(model: AsaercModel, dataset: Dataset, store=None, split: str = "test", bins: int = QUERY_BINS, source=None, chunk: int = 2048):
    """Query locations accumulated over a split, each weighted by |attention weight|."""
    if not isinstance(model, AsaercModel):
        raise ValueError("query histograms need an adaptive-sensing model")
    source = source or FeatureSource(model, dataset, store)
    idx = source.usable(split)
    g = model.grid
    xe = np.linspace(0.0, g.Lx, bins + 1)
    ye = np.linspace(0.0, g.Ly, bins + 1)
    H = np.zeros((bins, bins))
    total = 0.0
    for s in range(0, len(idx), chunk):
        r_fix = source.r_fix[idx[s : s + chunk]]
        q = model.queries(r_fix) if model.pinned_queries is None else np.broadcast_to(model.pinned_queries, (len(r_fix), model.n_out, 2))
        w, _ = model_weights(model, r_fix)
        aw = np.abs(w).ravel()
        h, _, _ = np.histogram2d(q[..., 0].ravel(), q[..., 1].ravel(), bins=[xe, ye], weights=aw)
        H += h
        total += aw.sum()
    return QueryHistogram(H, xe, ye, float(total))


def model_weights(model, r_fix):
    h, _ = nn_forward([model.backbone], r_fix)
    return nn_forward([model.weight_head], h)


# --- sweeps ---------------------------------------------------------------------------------


@dataclass
class SweepCell:
    model: str
    n_fix: int
    n: int
    seed: int


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def long_rows(self):
        """One row per (cell, metric): overall test MSE plus per-system MSE."""
        for r in self.rows:
            base = {k: r[k] for k in ("model", "n_fix", "n", "seed", "params", "status")}
            yield dict(base, metric="test_mse", value=r["test_mse"])
            for name, v in r.get("per_system", {}).items():
                yield dict(base, metric=f"mse:{name}", value=v)

    def aggregate(self):
        """Mean and sample spread of test MSE over seeds, per (model, n_fix, n)."""
        groups = {}
        for r in self.rows:
            if r["status"] == "ok":
                groups.setdefault((r["model"], r["n_fix"], r["n"]), []).append(r["test_mse"])
        out = []
        for (m, nf, n), v in sorted(groups.items()):
            a = np.array(v)
            out.append(dict(model=m, n_fix=nf, n=n, mean=float(a.mean()), std=float(a.std()), seeds=len(a)))
        return out


def sweep_cells(models, n_fix_values, n_values, seeds) -> list[SweepCell]:
    cells = []
    for m in models:
        for nf in n_fix_values:
            # the linear readout has no separate N; one cell per N_fix
            for n in ([nf] if m == "linear" else n_values):
                for s in seeds:
                    cells.append(SweepCell(m, nf, n, s))
    return cells


def _run_cell(cell: SweepCell, dataset, store, train_config: TrainConfig, hidden: int, model_kw: dict) -> dict:
    row = dict(model=cell.model, n_fix=cell.n_fix, n=cell.n, seed=cell.seed)
    row["params"] = -1
    t0 = time.perf_counter()
    try:
        row["params"] = parameter_count(cell.model, cell.n_fix, cell.n, hidden, model_kw.get("k", 0))
        model = build_model(cell.model, store.config.grid, cell.n_fix, cell.n, hidden, cell.seed, **model_kw)
        if model.n_params() != row["params"]:
            raise AssertionError("parameter count disagrees with the formula table")
        src = FeatureSource(model, dataset, store)
        cfg = TrainConfig(**{**train_config.__dict__, "seed": cell.seed, "eval_every": 0})
        train(model, dataset, store, cfg, source=src)
        ev = evaluate(model, dataset, source=src)
        row.update(status="ok", test_mse=ev.mse, per_system=ev.per_system, error="")
    except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the sweep goes on
        log.warning("sweep cell %s failed: %s", cell, exc)
        row.update(status="failed", test_mse=math.nan, per_system={}, error=f"{type(exc).__name__}: {exc}")
    row["seconds"] = time.perf_counter() - t0
    return row


def run_sweep(cells, dataset: Dataset, store, train_config: TrainConfig, hidden: int = 128, workers: int = 1, model_kw=None) -> SweepResult:
    """Train and evaluate every cell against one shared snapshot store."""
    model_kw = model_kw or {}
    job = lambda c: _run_cell(c, dataset, store, train_config, hidden, model_kw)  # noqa: E731
    if workers <= 1:
        rows = [job(c) for c in cells]
    else:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(job, cells))
    return SweepResult(rows)


# --- output ---------------------------------------------------------------------------------


def write_csv(path, rows, columns=None):
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def conventions() -> dict:
    return dict(covariance=COVARIANCE, pooling=POOLING, rho_bins=RHO_BINS, query_bins=QUERY_BINS,
                linear_weight_correlation="set to 0", undefined_rho="dropped and counted")
