"""Mini-batch training and evaluation over precomputed reservoir snapshots."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynsys import Dataset
from .models import AercModel, AsaercModel, Batch, DelayMlp, LinearReadout, delay_windows
from .neural import AdamState, adam_step
from .reservoir import SnapshotStore, fixed_measurements

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 1024
    max_epochs: int = 500
    lr: float = 0.002
    decay: float = 0.99
    seed: int = 0
    shuffle: bool = True
    eval_every: int = 1
    weight_decay: float = 0.0
    keep_best: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def rows(self):
        return zip(self.epoch, self.train_mse, self.test_mse, self.lr, self.seconds)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_mse", "test_mse", "lr", "seconds"])
            for row in self.rows():
                w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), f"{row[4]:.3f}"])


class FeatureSource:
    """Builds :class:`Batch` objects for a model from dataset + snapshots.

    Fixed measurements are computed once for every sample; snapshot frames are
    only gathered per batch for adaptive models. ``trace`` (a list) collects
    every index handed out through :meth:`batch` when set.
    """

    def __init__(self, model, dataset: Dataset, store: SnapshotStore | None = None, chunk: int = 4096):
        self.model = model
        self.dataset = dataset
        self.store = store
        self.trace = None
        if isinstance(model, DelayMlp):
            return
        if store is None:
            raise ValueError(f"{model.kind} needs a snapshot store")
        if len(store) != len(dataset.inputs):
            raise ValueError(f"snapshot count {len(store)} != dataset length {len(dataset.inputs)}")
        grid = store.config.grid
        if (grid.nx, grid.ny, grid.Lx, grid.Ly) != (model.grid.nx, model.grid.ny, model.grid.Lx, model.grid.Ly):
            raise ValueError("model grid does not match the snapshot store")
        self.r_fix = self._measure(store.fixed_frames, model.points, chunk)
        self.r_out = None
        if isinstance(model, AercModel):
            if model.readout_points is model.points and store.fixed_frames is store.frames:
                self.r_out = self.r_fix
            else:
                self.r_out = self._measure(store.frames, model.readout_points, chunk)

    def _measure(self, frames, points, chunk):
        grid = self.model.grid
        out = np.empty((len(frames), len(points)))
        for s in range(0, len(frames), chunk):
            out[s : s + chunk] = fixed_measurements(np.asarray(frames[s : s + chunk], dtype=float), points, grid)
        return out

    def usable(self, split: str) -> np.ndarray:
        idx = self.dataset.split(split)
        if isinstance(self.model, DelayMlp) and self.model.k > 0:
            starts = np.array([s for _, s, _ in self.dataset.boundaries])
            first = starts[self.dataset.system_of[idx]]
            idx = idx[idx - first >= self.model.k]
        return idx

    def batch(self, idx: np.ndarray) -> Batch:
        if self.trace is not None:
            self.trace.append(np.array(idx))
        y = self.dataset.targets[idx]
        if isinstance(self.model, DelayMlp):
            return Batch(windows=delay_windows(self.dataset.inputs, idx, self.model.k), y=y)
        b = Batch(r_fix=self.r_fix[idx], y=y)
        if isinstance(self.model, AercModel):
            b.r_out = self.r_out[idx]
        elif isinstance(self.model, AsaercModel):
            # sorted gather is friendlier to memory-mapped stores
            order = np.argsort(idx, kind="stable")
            frames = np.empty((len(idx), *self.store.frames.shape[1:]))
            frames[order] = self.store.frames[idx[order]]
            b.fields = frames
        return b


def predict(model, source: FeatureSource, idx: np.ndarray, chunk: int = 2048) -> np.ndarray:
    out = np.empty(len(idx))
    for s in range(0, len(idx), chunk):
        out[s : s + chunk] = model.forward(source.batch(idx[s : s + chunk]))[0]
    return out


@dataclass
class Evaluation:
    mse: float
    per_system: dict
    counts: dict


def evaluate(model, dataset: Dataset, store=None, split: str = "test", source: FeatureSource | None = None) -> Evaluation:
    """Overall and per-system MSE on a split."""
    source = source or FeatureSource(model, dataset, store)
    idx = source.usable(split)
    if len(idx) == 0:
        raise ValueError(f"split {split!r} is empty")
    return _score(dataset, idx, predict(model, source, idx))


def _score(dataset, idx, pred) -> Evaluation:
    err2 = (pred - dataset.targets[idx]) ** 2
    sys_of = dataset.system_of[idx]
    per, counts = {}, {}
    for k, (name, _, _) in enumerate(dataset.boundaries):
        m = sys_of == k
        if m.any():
            per[name] = float(err2[m].mean())
            counts[name] = int(m.sum())
    return Evaluation(float(err2.mean()), per, counts)


def train(model, dataset: Dataset, store=None, config: TrainConfig | None = None, source: FeatureSource | None = None):
    """Adam on mean squared one-step error over the train split.

    Returns ``(model, history)``; the model is trained in place and is the
    final-epoch model unless ``config.keep_best`` is set.
    """
    config = config or TrainConfig()
    source = source or FeatureSource(model, dataset, store)
    rng = np.random.default_rng(config.seed)
    train_idx = source.usable("train")
    test_idx = source.usable("test")
    params = model.params()
    opt = AdamState(lr=config.lr, decay=config.decay, weight_decay=config.weight_decay)
    hist = TrainHistory()
    best = (np.inf, None)
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        order = rng.permutation(train_idx) if config.shuffle else train_idx
        total, count = 0.0, 0
        for b, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s : s + config.batch_size]
            batch = source.batch(idx)
            pred, cache = model.forward(batch)
            err = pred - batch.y
            loss = float(np.mean(err * err))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = model.backward(cache, 2.0 * err / len(idx))
            adam_step(opt, params, grads)
            total += loss * len(idx)
            count += len(idx)
        lr_used = opt.effective_lr
        opt.end_epoch()
        test = np.nan
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or epoch + 1 == config.max_epochs):
            if len(test_idx):
                test = _score(dataset, test_idx, predict(model, source, test_idx)).mse
        hist.epoch.append(epoch)
        hist.train_mse.append(total / count)
        hist.test_mse.append(test)
        hist.lr.append(lr_used)
        hist.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d train %.4g test %.4g", epoch, total / count, test)
        if config.keep_best and test < best[0]:
            best = (test, [p.copy() for p in params])
    if config.keep_best and best[1] is not None:
        for p, q in zip(params, best[1]):
            p[...] = q
    return model, hist


def history_dict(hist: TrainHistory) -> dict:
    d = asdict(hist)
    d.pop("seconds")
    return d
