"""Command-line entry point: data -> reservoir -> train -> evaluate -> analyze.

Artifacts live under ``--out-dir`` in content-addressed folders::

    data/<data-hash>/manifest.json + <system>.bin
    reservoir/<store-hash>/store.bin + store.json
    models/<kind>-<model-hash>/model.bin, history.csv, train.json, eval.json
    analysis/<model-hash>/rho_*.csv, queries.csv, summary.json
    sweeps/<sweep-hash>/sweep.csv, sweep_summary.csv, summary.json
    run_manifest.json

A stage whose folder already holds an artifact stamped with the same hash is
skipped unless ``--force`` is given. Heavy imports are deferred until after
argument parsing so that ``--threads`` can pin BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

log = logging.getLogger("asaerc")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_RESERVOIR = 5
EXIT_TRAIN = 6
EXIT_EVALUATE = 7
EXIT_ANALYZE = 8
EXIT_MISMATCH = 9

STAGE_CODES = {
    "config": EXIT_CONFIG,
    "gen-data": EXIT_DATA,
    "run-reservoir": EXIT_RESERVOIR,
    "train": EXIT_TRAIN,
    "evaluate": EXIT_EVALUATE,
    "analyze": EXIT_ANALYZE,
    "mismatch": EXIT_MISMATCH,
}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.code = STAGE_CODES.get(stage, EXIT_UNEXPECTED)


class ArtifactMismatch(StageError):
    def __init__(self, cause):
        super().__init__("mismatch", cause)


def _set_threads(n: int | None):
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    tmp.replace(path)


def _jsonable(o):
    import numpy as np

    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError):
        return None


# --- stage keys -------------------------------------------------------------------------------


def _digest(*parts) -> str:
    import hashlib

    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def data_key(cfg) -> str:
    return _digest("data", cfg.to_dict()["data"])


def store_key(cfg) -> str:
    return _digest("reservoir", data_key(cfg), cfg.to_dict()["reservoir"])


def model_key(cfg) -> str:
    d = cfg.to_dict()
    return _digest("model", store_key(cfg), d["model"], d["train"], cfg.seed)


# --- context ----------------------------------------------------------------------------------


class Run:
    """Per-invocation state: config, output root, cache policy and the run manifest."""

    def __init__(self, cfg, out_dir, force=False):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.force = force
        self.stages = []

    def record(self, stage, key, cached, seconds, artifacts):
        self.stages.append(dict(stage=stage, hash=key, cache_hit=cached, seconds=round(seconds, 3), artifacts=[self._rel(a) for a in artifacts]))
        log.info("%s %s (%s, %.1fs)", stage, key, "cached" if cached else "ran", seconds)

    def _rel(self, path):
        # relative paths keep manifests comparable across output directories
        try:
            return str(Path(path).resolve().relative_to(self.out.resolve()))
        except ValueError:
            return str(path)

    def write_manifest(self):
        import numpy
        import scipy

        from . import __version__

        _write_json(
            self.out / "run_manifest.json",
            dict(
                config=self.cfg.to_dict(),
                seed=self.cfg.seed,
                hashes=dict(data=data_key(self.cfg), store=store_key(self.cfg), model=model_key(self.cfg)),
                stages=self.stages,
                versions=dict(asaerc=__version__, python=platform.python_version(), numpy=numpy.__version__, scipy=scipy.__version__),
                threads=os.environ.get("OMP_NUM_THREADS"),
                written=time.strftime("%Y-%m-%dT%H:%M:%S"),
            ),
        )


# --- stages -----------------------------------------------------------------------------------


def stage_data(run: Run) -> Path:
    from .dynsys import default_specs, generate, write_manifest

    key = data_key(run.cfg)
    folder = run.out / "data" / key
    path = folder / "manifest.json"
    t0 = time.perf_counter()
    m = _read_json(path)
    if not run.force and m and m.get("config_hash") == key:
        run.record("gen-data", key, True, time.perf_counter() - t0, [path])
        return path
    try:
        specs = default_specs(run.cfg.data.n_samples)
        series = {name: generate(specs[name]) for name in run.cfg.data.systems}
        path = write_manifest(folder, series, specs, run.cfg.seed, extra=dict(config_hash=key, test_fraction=run.cfg.data.test_fraction))
    except Exception as exc:
        raise StageError("gen-data", exc) from exc
    run.record("gen-data", key, False, time.perf_counter() - t0, [path])
    return path


def load_dataset(manifest_path, cfg=None):
    from .dynsys import build_dataset, load_manifest

    names, series, manifest = load_manifest(manifest_path)
    if cfg is not None and manifest.get("config_hash") not in (None, data_key(cfg)):
        raise ArtifactMismatch(f"{manifest_path} was produced by a different data config")
    frac = manifest.get("test_fraction", 0.2) if cfg is None else cfg.data.test_fraction
    return build_dataset([s.values for s in series], frac, names), manifest


def stage_reservoir(run: Run, manifest_path: Path | None = None) -> Path:
    import numpy as np

    from .reservoir import persist, run as run_reservoir

    manifest_path = manifest_path or stage_data(run)
    key = store_key(run.cfg)
    folder = run.out / "reservoir" / key
    path = folder / "store.bin"
    t0 = time.perf_counter()
    side = _read_json(folder / "store.json")
    if not run.force and path.exists() and side and side.get("config_hash") == key:
        run.record("run-reservoir", key, True, time.perf_counter() - t0, [path])
        return path
    try:
        ds, manifest = load_dataset(manifest_path, run.cfg)
        rcfg = run.cfg.reservoir.build()
        store = run_reservoir(ds.inputs, rcfg, dtype=np.float32)
        folder.mkdir(parents=True, exist_ok=True)
        persist(store, path)
        _write_json(
            folder / "store.json",
            dict(config_hash=key, data_hash=manifest.get("config_hash"), reservoir=rcfg.to_dict(), n_frames=len(store), dt=rcfg.dt),
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError("run-reservoir", exc) from exc
    run.record("run-reservoir", key, False, time.perf_counter() - t0, [path])
    return path


def load_store(path, cfg=None, manifest=None):
    from .reservoir import load

    side = _read_json(Path(path).parent / "store.json") or {}
    if cfg is not None and side.get("config_hash") not in (None, store_key(cfg)):
        raise ArtifactMismatch(f"{path} was produced by a different reservoir/data config")
    if manifest is not None and side.get("data_hash") not in (None, manifest.get("config_hash")):
        raise ArtifactMismatch(f"{path} was built from different data than {manifest.get('config_hash')}")
    try:
        return load(path, expect_config=None if cfg is None else cfg.reservoir.build(), mmap=True)
    except ValueError as exc:
        raise ArtifactMismatch(exc) from exc


def train_model(cfg, ds, store, out_path: Path, kind: str | None = None, key: str | None = None):
    """Build, train and save one model; returns ``(model, history, source)``."""
    from .models import build_model, save_model
    from .train import FeatureSource, train

    kind = kind or cfg.model.kind
    m = cfg.model
    model = build_model(kind, store.config.grid if store is not None else _grid(cfg), m.n_fix, m.n, m.hidden, cfg.seed, **m.kwargs())
    source = FeatureSource(model, ds, store)
    model, hist = train(model, ds, store, cfg.train.build(cfg.seed), source=source)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(out_path, model, seed=cfg.seed, epoch=len(hist.epoch), extra=dict(config_hash=key or model_key(cfg)))
    hist.to_csv(history_path(out_path))
    return model, hist, source


def history_path(checkpoint: Path) -> Path:
    """``history.csv`` next to a pipeline ``model.bin``, else ``<stem>.history.csv``."""
    checkpoint = Path(checkpoint)
    if checkpoint.name == "model.bin":
        return checkpoint.parent / "history.csv"
    return checkpoint.with_name(checkpoint.stem + ".history.csv")


def _grid(cfg):
    return cfg.reservoir.build().grid


def stage_train(run: Run, store_path: Path | None = None, manifest_path: Path | None = None):
    manifest_path = manifest_path or stage_data(run)
    store_path = store_path or stage_reservoir(run, manifest_path)
    key = model_key(run.cfg)
    folder = run.out / "models" / f"{run.cfg.model.kind}-{key}"
    path = folder / "model.bin"
    t0 = time.perf_counter()
    info = _read_json(folder / "train.json")
    if not run.force and path.exists() and info and info.get("config_hash") == key:
        run.record("train", key, True, time.perf_counter() - t0, [path])
        return path
    try:
        ds, manifest = load_dataset(manifest_path, run.cfg)
        store = load_store(store_path, run.cfg, manifest) if run.cfg.model.kind != "delay-mlp" else None
        model, hist, _ = train_model(run.cfg, ds, store, path, key=key)
        _write_json(
            folder / "train.json",
            dict(config_hash=key, kind=model.kind, params=model.n_params(), epochs=len(hist.epoch), final_train_mse=hist.train_mse[-1], final_test_mse=hist.test_mse[-1], seed=run.cfg.seed),
        )
    except StageError:
        raise
    except Exception as exc:
        raise StageError("train", exc) from exc
    run.record("train", key, False, time.perf_counter() - t0, [path, folder / "history.csv"])
    return path


def evaluation_summary(model, ds, store, split="test", source=None) -> dict:
    from .train import evaluate

    ev = evaluate(model, ds, store, split, source=source)
    return dict(kind=model.kind, split=split, mse=ev.mse, per_system=ev.per_system, counts=ev.counts, params=model.n_params())


def stage_evaluate(run: Run, model_path: Path, store_path: Path, manifest_path: Path) -> Path:
    from .models import load_model

    key = model_key(run.cfg)
    out = model_path.parent / "eval.json"
    t0 = time.perf_counter()
    prev = _read_json(out)
    if not run.force and prev and prev.get("config_hash") == key:
        run.record("evaluate", key, True, time.perf_counter() - t0, [out])
        return out
    try:
        ds, manifest = load_dataset(manifest_path, run.cfg)
        model, _, _ = load_model(model_path)
        _check_model(model, key)
        store = load_store(store_path, run.cfg, manifest) if model.kind != "delay-mlp" else None
        summary = evaluation_summary(model, ds, store)
        summary["config_hash"] = key
        _write_json(out, summary)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("evaluate", exc) from exc
    run.record("evaluate", key, False, time.perf_counter() - t0, [out])
    return out


def _check_model(model, key):
    got = getattr(model, "meta", {}).get("config_hash")
    if key is not None and got not in (None, key):
        raise ArtifactMismatch(f"checkpoint was produced by config {got}, expected {key}")


def analyze_correlations(model, ds, store, out_dir: Path, bins: int) -> dict:
    from .analysis import contribution_trace, conventions, correlation_distributions, mean_abs_rho, write_csv

    trace = contribution_trace(model, ds, store)
    hists = correlation_distributions(trace, model.kind, bins)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = dict(kind=model.kind, conventions=conventions(), quantities={})
    for name in ("values", "weights", "products"):
        h = hists[name]
        write_csv(out_dir / f"rho_{name}.csv", h.rows(), ["bin_left", "bin_right", "count"])
        summary["quantities"][name] = dict(n_pairs=h.n_pairs, n_undefined=h.n_undefined, mean_abs_rho=mean_abs_rho(hists["raw"][name]))
    return summary


def analyze_queries(model, ds, store, out_dir: Path, bins: int) -> dict:
    from .analysis import query_histogram, write_csv

    h = query_histogram(model, ds, store, bins=bins)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "queries.csv", h.rows(), ["x_left", "x_right", "y_left", "y_right", "mass"])
    return dict(total_weight=h.total_weight, bins=bins, weighting="|attention weight|")


def stage_analyze(run: Run, model_path: Path, store_path: Path, manifest_path: Path) -> Path:
    from .models import load_model

    key = model_key(run.cfg)
    folder = run.out / "analysis" / key
    out = folder / "summary.json"
    t0 = time.perf_counter()
    prev = _read_json(out)
    if not run.force and prev and prev.get("config_hash") == key:
        run.record("analyze", key, True, time.perf_counter() - t0, [out])
        return out
    try:
        model, _, _ = load_model(model_path)
        _check_model(model, key)
        summary = dict(config_hash=key)
        if model.kind != "delay-mlp":
            ds, manifest = load_dataset(manifest_path, run.cfg)
            store = load_store(store_path, run.cfg, manifest)
            summary["correlations"] = analyze_correlations(model, ds, store, folder, run.cfg.analysis.rho_bins)
            if model.kind == "asaerc":
                summary["queries"] = analyze_queries(model, ds, store, folder, run.cfg.analysis.query_bins)
        _write_json(out, summary)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("analyze", exc) from exc
    run.record("analyze", key, False, time.perf_counter() - t0, [out])
    return out


def stage_sweep(run: Run) -> Path:
    from .analysis import run_sweep, sweep_cells, write_csv

    manifest_path = stage_data(run)
    store_path = stage_reservoir(run, manifest_path)
    a = run.cfg.analysis
    d = run.cfg.to_dict()
    key = _digest("sweep", store_key(run.cfg), d["model"], d["train"], d["analysis"])
    folder = run.out / "sweeps" / key
    out = folder / "summary.json"
    t0 = time.perf_counter()
    prev = _read_json(out)
    if not run.force and prev and prev.get("config_hash") == key:
        run.record("sweep", key, True, time.perf_counter() - t0, [out])
        return out
    try:
        ds, manifest = load_dataset(manifest_path, run.cfg)
        store = load_store(store_path, run.cfg, manifest)
        cells = sweep_cells(a.sweep_models, a.sweep_n_fix, a.sweep_n, a.sweep_seeds)
        m = run.cfg.model
        res = run_sweep(cells, ds, store, run.cfg.train.build(run.cfg.seed), m.hidden, a.workers, m.kwargs())
        folder.mkdir(parents=True, exist_ok=True)
        write_csv(folder / "sweep.csv", res.long_rows(), ["model", "n_fix", "n", "seed", "params", "status", "metric", "value"])
        write_csv(folder / "sweep_summary.csv", res.aggregate(), ["model", "n_fix", "n", "mean", "std", "seeds"])
        failed = [r for r in res.rows if r["status"] != "ok"]
        _write_json(out, dict(config_hash=key, cells=len(res.rows), failed=len(failed), errors=[r["error"] for r in failed], spread="population std over seeds"))
    except StageError:
        raise
    except Exception as exc:
        raise StageError("analyze", exc) from exc
    run.record("sweep", key, False, time.perf_counter() - t0, [out])
    return out


def run_pipeline(cfg, out_dir, force=False) -> Run:
    run = Run(cfg, out_dir, force)
    manifest = stage_data(run)
    store = stage_reservoir(run, manifest)
    model = stage_train(run, store, manifest)
    stage_evaluate(run, model, store, manifest)
    stage_analyze(run, model, store, manifest)
    run.write_manifest()
    return run


# --- argument parsing -------------------------------------------------------------------------


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment JSON file")
    p.add_argument("--out-dir", help="artifact root (overrides config out_dir)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP threads (1 for bit-reproducible runs)")
    p.add_argument("--force", action="store_true", help="ignore cached artifacts")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="asaerc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="generate and standardize the benchmark series"))

    p = sub.add_parser("run-reservoir", help="drive the diffusion reservoir and persist snapshots")
    _common(p)
    p.add_argument("--data", help="series manifest (default: generate/cached from config)")

    p = sub.add_parser("train", help="train one readout model")
    _common(p)
    p.add_argument("--model", choices=["linear", "aerc", "asaerc", "delay-mlp"])
    p.add_argument("--data", required=True, help="series manifest.json")
    p.add_argument("--store", help="snapshot store (not needed for delay-mlp)")
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("evaluate", help="test-split MSE of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", help="write the JSON summary here as well as to stdout")

    p = sub.add_parser("analyze", help="correlation / query-histogram analyses and sweeps")
    p.add_argument("what", choices=["correlations", "queries", "sweep"])
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--store")

    _common(sub.add_parser("sweep", help="MSE vs measurement-count sweep"))
    _common(sub.add_parser("pipeline", help="all stages with content-hash caching"))
    return ap


def _load_cfg(args):
    from .config import ConfigValidationError, load_config

    try:
        cfg = load_config(args.config)
    except (ConfigValidationError, OSError) as exc:
        raise StageError("config", exc) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "model", None):
        cfg.model.kind = args.model
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out_dir or cfg.out_dir)


def _dispatch(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg)
    cmd = args.command
    if cmd == "gen-data":
        run = Run(cfg, out, args.force)
        print(stage_data(run))
        run.write_manifest()
    elif cmd == "run-reservoir":
        run = Run(cfg, out, args.force)
        print(stage_reservoir(run, Path(args.data) if args.data else None))
        run.write_manifest()
    elif cmd == "train":
        try:
            ds, manifest = load_dataset(args.data, cfg)
            store = None
            if cfg.model.kind != "delay-mlp":
                if not args.store:
                    raise StageError("train", "--store is required for reservoir models")
                store = load_store(args.store, cfg, manifest)
        except (OSError, KeyError, ValueError) as exc:
            raise StageError("train", exc) from exc
        try:
            model, hist, _ = train_model(cfg, ds, store, Path(args.out))
        except Exception as exc:
            raise StageError("train", exc) from exc
        print(json.dumps(dict(checkpoint=args.out, kind=model.kind, params=model.n_params(), final_test_mse=hist.test_mse[-1])))
    elif cmd == "evaluate":
        from .models import load_model

        try:
            model, _, _ = load_model(args.checkpoint)
            ds, manifest = load_dataset(args.data, cfg)
            store = load_store(args.store, cfg, manifest) if model.kind != "delay-mlp" else None
            summary = evaluation_summary(model, ds, store, args.split)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("evaluate", exc) from exc
        text = json.dumps(summary, indent=2, sort_keys=True)
        if args.out:
            Path(args.out).write_text(text + "\n")
        print(text)
    elif cmd in ("analyze", "sweep"):
        what = "sweep" if cmd == "sweep" else args.what
        run = Run(cfg, out, args.force)
        if what == "sweep":
            print(stage_sweep(run))
        else:
            _analyze_one(args, cfg, out, what)
        run.write_manifest()
    elif cmd == "pipeline":
        run = run_pipeline(cfg, out, args.force)
        print(out / "run_manifest.json")
    return EXIT_OK


def _analyze_one(args, cfg, out, what):
    from .models import load_model

    if not (args.checkpoint and args.data):
        raise StageError("analyze", "--checkpoint and --data are required")
    try:
        model, _, _ = load_model(args.checkpoint)
        ds, manifest = load_dataset(args.data, cfg)
        store = load_store(args.store, cfg, manifest) if args.store else None
        folder = out / "analysis" / Path(args.checkpoint).stem
        if what == "correlations":
            summary = analyze_correlations(model, ds, store, folder, cfg.analysis.rho_bins)
        else:
            summary = analyze_queries(model, ds, store, folder, cfg.analysis.query_bins)
        _write_json(folder / f"{what}.json", summary)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("analyze", exc) from exc
    print(folder / f"{what}.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)
    try:
        return _dispatch(args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        print(f"unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
