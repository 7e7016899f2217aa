"""Experiment configuration: one JSON file fully determines a run.

Every section is a dataclass; :func:`load_config` rejects unknown keys and
wrong types before anything is computed. :func:`json_schema` publishes the
same structure as a JSON Schema document.
"""

from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .dynsys import SYSTEM_ORDER
from .models import MODEL_KINDS
from .reservoir import Grid, Injection, ReservoirConfig, default_injections
from .train import TrainConfig


class ConfigValidationError(ValueError):
    pass


@dataclass
class DataSection:
    systems: list = field(default_factory=lambda: list(SYSTEM_ORDER))
    n_samples: int = 7500
    test_fraction: float = 0.2


@dataclass
class ReservoirSection:
    nx: int = 64
    ny: int = 64
    Lx: float = 1.0
    Ly: float = 1.0
    nu: float = 0.05
    dt_fraction: float = 0.8
    substeps_per_sample: int = 100
    T_offset: int = 0
    injection_width: float = 0.05
    injections: list | None = None  # [{"center": [x, y], "width": s, "gain": g}, ...]
    input_gain: float = 40.0
    input_bias: float = 0.0

    def build(self) -> ReservoirConfig:
        grid = Grid(self.nx, self.ny, self.Lx, self.Ly)
        if self.injections is None:
            inj = default_injections(min(self.Lx, self.Ly), self.injection_width)
        else:
            inj = tuple(
                Injection(tuple(i["center"]), i.get("width", self.injection_width), i.get("gain", 1.0)) for i in self.injections
            )
        return ReservoirConfig(
            grid=grid,
            nu=self.nu,
            dt_fraction=self.dt_fraction,
            substeps_per_sample=self.substeps_per_sample,
            injections=inj,
            T_offset=self.T_offset,
            input_gain=self.input_gain,
            input_bias=self.input_bias,
        )


@dataclass
class ModelSection:
    kind: str = "asaerc"
    n_fix: int = 64
    n: int = 64
    hidden: int = 128
    margin: float | None = None
    kernel: str = "bilinear"
    kernel_width: float = 0.02
    k: int = 0
    lattice_start: bool = True

    def kwargs(self) -> dict:
        return dict(margin=self.margin, kernel=self.kernel, kernel_width=self.kernel_width, k=self.k, lattice_start=self.lattice_start)


@dataclass
class TrainSection:
    batch_size: int = 1024
    max_epochs: int = 100
    lr: float = 0.002
    decay: float = 0.99
    shuffle: bool = True
    eval_every: int = 1
    weight_decay: float = 0.0
    keep_best: bool = False

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class AnalysisSection:
    rho_bins: int = 50
    query_bins: int = 64
    sweep_models: list = field(default_factory=lambda: ["linear", "aerc", "asaerc"])
    sweep_n_fix: list = field(default_factory=lambda: [16, 64, 256])
    sweep_n: list = field(default_factory=lambda: [16, 64, 256])
    sweep_seeds: list = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    reservoir: ReservoirSection = field(default_factory=ReservoirSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    def __post_init__(self):
        _check_semantics(self)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_semantics(cfg: ExperimentConfig):
    unknown = [s for s in cfg.data.systems if s not in SYSTEM_ORDER]
    if unknown:
        raise ConfigValidationError(f"data.systems: unknown system(s) {unknown}")
    if not cfg.data.systems:
        raise ConfigValidationError("data.systems: empty")
    if cfg.data.n_samples < 10:
        raise ConfigValidationError("data.n_samples must be >= 10")
    if not 0 <= cfg.data.test_fraction < 1:
        raise ConfigValidationError("data.test_fraction must lie in [0, 1)")
    if cfg.model.kind not in MODEL_KINDS:
        raise ConfigValidationError(f"model.kind must be one of {MODEL_KINDS}")
    if cfg.model.kernel not in ("bilinear", "gaussian"):
        raise ConfigValidationError("model.kernel must be 'bilinear' or 'gaussian'")
    try:
        cfg.reservoir.build()
        cfg.train.build(cfg.seed)
    except ValueError as exc:
        raise ConfigValidationError(str(exc)) from exc


# --- strict loading -----------------------------------------------------------------------


def _strip_optional(tp):
    args = typing.get_args(tp)
    if type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0] if len(rest) == 1 else rest, True
    return tp, False


def _coerce(value, tp, where: str):
    tp, optional = _strip_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigValidationError(f"{where}: null not allowed")
    if is_dataclass(tp):
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{where}: expected a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(f"{where}: expected a string")
        return value
    if tp is list or typing.get_origin(tp) is list:
        if not isinstance(value, list):
            raise ConfigValidationError(f"{where}: expected a list")
        return value
    return value


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    extra = sorted(set(data) - names)
    if extra:
        raise ConfigValidationError(f"{where}: unknown key(s) {extra}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean", list: "array"}


def json_schema(cls=ExperimentConfig) -> dict:
    """JSON Schema (draft 2020-12 subset) mirroring the dataclass layout."""
    hints = typing.get_type_hints(cls)
    props = {}
    for f in fields(cls):
        tp, optional = _strip_optional(hints[f.name])
        if is_dataclass(tp):
            props[f.name] = json_schema(tp)
            continue
        base = _JSON_TYPES.get(tp if typing.get_origin(tp) is None else typing.get_origin(tp), "object")
        props[f.name] = {"type": [base, "null"] if optional else base}
    out = {"type": "object", "properties": props, "additionalProperties": False}
    if cls is ExperimentConfig:
        out["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    return out
