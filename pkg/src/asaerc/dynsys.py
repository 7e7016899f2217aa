"""Benchmark chaotic systems and the one-step-ahead dataset built from them.

Eight systems are supported: five flows (integrated with fixed-step RK4),
two maps and the Mackey-Glass delay equation (Euler with a delay buffer).
Every generator discards a 10% lead-in so the recorded part starts on the
attractor, then samples ``n_samples`` points at ``total_time / n_samples``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FLOWS = ("Lorenz", "Rossler", "VanDerPol", "Duffing", "DoublePendulum")
MAPS = ("Logistic", "Henon")
DDES = ("MackeyGlass",)
# canonical concatenation order
SYSTEM_ORDER = FLOWS + MAPS + DDES

BLOWUP = 1e6
TRANSIENT_FRACTION = 0.1


class TrajectoryBlowUp(RuntimeError):
    """Raised when a generator leaves the bounded region."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: dict
    initial_state: tuple
    total_time: float
    n_samples: int = 7500
    observable_index: int = 0
    integrator_dt: float | None = None
    transient_fraction: float = TRANSIENT_FRACTION

    def __post_init__(self):
        if self.kind not in SYSTEM_ORDER:
            raise ConfigError(f"unknown system kind {self.kind!r}")
        if self.n_samples <= 1:
            raise ConfigError("n_samples must be > 1")
        if self.total_time <= 0:
            raise ConfigError("total_time must be positive")
        if self.kind not in FLOWS and self.total_time != self.n_samples:
            raise ConfigError(f"{self.kind}: total_time must equal n_samples (unit step)")
        if not 0 <= self.observable_index < len(self.initial_state):
            raise ConfigError(f"observable_index {self.observable_index} out of range")

    @property
    def sample_dt(self) -> float:
        return self.total_time / self.n_samples

    @property
    def is_flow(self) -> bool:
        return self.kind in FLOWS

    @property
    def fine_dt(self) -> float:
        if self.kind == "MackeyGlass":
            return self.params["substep"]
        if not self.is_flow:
            return 1.0
        return self.integrator_dt if self.integrator_dt is not None else self.sample_dt / 20

    def to_dict(self) -> dict:
        d = asdict(self)
        d["initial_state"] = list(self.initial_state)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemSpec":
        d = dict(d)
        d["initial_state"] = tuple(d["initial_state"])
        return cls(**d)


def default_specs(n_samples: int = 7500) -> dict[str, SystemSpec]:
    """Benchmark sampling (span and step per system) with standard chaotic parameters.

    ``n_samples`` smaller than 7500 keeps each system's step size and shortens
    the run proportionally.
    """
    frac = n_samples / 7500
    rows = {
        "Lorenz": (dict(sigma=10.0, rho=28.0, beta=8.0 / 3.0), (1.0, 1.0, 1.0), 375.0),
        "Rossler": (dict(a=0.2, b=0.2, c=5.7), (1.0, 1.0, 1.0), 2000.0),
        "VanDerPol": (dict(mu=5.0), (2.0, 0.0), 1500.0),
        "Duffing": (dict(delta=0.3, alpha=-1.0, beta=1.0, gamma=0.5, omega=1.2), (1.0, 0.0), 825.0),
        "DoublePendulum": (
            dict(m1=1.0, m2=1.0, l1=1.0, l2=1.0, g=9.81),
            (math.pi / 2, 0.0, math.pi / 2, 0.0),
            2000.0,
        ),
        "Logistic": (dict(r=4.0), (0.2,), 7500.0),
        "Henon": (dict(a=1.4, b=0.3), (0.1, 0.1), 7500.0),
        "MackeyGlass": (dict(beta=0.2, gamma=0.1, n=10.0, tau=17.0, substep=0.1), (1.2,), 7500.0),
    }
    return {
        k: SystemSpec(kind=k, params=p, initial_state=x0, total_time=T * frac, n_samples=n_samples)
        for k, (p, x0, T) in rows.items()
    }


# --- vector fields -------------------------------------------------------------


def _lorenz(t, s, p):
    x, y, z = s
    return np.array([p["sigma"] * (y - x), x * (p["rho"] - z) - y, x * y - p["beta"] * z])


def _rossler(t, s, p):
    x, y, z = s
    return np.array([-y - z, x + p["a"] * y, p["b"] + z * (x - p["c"])])


def _vanderpol(t, s, p):
    x, v = s
    return np.array([v, p["mu"] * (1.0 - x * x) * v - x])


def _duffing(t, s, p):
    x, v = s
    return np.array(
        [v, -p["delta"] * v - p["alpha"] * x - p["beta"] * x**3 + p["gamma"] * math.cos(p["omega"] * t)]
    )


def _double_pendulum(t, s, p):
    th1, w1, th2, w2 = s
    m1, m2, l1, l2, g = p["m1"], p["m2"], p["l1"], p["l2"], p["g"]
    d = th2 - th1
    sd, cd = math.sin(d), math.cos(d)
    den1 = (m1 + m2) * l1 - m2 * l1 * cd * cd
    dw1 = (
        m2 * l1 * w1 * w1 * sd * cd
        + m2 * g * math.sin(th2) * cd
        + m2 * l2 * w2 * w2 * sd
        - (m1 + m2) * g * math.sin(th1)
    ) / den1
    den2 = (l2 / l1) * den1
    dw2 = (
        -m2 * l2 * w2 * w2 * sd * cd
        + (m1 + m2) * (g * math.sin(th1) * cd - l1 * w1 * w1 * sd - g * math.sin(th2))
    ) / den2
    return np.array([w1, dw1, w2, dw2])


VECTOR_FIELDS = {
    "Lorenz": _lorenz,
    "Rossler": _rossler,
    "VanDerPol": _vanderpol,
    "Duffing": _duffing,
    "DoublePendulum": _double_pendulum,
}


def rk4_step(f, t, y, h, p):
    k1 = f(t, y, p)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1, p)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2, p)
    k4 = f(t + h, y + h * k3, p)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# --- one-step propagators on the "fine" grid ------------------------------------
# Each returns step(t, state) -> new state; state is a float ndarray.


def _fine_stepper(spec: SystemSpec):
    p = spec.params
    if spec.is_flow:
        f = VECTOR_FIELDS[spec.kind]
        h = spec.fine_dt
        return lambda t, y: rk4_step(f, t, y, h, p)
    if spec.kind == "Logistic":
        r = p["r"]
        return lambda t, y: np.array([r * y[0] * (1.0 - y[0])])
    if spec.kind == "Henon":
        a, b = p["a"], p["b"]
        return lambda t, y: np.array([1.0 - a * y[0] * y[0] + y[1], b * y[0]])
    # Mackey-Glass: state is the delay buffer, oldest first, newest last
    beta, gamma, n, h = p["beta"], p["gamma"], p["n"], p["substep"]

    def mg(t, buf):
        x, xd = buf[-1], buf[0]
        nxt = x + h * (beta * xd / (1.0 + xd**n) - gamma * x)
        out = np.empty_like(buf)
        out[:-1] = buf[1:]
        out[-1] = nxt
        return out

    return mg


def _initial_state(spec: SystemSpec) -> np.ndarray:
    if spec.kind == "MackeyGlass":
        ratio = spec.params["tau"] / spec.params["substep"]
        lag = int(round(ratio))
        if lag < 1 or abs(ratio - lag) > 1e-9:
            raise ConfigError("Mackey-Glass delay must be an integer multiple of the Euler substep")
        return np.full(lag + 1, float(spec.initial_state[0]))
    return np.asarray(spec.initial_state, dtype=float)


def _observe(spec: SystemSpec, state: np.ndarray) -> np.ndarray:
    if spec.kind == "MackeyGlass":
        return state[-1:]
    return state


def _steps_per_sample(spec: SystemSpec) -> int:
    return int(round(spec.sample_dt / spec.fine_dt))


def _run(spec: SystemSpec, lead_in_samples: int, n_samples: int, state=None):
    """Advance the system and record one observed state per sample interval."""
    step = _fine_stepper(spec)
    y = _initial_state(spec) if state is None else state
    m = _steps_per_sample(spec)
    h = spec.fine_dt
    t = -lead_in_samples * spec.sample_dt if spec.is_flow else 0.0
    k = 0
    out = np.empty((n_samples, len(_observe(spec, y))))
    total = lead_in_samples + n_samples
    for s in range(total):
        if s >= lead_in_samples:
            out[s - lead_in_samples] = _observe(spec, y)
        for _ in range(m):
            y = step(t, y)
            k += 1
            t = (-lead_in_samples * m + k) * h if spec.is_flow else t
        if not np.all(np.abs(y) < BLOWUP) or not np.all(np.isfinite(y)):
            kind = "map divergence" if spec.kind in MAPS else "trajectory blow-up"
            raise TrajectoryBlowUp(f"{spec.kind}: {kind} at t={(s + 1 - lead_in_samples) * spec.sample_dt:g}")
    return out, y


def _lead_in(spec: SystemSpec) -> int:
    return int(round(spec.transient_fraction * spec.n_samples))


def integrate_flow(spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Integrate a flow with fixed-step RK4 after a discarded lead-in.

    Returns ``(times, states)`` at the integrator's sample-aligned outputs,
    covering ``[0, total_time)``.
    """
    if not spec.is_flow:
        raise ConfigError(f"{spec.kind} is not a flow")
    if spec.fine_dt > spec.sample_dt / 10 + 1e-15:
        raise ConfigError("integrator_dt must be at most sample_dt/10")
    states, _ = _run(spec, _lead_in(spec), spec.n_samples)
    return np.arange(spec.n_samples) * spec.sample_dt, states


def iterate_map(spec: SystemSpec) -> np.ndarray:
    if spec.kind not in MAPS:
        raise ConfigError(f"{spec.kind} is not a map")
    if spec.kind == "Logistic" and not 0.0 < spec.initial_state[0] < 1.0:
        raise ConfigError("logistic initial state must lie in (0, 1)")
    states, _ = _run(spec, _lead_in(spec), spec.n_samples)
    if spec.kind == "Logistic" and spec.params["r"] <= 4 and (states.min() < 0 or states.max() > 1):
        raise TrajectoryBlowUp("Logistic: map divergence")
    return states


def integrate_mackey_glass(spec: SystemSpec) -> np.ndarray:
    """Euler integration with a constant pre-history; one value per unit time."""
    if spec.kind != "MackeyGlass":
        raise ConfigError(f"{spec.kind} is not Mackey-Glass")
    if spec.params["tau"] <= 0:
        raise ConfigError("delay must be positive")
    states, _ = _run(spec, _lead_in(spec), spec.n_samples)
    return states[:, 0]


def resample(times: np.ndarray, values: np.ndarray, n_samples: int, total_time: float) -> np.ndarray:
    """Linear interpolation onto ``n_samples`` uniform points spaced ``total_time/n_samples``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    dt = total_time / n_samples
    grid = np.arange(n_samples) * dt
    if times[0] > grid[0] + 1e-12 or times[-1] < grid[-1] - 1e-9 * max(1.0, total_time):
        raise ValueError("trajectory does not cover the requested time span")
    return np.interp(grid, times, values)


@dataclass
class Series:
    values: np.ndarray
    mean: float
    std: float
    sample_dt: float
    system: SystemSpec | None = None

    def destandardize(self, z):
        return np.asarray(z) * self.std + self.mean


def standardize(values, sample_dt: float = 1.0, system: SystemSpec | None = None) -> Series:
    """Z-score with the population standard deviation."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError("need a 1-D series of length >= 2")
    mean = float(v.mean())
    std = float(v.std())
    if std == 0.0 or not np.isfinite(std):
        raise ValueError("zero-variance series cannot be standardized")
    return Series(values=(v - mean) / std, mean=mean, std=std, sample_dt=sample_dt, system=system)


def generate(spec: SystemSpec) -> Series:
    """Full generator: integrate/iterate, resample, standardize the observable."""
    if spec.is_flow:
        t, states = integrate_flow(spec)
        raw = resample(t, states[:, spec.observable_index], spec.n_samples, spec.total_time)
    elif spec.kind in MAPS:
        raw = iterate_map(spec)[:, spec.observable_index]
    else:
        raw = integrate_mackey_glass(spec)
    return standardize(raw, spec.sample_dt, spec)


# --- dataset --------------------------------------------------------------------


@dataclass
class Dataset:
    """Concatenated one-step-ahead dataset.

    ``targets[n] = inputs[n+1]`` wherever ``n`` is usable; the final sample of
    every system has no target and is NaN there.
    """

    inputs: np.ndarray
    targets: np.ndarray
    boundaries: list  # (name, start, end) half-open
    train_idx: np.ndarray
    test_idx: np.ndarray
    system_of: np.ndarray = field(repr=False)

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train_idx
        if name == "test":
            return self.test_idx
        raise ValueError(f"unknown split {name!r}")

    @property
    def names(self) -> list[str]:
        return [b[0] for b in self.boundaries]


def build_dataset(series_list, test_fraction: float = 0.2, names=None) -> Dataset:
    """Concatenate series; each system's trailing ``ceil(test_fraction * usable)`` pairs are test."""
    if names is None:
        names = [s.system.kind if getattr(s, "system", None) else f"s{i}" for i, s in enumerate(series_list)]
    arrays = [np.asarray(getattr(s, "values", s), dtype=float) for s in series_list]
    if len({len(a) for a in arrays}) > 1:
        raise ValueError("all series must have the same length")
    inputs = np.concatenate(arrays)
    targets = np.full_like(inputs, np.nan)
    system_of = np.empty(len(inputs), dtype=np.int64)
    boundaries, train, test = [], [], []
    start = 0
    for i, (name, a) in enumerate(zip(names, arrays)):
        end = start + len(a)
        targets[start : end - 1] = a[1:]
        system_of[start:end] = i
        usable = np.arange(start, end - 1)
        n_test = math.ceil(test_fraction * len(usable)) if test_fraction > 0 else 0
        train.append(usable[: len(usable) - n_test])
        test.append(usable[len(usable) - n_test :])
        boundaries.append((name, start, end))
        start = end
    return Dataset(
        inputs=inputs,
        targets=targets,
        boundaries=boundaries,
        train_idx=np.concatenate(train),
        test_idx=np.concatenate(test),
        system_of=system_of,
    )


# --- Lyapunov exponents ---------------------------------------------------------


@dataclass
class LyapunovEstimate:
    value: float
    reliable: bool
    n_renorm: int


def estimate_largest_lyapunov(
    spec: SystemSpec, d0: float = 1e-8, max_renorm: int | None = None
) -> LyapunovEstimate:
    """Largest Lyapunov exponent per unit time.

    The logistic map uses the average of ``ln|r(1-2x)|`` along the orbit.
    Everything else uses two-trajectory Benettin renormalization, once per
    sample interval, over the recorded span. ``reliable`` is False when
    the first- and second-half estimates disagree by more than
    ``0.25 * |lambda| + 0.01``.
    """
    n = spec.n_samples if max_renorm is None else max_renorm
    if spec.kind == "Logistic":
        x = iterate_map(spec)[:n, 0]
        logs = np.log(np.abs(spec.params["r"] * (1.0 - 2.0 * x)))
        return LyapunovEstimate(float(logs.mean()), bool(np.all(np.isfinite(logs))), len(x))

    step = _fine_stepper(spec)
    m = _steps_per_sample(spec)
    h = spec.fine_dt
    _, y = _run(spec, _lead_in(spec), 1)
    k = m  # _run leaves y at t = sample_dt
    rng = np.random.default_rng(0)
    # Mackey-Glass perturbs the whole delay buffer
    v = rng.standard_normal(y.shape)
    z = y + v * (d0 / np.linalg.norm(v))
    logs = np.empty(n)
    for i in range(n):
        for _ in range(m):
            t = k * h if spec.is_flow else 0.0
            y = step(t, y)
            z = step(t, z)
            k += 1
        d = np.linalg.norm(z - y)
        if not np.isfinite(d) or d == 0:
            return LyapunovEstimate(float("nan"), False, i)
        logs[i] = math.log(d / d0)
        z = y + (z - y) * (d0 / d)
    lam = float(logs.mean() / spec.sample_dt)
    first = logs[: n // 2].mean() / spec.sample_dt
    second = logs[n // 2 :].mean() / spec.sample_dt
    return LyapunovEstimate(lam, bool(abs(first - second) <= 0.25 * abs(lam) + 0.01), n)


# --- binary series files ----------------------------------------------------------

SERIES_MAGIC = b"ASER"
SERIES_VERSION = 1
_SERIES_HEADER = struct.Struct("<4sHIddd")


def write_series(path, series: Series) -> None:
    v = np.ascontiguousarray(series.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_SERIES_HEADER.pack(SERIES_MAGIC, SERIES_VERSION, len(v), series.sample_dt, series.mean, series.std))
        fh.write(v.tobytes())


def read_series(path) -> Series:
    raw = Path(path).read_bytes()
    if len(raw) < _SERIES_HEADER.size:
        raise ValueError(f"{path}: truncated series header")
    magic, version, n, dt, mean, std = _SERIES_HEADER.unpack_from(raw)
    if magic != SERIES_MAGIC or version != SERIES_VERSION:
        raise ValueError(f"{path}: not a series file (magic={magic!r}, version={version})")
    payload = raw[_SERIES_HEADER.size :]
    if len(payload) != 8 * n:
        raise ValueError(f"{path}: truncated payload ({len(payload)} of {8 * n} bytes)")
    return Series(values=np.frombuffer(payload, dtype="<f8").astype(float), mean=mean, std=std, sample_dt=dt)


def write_manifest(out_dir, series_by_name: dict, specs: dict, seed: int, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in series_by_name:
        fname = f"{name}.bin"
        write_series(out_dir / fname, series_by_name[name])
        entries.append({"system": name, "file": fname, "spec": specs[name].to_dict()})
    manifest = {"format": "asaerc-series-manifest", "version": 1, "seed": seed, "systems": entries}
    if extra:
        manifest.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_manifest(path) -> tuple[list[str], list[Series], dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    names, series = [], []
    for e in manifest["systems"]:
        s = read_series(path.parent / e["file"])
        s.system = SystemSpec.from_dict(e["spec"])
        names.append(e["system"])
        series.append(s)
    return names, series, manifest
