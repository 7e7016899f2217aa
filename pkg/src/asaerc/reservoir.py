"""2-D diffusion reservoir driven by Gaussian point sources.

The field lives on a uniform ``nx x ny`` grid over ``[0, Lx] x [0, Ly]``,
indexed ``u[i, j]`` with ``x_i = i * hx`` and ``y_j = j * hy``. Boundary nodes
are held at zero. Each input sample is held constant for ``K`` explicit-Euler
substeps.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dstn, idstn


class ReservoirConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    nx: int = 64
    ny: int = 64
    Lx: float = 1.0
    Ly: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ReservoirConfigError("grid needs at least 3 nodes per axis")
        if self.Lx <= 0 or self.Ly <= 0:
            raise ReservoirConfigError("domain lengths must be positive")

    @property
    def hx(self) -> float:
        return self.Lx / (self.nx - 1)

    @property
    def hy(self) -> float:
        return self.Ly / (self.ny - 1)

    def coords(self):
        return np.linspace(0.0, self.Lx, self.nx), np.linspace(0.0, self.Ly, self.ny)


@dataclass(frozen=True)
class Injection:
    center: tuple
    width: float = 0.05
    gain: float = 1.0


def default_injections(L: float = 1.0, width: float = 0.05) -> tuple:
    # interior diamond with signed gains. Opposite sites carry opposite signs,
    # so the only antisymmetry is the half-turn about the centre and the field
    # is forced to zero at that single point. Pairing adjacent sites instead
    # would pin a whole diagonal to zero.
    c = 0.5 * L
    r = 0.25 * L
    return (
        Injection((c, c - r), width, 1.0),
        Injection((c + r, c), width, 0.7),
        Injection((c, c + r), width, -1.0),
        Injection((c - r, c), width, -0.7),
    )


def cfl_max_dt(nu: float, hx: float, hy: float) -> float:
    """Largest stable explicit-Euler step for the 5-point diffusion stencil."""
    if nu <= 0 or hx <= 0 or hy <= 0:
        raise ValueError("nu, hx, hy must be positive")
    return 1.0 / (2.0 * nu * (1.0 / hx**2 + 1.0 / hy**2))


@dataclass(frozen=True)
class ReservoirConfig:
    grid: Grid = field(default_factory=Grid)
    nu: float = 0.05
    dt_fraction: float = 0.8
    substeps_per_sample: int = 10
    injections: tuple = field(default_factory=default_injections)
    T_offset: int = 0
    dt_override: float | None = None
    input_gain: float = 1.0
    input_bias: float = 0.0  # constant added to every input; gives the field a steady offset

    def __post_init__(self):
        if self.nu <= 0:
            raise ReservoirConfigError("nu must be positive")
        bound = cfl_max_dt(self.nu, self.grid.hx, self.grid.hy)
        if not self.dt < bound:
            raise ReservoirConfigError(f"dt={self.dt:g} violates the CFL bound {bound:g}")
        if self.substeps_per_sample < 1:
            raise ReservoirConfigError("need at least one substep per sample")
        if not 0 <= self.T_offset < self.substeps_per_sample:
            raise ReservoirConfigError("T_offset must satisfy 0 <= T_offset < substeps_per_sample")
        for inj in self.injections:
            x, y = inj.center
            if not (0 < x < self.grid.Lx and 0 < y < self.grid.Ly):
                raise ReservoirConfigError(f"injection center {inj.center} not strictly inside the domain")
            if inj.width <= 0:
                raise ReservoirConfigError("injection width must be positive")

    @property
    def dt(self) -> float:
        if self.dt_override is not None:
            return self.dt_override
        return self.dt_fraction * cfl_max_dt(self.nu, self.grid.hx, self.grid.hy)

    def drive(self, x):
        """Source amplitude for input ``x``."""
        return self.input_gain * (np.asarray(x, dtype=float) + self.input_bias)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["injections"] = [dict(center=list(i.center), width=i.width, gain=i.gain) for i in self.injections]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReservoirConfig":
        d = dict(d)
        d["grid"] = Grid(**d.get("grid", {}))
        if "injections" in d:
            d["injections"] = tuple(
                Injection(tuple(i["center"]), i.get("width", 0.05), i.get("gain", 1.0)) for i in d["injections"]
            )
        return cls(**d)

    def hash(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()


def laplacian(u: np.ndarray, hx: float, hy: float) -> np.ndarray:
    """5-point Laplacian on interior nodes; boundary rows/columns of the result are 0."""
    out = np.zeros_like(u)
    c = u[1:-1, 1:-1]
    out[1:-1, 1:-1] = (u[2:, 1:-1] - 2.0 * c + u[:-2, 1:-1]) / hx**2 + (u[1:-1, 2:] - 2.0 * c + u[1:-1, :-2]) / hy**2
    return out


def injection_profile(config: ReservoirConfig) -> np.ndarray:
    """Spatial source shape for unit input, zero on the boundary."""
    xs, ys = config.grid.coords()
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    g = np.zeros_like(X)
    for inj in config.injections:
        cx, cy = inj.center
        g += inj.gain * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2.0 * inj.width**2))
    return _zero_boundary(g)


def injection_field(config: ReservoirConfig, input_value: float) -> np.ndarray:
    """Source term for a given drive amplitude (see :meth:`ReservoirConfig.drive`)."""
    return input_value * injection_profile(config)


def _zero_boundary(u):
    u[0, :] = 0.0
    u[-1, :] = 0.0
    u[:, 0] = 0.0
    u[:, -1] = 0.0
    return u


def explicit_euler(u: np.ndarray, forcing: np.ndarray, dt: float, nu: float, hx: float, hy: float) -> np.ndarray:
    """Unguarded Euler substep ``u + dt * (nu * lap(u) + forcing)`` with zero boundary.

    No stability check: this is what :func:`step` calls after the CFL guard,
    and what stability experiments call directly.
    """
    return _zero_boundary(u + dt * (nu * laplacian(u, hx, hy) + forcing))


def step(u: np.ndarray, input_value: float, config: ReservoirConfig, profile: np.ndarray | None = None) -> np.ndarray:
    """One explicit Euler substep of ``u_t = nu * lap(u) + drive(x) * g``."""
    g = injection_profile(config) if profile is None else profile
    grid = config.grid
    return explicit_euler(u, config.drive(input_value) * g, config.dt, config.nu, grid.hx, grid.hy)


class _Stepper:
    """In-place equivalent of :func:`step` with fewer temporaries."""

    def __init__(self, config: ReservoirConfig):
        g = config.grid
        self.a = config.dt * config.nu / g.hx**2
        self.b = config.dt * config.nu / g.hy**2
        self.src = config.dt * injection_profile(config)[1:-1, 1:-1]
        self.lap = np.empty((g.nx - 2, g.ny - 2))

    def __call__(self, u, x):
        c = u[1:-1, 1:-1]
        lap = self.lap
        np.add(u[2:, 1:-1], u[:-2, 1:-1], out=lap)
        lap -= 2.0 * c
        lap *= self.a
        lap += self.b * (u[1:-1, 2:] - 2.0 * c + u[1:-1, :-2])
        lap += x * self.src
        c += lap


@dataclass
class SnapshotStore:
    """Per-sample reservoir snapshots.

    ``frames[n]`` is the field at the end of sample ``n`` (after ``K`` substeps
    with ``x_n`` held). ``fixed_frames[n]`` is the field ``T_offset`` substeps
    earlier, where the fixed sensors read; it aliases ``frames`` when
    ``T_offset == 0``.
    """

    frames: np.ndarray
    config: ReservoirConfig
    fixed_frames: np.ndarray | None = None

    def __post_init__(self):
        if self.fixed_frames is None:
            self.fixed_frames = self.frames

    def __len__(self):
        return len(self.frames)

    @property
    def config_hash(self) -> bytes:
        return self.config.hash()


class _SpectralPropagator:
    """K explicit-Euler substeps applied exactly in the DST-I eigenbasis.

    The 5-point Dirichlet Laplacian is diagonal in the discrete sine basis, so
    one substep multiplies mode ``(k, l)`` by ``mu = 1 - dt*nu*lambda_kl`` and a
    held input adds ``dt * g_hat * x`` each substep. Composing ``m`` substeps
    gives ``mu**m`` and ``dt * g_hat * sum_{j<m} mu**j``; this is the same
    discrete scheme as :func:`step`, not an approximation of it.
    """

    def __init__(self, config: ReservoirConfig):
        g = config.grid
        kx = np.arange(1, g.nx - 1)
        ky = np.arange(1, g.ny - 1)
        lx = 4.0 / g.hx**2 * np.sin(np.pi * kx / (2 * (g.nx - 1))) ** 2
        ly = 4.0 / g.hy**2 * np.sin(np.pi * ky / (2 * (g.ny - 1))) ** 2
        self.mu = 1.0 - config.dt * config.nu * (lx[:, None] + ly[None, :])
        self.g_hat = dstn(injection_profile(config)[1:-1, 1:-1], type=1, norm="ortho")
        self.dt = config.dt

    def coefficients(self, m: int):
        """Homogeneous factor and input gain for ``m`` substeps."""
        mu = self.mu
        power = mu**m
        # sum_{j<m} mu^j, with the mu == 1 limit handled explicitly
        with np.errstate(divide="ignore", invalid="ignore"):
            geo = np.where(np.abs(1.0 - mu) > 1e-12, (1.0 - power) / (1.0 - mu), float(m))
        return power, self.dt * self.g_hat * geo


def run(
    series, config: ReservoirConfig, dtype=np.float32, method: str = "spectral", chunk: int = 1024, blowup: float = 1e8
) -> SnapshotStore:
    """Drive the reservoir with ``series`` from a zero initial field.

    ``method="substep"`` applies :func:`step`-equivalent updates one by one;
    ``"spectral"`` (default) evaluates the same ``K`` substeps in closed form
    per sample and is independent of ``K`` in cost.
    """
    x = config.drive(getattr(series, "values", series))
    g = config.grid
    K, T = config.substeps_per_sample, config.T_offset
    frames = np.empty((len(x), g.nx, g.ny), dtype=dtype)
    fixed = np.empty_like(frames) if T > 0 else None
    if method == "substep":
        u = np.zeros((g.nx, g.ny))
        stepper = _Stepper(config)
        for n, xn in enumerate(x):
            for k in range(K):
                stepper(u, xn)
                if fixed is not None and k == K - 1 - T:
                    fixed[n] = u
            frames[n] = u
            if n % 256 == 0 and not np.abs(u).max() < blowup:
                raise FloatingPointError(f"reservoir blow-up at sample {n}")
        return SnapshotStore(frames, config, fixed)
    if method != "spectral":
        raise ValueError(f"unknown method {method!r}")

    prop = _SpectralPropagator(config)
    a_full, b_full = prop.coefficients(K)
    a_part, b_part = prop.coefficients(K - T)
    frames[:, 0, :] = frames[:, -1, :] = 0
    frames[:, :, 0] = frames[:, :, -1] = 0
    if fixed is not None:
        fixed[:, 0, :] = fixed[:, -1, :] = 0
        fixed[:, :, 0] = fixed[:, :, -1] = 0
    u_hat = np.zeros_like(prop.mu)
    buf = np.empty((min(chunk, max(len(x), 1)), *u_hat.shape))
    buf_fixed = np.empty_like(buf) if fixed is not None else None
    for s in range(0, len(x), chunk):
        xs = x[s : s + chunk]
        for i, xn in enumerate(xs):
            if buf_fixed is not None:
                buf_fixed[i] = a_part * u_hat + xn * b_part
            u_hat = a_full * u_hat + xn * b_full
            buf[i] = u_hat
        frames[s : s + len(xs), 1:-1, 1:-1] = idstn(buf[: len(xs)], type=1, norm="ortho", axes=(1, 2))
        if fixed is not None:
            fixed[s : s + len(xs), 1:-1, 1:-1] = idstn(buf_fixed[: len(xs)], type=1, norm="ortho", axes=(1, 2))
        if not np.abs(u_hat).max() < blowup:
            raise FloatingPointError(f"reservoir blow-up before sample {s + len(xs)}")
    return SnapshotStore(frames, config, fixed)


# --- sampling --------------------------------------------------------------------


def _cell(coord, h, n):
    """Lower-left cell index, lower-index cell on interior grid lines."""
    i = np.ceil(np.asarray(coord) / h).astype(np.int64) - 1
    return np.clip(i, 0, n - 2)


def _check_domain(x, y, grid: Grid):
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any(x < 0) or np.any(x > grid.Lx) or np.any(y < 0) or np.any(y > grid.Ly):
        raise DomainError("sample point outside the domain")


def bilinear_weights(x, y, grid: Grid):
    """Cell indices and the four corner weights (w00, w10, w01, w11)."""
    _check_domain(x, y, grid)
    i = _cell(x, grid.hx, grid.nx)
    j = _cell(y, grid.hy, grid.ny)
    tx = np.asarray(x) / grid.hx - i
    ty = np.asarray(y) / grid.hy - j
    w = ((1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty)
    return i, j, tx, ty, w


def sample_bilinear(u: np.ndarray, point, grid: Grid):
    """Value and spatial gradient of the bilinear interpolant at ``point``."""
    x, y = point
    i, j, tx, ty, (w00, w10, w01, w11) = bilinear_weights(x, y, grid)
    u00, u10, u01, u11 = u[i, j], u[i + 1, j], u[i, j + 1], u[i + 1, j + 1]
    value = w00 * u00 + w10 * u10 + w01 * u01 + w11 * u11
    dx = ((1 - ty) * (u10 - u00) + ty * (u11 - u01)) / grid.hx
    dy = ((1 - tx) * (u01 - u00) + tx * (u11 - u10)) / grid.hy
    return float(value), float(dx), float(dy)


def sample_bilinear_batch(fields: np.ndarray, qx: np.ndarray, qy: np.ndarray, grid: Grid, grad: bool = True):
    """Batched bilinear sampling.

    ``fields`` is ``(B, nx, ny)`` and ``qx, qy`` are ``(B, N)``. Returns values
    ``(B, N)`` and, if ``grad``, the x/y derivatives ``(B, N)`` each.
    """
    i, j, tx, ty, (w00, w10, w01, w11) = bilinear_weights(qx, qy, grid)
    b = np.arange(fields.shape[0])[:, None]
    u00 = fields[b, i, j]
    u10 = fields[b, i + 1, j]
    u01 = fields[b, i, j + 1]
    u11 = fields[b, i + 1, j + 1]
    value = w00 * u00 + w10 * u10 + w01 * u01 + w11 * u11
    if not grad:
        return value
    dx = ((1 - ty) * (u10 - u00) + ty * (u11 - u01)) / grid.hx
    dy = ((1 - tx) * (u01 - u00) + tx * (u11 - u10)) / grid.hy
    return value, dx, dy


def fixed_measurements(u: np.ndarray, points: np.ndarray, grid: Grid) -> np.ndarray:
    """Bilinear values at fixed ``points`` (shape ``(N, 2)``).

    ``u`` may be a single field ``(nx, ny)`` or a stack ``(B, nx, ny)``.
    """
    points = np.asarray(points, dtype=float)
    single = u.ndim == 2
    fields = u[None] if single else u
    B = fields.shape[0]
    qx = np.broadcast_to(points[:, 0], (B, len(points)))
    qy = np.broadcast_to(points[:, 1], (B, len(points)))
    out = sample_bilinear_batch(fields, qx, qy, grid, grad=False)
    return out[0] if single else out


def sample_gaussian_kernel(u: np.ndarray, center, width: float, grid: Grid, radius: float = 4.0):
    """Normalized truncated-Gaussian average of ``u`` around ``center``.

    Normalization is over the discrete nodes inside the support, so a constant
    field is reproduced exactly. Returns ``(value, dvalue/dcx, dvalue/dcy)``.
    """
    if width <= 0:
        raise ValueError("kernel width must be positive")
    cx, cy = center
    xs, ys = grid.coords()
    r = radius * width
    ix = np.nonzero(np.abs(xs - cx) <= r)[0]
    iy = np.nonzero(np.abs(ys - cy) <= r)[0]
    if len(ix) == 0 or len(iy) == 0:
        raise DomainError("kernel support lies outside the domain")
    DX = xs[ix][:, None] - cx
    DY = ys[iy][None, :] - cy
    d2 = DX**2 + DY**2
    mask = d2 <= r * r
    if not mask.any():
        raise DomainError("kernel support lies outside the domain")
    e = np.where(mask, np.exp(-d2 / (2.0 * width**2)), 0.0)
    sub = u[np.ix_(ix, iy)]
    s0 = e.sum()
    value = (e * sub).sum() / s0
    # d e / d c = e * (x - c) / width^2
    s2 = width**2
    gx = ((e * sub * DX).sum() - value * (e * DX).sum()) / (s0 * s2)
    gy = ((e * sub * DY).sum() - value * (e * DY).sum()) / (s0 * s2)
    return float(value), float(gx), float(gy)


# --- persistence -------------------------------------------------------------------

STORE_MAGIC = b"ASRC"
STORE_VERSION = 1
# magic, version, nx, ny, n_frames, Lx, Ly, nu, dt, K, T_offset, config hash
_HEAD = struct.Struct("<4sHIIIddddII32s")
_CRC = struct.Struct("<I")


class StoreFormatError(ValueError):
    pass


def persist(store: SnapshotStore, path) -> None:
    cfg = store.config
    g = cfg.grid
    head = _HEAD.pack(
        STORE_MAGIC,
        STORE_VERSION,
        g.nx,
        g.ny,
        len(store),
        g.Lx,
        g.Ly,
        cfg.nu,
        cfg.dt,
        cfg.substeps_per_sample,
        cfg.T_offset,
        cfg.hash(),
    )
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(_CRC.pack(zlib.crc32(head)))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        _write_frames(fh, store.frames)
        if cfg.T_offset > 0:
            _write_frames(fh, store.fixed_frames)


def _write_frames(fh, frames, chunk=512):
    for s in range(0, len(frames), chunk):
        fh.write(np.ascontiguousarray(frames[s : s + chunk], dtype="<f4").tobytes())


def load(path, expect_config: ReservoirConfig | None = None, mmap: bool = False) -> SnapshotStore:
    """Read a snapshot file; with ``expect_config`` the embedded hash must match."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        crc = fh.read(_CRC.size)
        if len(head) < _HEAD.size or len(crc) < _CRC.size:
            raise StoreFormatError(f"{path}: truncated header")
        if _CRC.unpack(crc)[0] != zlib.crc32(head):
            raise StoreFormatError(f"{path}: header checksum mismatch")
        magic, version, nx, ny, n, Lx, Ly, nu, dt, K, T, digest = _HEAD.unpack(head)
        if magic != STORE_MAGIC or version != STORE_VERSION:
            raise StoreFormatError(f"{path}: not a snapshot store")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        cfg = ReservoirConfig.from_dict(json.loads(fh.read(blob_len)))
        offset = fh.tell()
    if cfg.hash() != digest:
        raise StoreFormatError(f"{path}: embedded config does not match header hash")
    if expect_config is not None and expect_config.hash() != digest:
        raise StoreFormatError(f"{path}: config hash mismatch (store built with a different reservoir config)")
    if (cfg.grid.nx, cfg.grid.ny) != (nx, ny):
        raise StoreFormatError(f"{path}: grid dims disagree with embedded config")
    blocks = 2 if T > 0 else 1
    frame_bytes = 4 * nx * ny * n
    if size != offset + blocks * frame_bytes:
        raise StoreFormatError(f"{path}: truncated or oversized payload")

    def block(k):
        if n == 0:
            return np.zeros((0, nx, ny), dtype=np.float32)
        if mmap:
            return np.memmap(path, dtype="<f4", mode="r", offset=offset + k * frame_bytes, shape=(n, nx, ny))
        with open(path, "rb") as fh:
            fh.seek(offset + k * frame_bytes)
            return np.frombuffer(fh.read(frame_bytes), dtype="<f4").reshape(n, nx, ny).astype(np.float32)

    return SnapshotStore(block(0), cfg, block(1) if T > 0 else None)
