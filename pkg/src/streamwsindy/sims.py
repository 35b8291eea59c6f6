"""Ground-truth data for the three benchmark equations.

All solvers are Fourier pseudo-spectral on periodic boxes and yield snapshots
lazily, one :class:`Field` per emitted step.  Internal substeps are allowed;
only the emission cadence ``dt`` defines the stream.

KS   u_t  = -(u^2)_x - u_xx - u_xxxx             (ETDRK4)
W2D  u_tt = c(t) (u_xx + u_yy) - u^3             (leapfrog)
W3D  u_tt = u_xx + u_yy + u_zz                   (exact in time)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import scipy.fft as sfft

from .grid import Field, SpatialGrid, snapshot_path, write_snapshot
from .weakform import FeatureLibrary

PROBLEMS = ("KS", "W2D", "W3D")
LHS_ORDER = {"KS": 1, "W2D": 2, "W3D": 2}
DIMENSION = {"KS": 1, "W2D": 2, "W3D": 3}


class SimulationDiverged(FloatingPointError):
    pass


class CFLError(ValueError):
    pass


def wavespeed(t):
    """Smoothed square wave: 1 + 0.2 (2/pi) arctan(40 cos(0.2 pi t))."""
    return 1.0 + 0.2 * (2.0 / np.pi) * np.arctan(40.0 * np.cos(2.0 * np.pi * 0.1 * t))


@dataclass(frozen=True)
class SimConfig:
    problem: str = "KS"
    n: int = 256
    length: float = 32 * np.pi
    dt: float = 0.586
    steps: int = 1600
    substeps: int = 8
    seed: int = 0
    amplitude: float = 1.0
    kmax: int = 3
    wavespeed_mode: str = "square"   # W2D: "square" or "constant"
    cubic: bool = True               # W2D: include -u^3
    ic: str = "default"

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise ValueError(f"unknown problem {self.problem!r}")

    @property
    def d(self) -> int:
        return DIMENSION[self.problem]

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def grid(self) -> SpatialGrid:
        return SpatialGrid((self.n,) * self.d, self.dx, self.dt)

    def c_max(self) -> float:
        return float(wavespeed(0.0)) if self.wavespeed_mode == "square" else 1.0


def preset(problem: str, **overrides) -> SimConfig:
    """Desk-scale defaults for each benchmark."""
    base = {
        "KS": dict(problem="KS", n=256, length=32 * np.pi, dt=0.586, steps=1600, substeps=8),
        "W2D": dict(problem="W2D", n=64, length=2 * np.pi, dt=0.0122, steps=1639, substeps=4,
                    amplitude=4.0, kmax=6),
        "W3D": dict(problem="W3D", n=32, length=2 * np.pi, dt=0.0122, steps=960, substeps=1,
                    amplitude=1.0, kmax=3),
    }[problem]
    base.update(overrides)
    return SimConfig(**base)


def wavenumbers(n: int, length: float, real: bool = False) -> np.ndarray:
    if real:
        return 2 * np.pi * sfft.rfftfreq(n, d=length / n)
    return 2 * np.pi * sfft.fftfreq(n, d=length / n)


# --- Kuramoto-Sivashinsky ---------------------------------------------------

def ks_initial(cfg: SimConfig) -> np.ndarray:
    x = cfg.grid.coords(0)
    if cfg.ic == "zero":
        return np.zeros(cfg.n)
    return np.cos(x / 16) * (1 + np.sin(x / 16))


class ETDRK4:
    """Exponential time differencing RK4 for diagonal stiff linear part.

    Coefficients use the contour-integral evaluation of Kassam & Trefethen.
    """

    def __init__(self, L: np.ndarray, h: float, nonlinear, n_contour: int = 64):
        self.h = h
        self.N = nonlinear
        self.E = np.exp(h * L)
        self.E2 = np.exp(h * L / 2)
        r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
        LR = h * L[:, None] + r[None, :]
        self.Q = h * np.real(np.mean((np.exp(LR / 2) - 1) / LR, axis=1))
        self.f1 = h * np.real(np.mean((-4 - LR + np.exp(LR) * (4 - 3 * LR + LR**2)) / LR**3, axis=1))
        self.f2 = h * np.real(np.mean((2 + LR + np.exp(LR) * (-2 + LR)) / LR**3, axis=1))
        self.f3 = h * np.real(np.mean((-4 - 3 * LR - LR**2 + np.exp(LR) * (4 - LR)) / LR**3, axis=1))

    def step(self, v: np.ndarray) -> np.ndarray:
        Nv = self.N(v)
        a = self.E2 * v + self.Q * Nv
        Na = self.N(a)
        b = self.E2 * v + self.Q * Na
        Nb = self.N(b)
        c = self.E2 * a + self.Q * (2 * Nb - Nv)
        Nc = self.N(c)
        return self.E * v + Nv * self.f1 + 2 * (Na + Nb) * self.f2 + Nc * self.f3


def simulate_ks(cfg: SimConfig, u0: Optional[np.ndarray] = None) -> Iterator[Field]:
    grid = cfg.grid
    n = cfg.n
    k = wavenumbers(n, cfg.length, real=True)
    L = k**2 - k**4
    ik = 1j * k
    if n % 2 == 0:
        ik[-1] = 0.0  # odd derivative of the Nyquist mode

    def nonlinear(v):
        u = sfft.irfft(v, n=n)
        return -ik * sfft.rfft(u * u)

    stepper = ETDRK4(L, cfg.dt / cfg.substeps, nonlinear)
    u = ks_initial(cfg) if u0 is None else np.asarray(u0, dtype=float)
    v = sfft.rfft(u)
    for step in range(cfg.steps):
        if step > 0:
            for _ in range(cfg.substeps):
                v = stepper.step(v)
            u = sfft.irfft(v, n=n)
            if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6:
                raise SimulationDiverged(f"KS blow-up at step {step}")
        yield Field(grid, u, step)


# --- W2D: nonlinear wave with switching wavespeed ---------------------------

def random_smooth_field(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Superposition of low Fourier modes (|k_i| <= kmax), scaled to peak ``amplitude``."""
    d, n = cfg.d, cfg.n
    x = [cfg.grid.coords(a) for a in range(d)]
    mesh = np.meshgrid(*x, indexing="ij")
    u = np.zeros((n,) * d)
    kr = range(-cfg.kmax, cfg.kmax + 1)
    for kvec in np.array(np.meshgrid(*[kr] * d, indexing="ij")).reshape(d, -1).T:
        if not np.any(kvec):
            continue
        kk = np.sqrt(np.sum(kvec.astype(float) ** 2))
        amp = rng.standard_normal() / (1 + kk**2)
        phase = rng.uniform(0, 2 * np.pi)
        arg = sum(2 * np.pi / cfg.length * kvec[a] * mesh[a] for a in range(d))
        u += amp * np.cos(arg + phase)
    peak = np.max(np.abs(u))
    return cfg.amplitude * u / peak if peak > 0 else u


def wave2d_stable_substeps(cfg: SimConfig) -> int:
    """Smallest substep count meeting c_max dt pi sqrt(sum 1/dx^2) < 1."""
    lim = cfg.c_max() * cfg.dt * np.pi * np.sqrt(cfg.d / cfg.dx**2)
    return max(1, int(math.floor(lim)) + 1)


def _laplacian_symbol(cfg: SimConfig) -> np.ndarray:
    d = cfg.d
    ks = [wavenumbers(cfg.n, cfg.length, real=(a == d - 1)) for a in range(d)]
    mesh = np.meshgrid(*ks, indexing="ij")
    return -sum(kk**2 for kk in mesh)


def simulate_wave2d(cfg: SimConfig, u0: Optional[np.ndarray] = None,
                    v0: Optional[np.ndarray] = None) -> Iterator[Field]:
    if cfg.d != 2:
        raise ValueError("W2D needs a 2-D configuration")
    grid = cfg.grid
    nsub = max(cfg.substeps, wave2d_stable_substeps(cfg))
    h = cfg.dt / nsub
    if cfg.c_max() * h * np.pi * np.sqrt(2 / cfg.dx**2) >= 1:
        raise CFLError("leapfrog step violates the stability bound")
    lap_sym = _laplacian_symbol(cfg)
    shape = (cfg.n, cfg.n)
    c_of = wavespeed if cfg.wavespeed_mode == "square" else (lambda t: 1.0)
    cubic = 1.0 if cfg.cubic else 0.0

    def accel(u, t):
        lap = sfft.irfftn(lap_sym * sfft.rfftn(u), s=shape)
        return c_of(t) * lap - cubic * u**3

    rng = np.random.default_rng(cfg.seed)
    if u0 is None:
        u0 = np.zeros(shape) if cfg.ic == "zero" else random_smooth_field(cfg, rng)
    v0 = np.zeros(shape) if v0 is None else v0
    u_prev = np.asarray(u0, dtype=float)
    u = u_prev + h * v0 + 0.5 * h**2 * accel(u_prev, 0.0)
    yield Field(grid, u_prev, 0)
    it = 1  # u holds time it*h
    for step in range(1, cfg.steps):
        while it < step * nsub:
            u_next = 2 * u - u_prev + h**2 * accel(u, it * h)
            u_prev, u = u, u_next
            it += 1
        if not np.all(np.isfinite(u)) or np.max(np.abs(u)) > 1e6:
            raise SimulationDiverged(f"W2D blow-up at step {step}")
        yield Field(grid, u, step)


def wave_energy(u: np.ndarray, u_t: np.ndarray, c: float, cfg: SimConfig) -> float:
    """1/2 int u_t^2 + c/2 int |grad u|^2 + 1/4 int u^4 on the periodic box."""
    d = cfg.d
    vol = cfg.dx**d
    uhat = sfft.rfftn(u)
    lap = sfft.irfftn(_laplacian_symbol(cfg) * uhat, s=u.shape)
    grad2 = -np.sum(u * lap)  # int |grad u|^2 = -int u lap u
    return float(vol * (0.5 * np.sum(u_t**2) + 0.5 * c * grad2 + 0.25 * np.sum(u**4)))


# --- W3D: linear wave, exact propagation ------------------------------------

def simulate_wave3d(cfg: SimConfig, u0: Optional[np.ndarray] = None,
                    v0: Optional[np.ndarray] = None) -> Iterator[Field]:
    if cfg.d != 3:
        raise ValueError("W3D needs a 3-D configuration")
    grid = cfg.grid
    shape = (cfg.n,) * 3
    rng = np.random.default_rng(cfg.seed)
    if u0 is None:
        u0 = np.zeros(shape) if cfg.ic == "zero" else random_smooth_field(cfg, rng)
    if v0 is None:
        v0 = np.zeros(shape) if cfg.ic == "zero" else random_smooth_field(cfg, rng)
    A = sfft.rfftn(u0)
    B = sfft.rfftn(v0)
    kabs = np.sqrt(-_laplacian_symbol(cfg))
    safe = np.where(kabs > 0, kabs, 1.0)
    for step in range(cfg.steps):
        t = step * cfg.dt
        sin_term = np.where(kabs > 0, np.sin(kabs * t) / safe, t)
        uhat = A * np.cos(kabs * t) + B * sin_term
        yield Field(grid, sfft.irfftn(uhat, s=shape), step)


def simulate(cfg: SimConfig) -> Iterator[Field]:
    return {"KS": simulate_ks, "W2D": simulate_wave2d, "W3D": simulate_wave3d}[cfg.problem](cfg)


# --- noise and truth ----------------------------------------------------------

def add_noise(f: Field, sigma_nr: float, rms: float, rng: np.random.Generator) -> Field:
    if sigma_nr < 0:
        raise ValueError("noise ratio must be non-negative")
    if sigma_nr == 0:
        return f
    noisy = f.values + rng.normal(0.0, sigma_nr * rms, size=f.values.shape)
    return Field(f.grid, noisy, f.k)


class RunningRms:
    """Streaming rms estimate (not used for the reference experiments)."""

    def __init__(self):
        self.total = 0.0
        self.count = 0

    def update(self, f: Field) -> float:
        self.total += float(np.sum(f.values**2))
        self.count += f.values.size
        return self.value

    @property
    def value(self) -> float:
        return math.sqrt(self.total / self.count) if self.count else 0.0


def true_weights(problem: str, lib: FeatureLibrary, t: float) -> np.ndarray:
    if lib.d != DIMENSION[problem] or lib.lhs_order != LHS_ORDER[problem]:
        raise ValueError(f"library (d={lib.d}, lhs={lib.lhs_order}) does not match {problem}")
    w = np.zeros(lib.n_columns)
    if problem == "KS":
        w[lib.index(0, 1, 2)] = -1.0
        w[lib.index(0, 2, 1)] = -1.0
        w[lib.index(0, 4, 1)] = -1.0
    elif problem == "W2D":
        c = float(wavespeed(t))
        w[lib.index(0, 2, 1)] = c
        w[lib.index(1, 2, 1)] = c
        w[lib.index(0, 0, 3)] = -1.0
    else:
        for axis in range(3):
            w[lib.index(axis, 2, 1)] = 1.0
    return w


def write_dataset(cfg: SimConfig, directory, fields=None) -> Path:
    """Write ``snap_<k>.bin`` files plus a ``manifest.txt`` describing the run."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = 0
    for f in (simulate(cfg) if fields is None else fields):
        write_snapshot(snapshot_path(directory, f.k), f.values, f.grid.dx)
        count += 1
    solver = {"KS": "fourier-etdrk4", "W2D": "fourier-leapfrog", "W3D": "fourier-exact"}[cfg.problem]
    lines = [
        f"problem={cfg.problem}",
        "grid=" + "x".join(str(cfg.n) for _ in range(cfg.d)),
        f"dx={cfg.dx!r}",
        f"dt={cfg.dt!r}",
        f"steps={count}",
        f"seed={cfg.seed}",
        f"solver={solver}",
        f"substeps={cfg.substeps}",
        "boundary=periodic",
    ]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(directory) -> dict:
    out = {}
    for line in (Path(directory) / "manifest.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
