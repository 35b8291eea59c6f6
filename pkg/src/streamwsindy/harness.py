"""Offline initialisation, the streaming loop, and multi-trial noise sweeps."""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from . import sparse
from .analysis import RegretLedger, e2, regret_step, tpr
from .grid import Field, RingBuffer, iter_snapshot_dir
from .sims import (DIMENSION, LHS_ORDER, RunningRms, SimConfig, add_noise, preset, read_manifest, simulate,
                   true_weights, wavespeed)
from .sparse import DivergenceError, ThresholdPolicy, WeightState
from .weakform import (FeatureLibrary, KernelCache, LinearSystem, NotReady, PsiSlice, QueryGrid,
                       assemble_system, build_library, cost_estimates, make_query_grid, spatial_features)

log = logging.getLogger(__name__)

CSV_HEAD = ["step", "t", "lambda", "support_size", "tpr", "e2", "objective", "regret_cum", "wall_ms"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    problem: str = "KS"
    K_mem: int = 21
    sigma_nr: tuple = (0.0,)
    trials: int = 20
    lambda0: float = 1e-4
    dlambda: float = 0.1
    lambda_max: float = 0.1
    m: int = 21
    p: int = 11
    p_time: int = 9
    stride: Optional[int] = None
    source: str = "simulate"
    data_dir: Optional[str] = None
    out: Optional[str] = None
    seed: int = 0
    sim_seed: int = 0
    n: Optional[int] = None
    steps: Optional[int] = None
    dt: Optional[float] = None
    step_mode: str = "exact"
    threshold: str = "unit"
    method: str = "fft"
    workers: int = 1
    running_rms: bool = False

    def __post_init__(self):
        if self.source not in ("simulate", "directory"):
            raise ConfigError(f"source must be 'simulate' or 'directory', not {self.source!r}")
        if self.source == "directory" and not self.data_dir:
            raise ConfigError("source=directory needs data_dir")
        if self.problem not in LHS_ORDER:
            raise ConfigError(f"unknown problem {self.problem!r}")
        if self.K_mem < 5 or self.K_mem % 2 == 0:
            raise ConfigError("K_mem must be odd and at least 5")
        if self.step_mode not in ("exact", "estimate"):
            raise ConfigError(f"step_mode must be exact or estimate, not {self.step_mode!r}")
        if self.threshold not in sparse.THRESHOLD_MODES:
            raise ConfigError(f"threshold must be one of {sparse.THRESHOLD_MODES}")
        if self.method not in ("fft", "direct"):
            raise ConfigError(f"method must be fft or direct, not {self.method!r}")
        if self.trials < 1:
            raise ConfigError("trials must be positive")
        if isinstance(self.sigma_nr, (int, float)):
            self.sigma_nr = (float(self.sigma_nr),)
        self.sigma_nr = tuple(float(s) for s in self.sigma_nr)
        try:
            self.policy
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def policy(self) -> ThresholdPolicy:
        return ThresholdPolicy(self.dlambda, self.lambda_max, self.lambda0)

    def sim_config(self) -> SimConfig:
        over = {"seed": self.sim_seed}
        for key in ("n", "steps", "dt"):
            if getattr(self, key) is not None:
                over[key] = getattr(self, key)
        return preset(self.problem, **over)


def _coerce(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    name = f.name
    if name == "sigma_nr":
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if raw.lower() in ("none", ""):
        return None
    default = f.default
    if name in ("stride", "n", "steps"):
        return int(raw)
    if name == "dt":
        return float(raw)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def config_fields() -> dict:
    return {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    fields_ = config_fields()
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields_:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(fields_[key], value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    unknown = set(overrides) - set(config_fields())
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "sigma_nr":
            v = ",".join(repr(s) for s in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


# --- data -----------------------------------------------------------------

class Dataset:
    """Clean snapshot source with the dataset-wide rms used to scale noise."""

    def __init__(self, fields_factory, materialize: bool = True):
        self._factory = fields_factory
        self._cache: Optional[list] = None
        self._rms: Optional[float] = None
        if materialize:
            self._cache = list(fields_factory())

    def fields(self) -> Iterator[Field]:
        return iter(self._cache) if self._cache is not None else self._factory()

    @property
    def rms(self) -> float:
        if self._rms is None:
            total, count = 0.0, 0
            for f in self.fields():
                total += float(np.sum(f.values**2))
                count += f.values.size
            self._rms = float(np.sqrt(total / count))
        return self._rms


@lru_cache(maxsize=4)
def simulated_dataset(sim: SimConfig) -> Dataset:
    bytes_needed = sim.steps * sim.n**sim.d * 8
    return Dataset(lambda: simulate(sim), materialize=bytes_needed < 600e6)


def directory_dataset(directory, dt: float) -> Dataset:
    return Dataset(lambda: iter_snapshot_dir(directory, dt), materialize=False)


def dataset_for(cfg: ExperimentConfig) -> Dataset:
    if cfg.source == "simulate":
        return simulated_dataset(cfg.sim_config())
    dt = cfg.dt
    if dt is None:
        try:
            dt = float(read_manifest(cfg.data_dir)["dt"])
        except (OSError, KeyError):
            raise ConfigError("directory source needs dt (flag or manifest)") from None
    return directory_dataset(cfg.data_dir, dt)


def truth_problem(cfg: ExperimentConfig) -> Optional[str]:
    """Problem whose true weights score the run; directory data needs a matching manifest."""
    if cfg.source == "simulate":
        return cfg.problem
    try:
        return cfg.problem if read_manifest(cfg.data_dir).get("problem") == cfg.problem else None
    except OSError:
        return None


def noisy_stream(ds: Dataset, sigma_nr: float, rng: np.random.Generator,
                 running: bool = False) -> Iterator[Field]:
    """Add noise scaled by the dataset-wide rms, or by a causal running rms."""
    tracker = RunningRms()
    rms = ds.rms if (sigma_nr > 0 and not running) else 0.0
    for f in ds.fields():
        if running:
            rms = tracker.update(f)
        yield add_noise(f, sigma_nr, rms, rng)


# --- streaming state ------------------------------------------------------

@dataclass
class StreamState:
    lib: FeatureLibrary
    kernels: KernelCache
    query: QueryGrid
    buffer: RingBuffer
    weights: WeightState
    policy: ThresholdPolicy
    system: LinearSystem
    problem: Optional[str] = None
    step_mode: str = "exact"
    threshold: str = "unit"
    method: str = "fft"
    ledger: RegretLedger = field(default_factory=RegretLedger)
    step: int = 0
    lstsq_calls_at_init: int = 0
    peak_feature_bytes: int = 0
    divergences: int = 0

    def feature_bytes(self) -> int:
        return sum(s.nbytes for s in self.buffer) + self.system.G.nbytes + self.system.b.nbytes

    def _track_memory(self):
        self.peak_feature_bytes = max(self.peak_feature_bytes, self.feature_bytes())

    @property
    def dt(self) -> float:
        return self.kernels.grid.dt

    def truth(self, k: float) -> Optional[np.ndarray]:
        if self.problem is None:
            return None
        return true_weights(self.problem, self.lib, k * self.dt)

    def budget_doubles(self) -> int:
        return cost_estimates(self.lib, self.kernels.grid, self.query, self.kernels.K_mem)[1]


def offline_phase(cfg: ExperimentConfig, snapshots: Iterator[Field],
                  problem: Optional[str] = None) -> tuple[StreamState, dict]:
    """Set up kernels, featurise the first K_mem snapshots, and solve once for w0."""
    K = cfg.K_mem
    first = []
    for f in snapshots:
        first.append(f)
        if len(first) == K:
            break
    if len(first) < K:
        raise NotReady(f"need {K} snapshots, got {len(first)}")
    grid = first[0].grid
    lhs = LHS_ORDER[cfg.problem]
    lib = build_library(grid.ndim, lhs)
    kernels = KernelCache(lib, grid, cfg.m, cfg.p, K, p_time=cfg.p_time)
    query = make_query_grid(grid.shape, cfg.m, cfg.stride)
    buffer: RingBuffer[PsiSlice] = RingBuffer(K)
    for f in first:
        buffer.push(spatial_features(f, lib, kernels, query, method=cfg.method))
    system = assemble_system(buffer, kernels, lib)
    weights = sparse.init_state(system.G, system.b, cfg.policy)
    state = StreamState(lib=lib, kernels=kernels, query=query, buffer=buffer, weights=weights,
                        policy=cfg.policy, system=system, problem=problem,
                        step_mode=cfg.step_mode, threshold=cfg.threshold, method=cfg.method)
    state.lstsq_calls_at_init = sparse.lstsq.calls
    state._track_memory()
    row = _metrics_row(state, system, weights.w, sparse.objective(
        system.G, system.b, weights.w, weights.lam * weights.factors_prev), 0.0)
    return state, row


def _metrics_row(state: StreamState, system: LinearSystem, w: np.ndarray, F: float,
                 wall_ms: float) -> dict:
    truth = state.truth(system.k)
    row = {
        "step": state.step,
        "t": system.k * state.dt,
        "lambda": state.weights.lam,
        "support_size": int(np.count_nonzero(w)),
        "tpr": tpr(w, truth) if truth is not None else float("nan"),
        "e2": e2(w, truth) if truth is not None else float("nan"),
        "objective": F,
        "regret_cum": state.ledger.total if truth is not None else float("nan"),
        "wall_ms": wall_ms,
        "w": w.copy(),
    }
    return row


def online_step(state: StreamState, incoming: Field) -> dict:
    """Featurise one snapshot, rebuild (G, b), take one thresholded step, update lambda."""
    t0 = time.perf_counter()
    psi = spatial_features(incoming, state.lib, state.kernels, state.query, method=state.method)
    state.buffer.push(psi)
    system = assemble_system(state.buffer, state.kernels, state.lib, out=state.system)
    ws = state.weights
    truth = state.truth(system.k)
    if truth is not None:
        factors = sparse.scale_system(system.G, system.b).factors
        regret_step(state.ledger, system.G, system.b, ws.w, truth, ws.lam * factors)
    saved = (ws.w.copy(), ws.lam, ws.F_prev_resid, ws.factors_prev.copy(), ws.step)
    try:
        res = sparse.online_update(ws, system.G, system.b, state.policy, mode=state.step_mode,
                                   threshold=state.threshold)
        F = res.F_new
    except DivergenceError as exc:
        ws.w, ws.lam, ws.F_prev_resid, ws.factors_prev, ws.step = saved
        state.divergences += 1
        log.warning("step %d diverged (%s); state rolled back", state.step + 1, exc)
        F = float("nan")
    state.step += 1
    state._track_memory()
    wall_ms = 1e3 * (time.perf_counter() - t0)
    return _metrics_row(state, system, ws.w, F, wall_ms)


# --- runs -----------------------------------------------------------------

@dataclass
class TrialResult:
    sigma_nr: float
    trial: int
    rows: list
    peak_feature_bytes: int = 0
    budget_doubles: int = 0
    lstsq_online: int = 0
    divergences: int = 0
    error: Optional[str] = None

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    @property
    def weights(self) -> np.ndarray:
        return np.array([r["w"] for r in self.rows])


def run_stream(cfg: ExperimentConfig, snapshots: Iterable[Field], problem: Optional[str]) -> tuple[StreamState, list]:
    it = iter(snapshots)
    state, row0 = offline_phase(cfg, it, problem=problem)
    rows = [row0]
    for f in it:
        rows.append(online_step(state, f))
    return state, rows


def run_trial(cfg: ExperimentConfig, sigma_nr: float, trial: int,
              dataset: Optional[Dataset] = None) -> TrialResult:
    ds = dataset_for(cfg) if dataset is None else dataset
    rng = np.random.default_rng(cfg.seed + trial)
    state, rows = run_stream(cfg, noisy_stream(ds, sigma_nr, rng, cfg.running_rms), truth_problem(cfg))
    return TrialResult(sigma_nr, trial, rows, state.peak_feature_bytes, state.budget_doubles(),
                       sparse.lstsq.calls - state.lstsq_calls_at_init, state.divergences)


def _trial_job(args):
    cfg, sigma, trial = args
    try:
        return run_trial(cfg, sigma, trial)
    except Exception as exc:  # recorded, aggregate proceeds without it
        return TrialResult(sigma, trial, [], error=f"{type(exc).__name__}: {exc}")


@dataclass
class ExperimentResult:
    cfg: ExperimentConfig
    trials: dict  # sigma -> list[TrialResult]
    labels: list

    def completed(self, sigma: float) -> list:
        return [t for t in self.trials[sigma] if t.error is None]

    def mean_track(self, sigma: float, key: str) -> np.ndarray:
        return np.mean([t.column(key) for t in self.completed(sigma)], axis=0)

    def wavespeed_tracks(self, sigma: float, lib: FeatureLibrary) -> np.ndarray:
        """Per-trial learned wavespeed: mean of the two second-derivative coefficients."""
        cols = [lib.index(0, 2, 1), lib.index(1, 2, 1)]
        return np.array([t.weights[:, cols].mean(axis=1) for t in self.completed(sigma)])


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    jobs = [(cfg, s, i) for s in cfg.sigma_nr for i in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    by_sigma: dict = {s: [] for s in cfg.sigma_nr}
    for r in results:
        by_sigma[r.sigma_nr].append(r)
        if r.error:
            warnings.warn(f"trial {r.trial} at sigma_nr={r.sigma_nr} failed: {r.error}")
    lib = build_library(DIMENSION[cfg.problem], LHS_ORDER[cfg.problem])
    result = ExperimentResult(cfg, by_sigma, lib.labels)
    if cfg.out:
        write_results(result, lib, Path(cfg.out))
    return result


def write_trial_csv(path: Path, rows: list, labels: list) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEAD + labels)
        for r in rows:
            wr.writerow([r["step"], repr(r["t"]), repr(r["lambda"]), r["support_size"],
                         repr(r["tpr"]), repr(r["e2"]), repr(r["objective"]),
                         repr(r["regret_cum"]), f"{r['wall_ms']:.3f}"]
                        + [repr(float(x)) for x in r["w"]])


def write_results(result: ExperimentResult, lib: FeatureLibrary, out: Path) -> None:
    cfg = result.cfg
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    (out / "library.txt").write_text(lib.serialize())
    for sigma, trials in result.trials.items():
        tag = f"{cfg.problem}_K{cfg.K_mem}_s{sigma:g}"
        for t in trials:
            if t.error is None:
                write_trial_csv(out / f"{tag}_trial{t.trial:03d}.csv", t.rows, lib.labels)
        done = result.completed(sigma)
        if not done:
            continue
        steps = done[0].column("step")
        ts = done[0].column("t")
        head = ["step", "t", "mean_tpr", "mean_e2", "n_trials"]
        cols = [steps, ts, result.mean_track(sigma, "tpr"), result.mean_track(sigma, "e2"),
                np.full(len(steps), len(done))]
        if cfg.problem == "W2D":
            c = result.wavespeed_tracks(sigma, lib)
            head += ["c_true", "c_mean", "c_min", "c_max"]
            cols += [wavespeed(ts), c.mean(0), c.min(0), c.max(0)]
        with open(out / f"{tag}_aggregate.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(head)
            for i in range(len(steps)):
                wr.writerow([int(steps[i])] + [repr(float(col[i])) for col in cols[1:]])
