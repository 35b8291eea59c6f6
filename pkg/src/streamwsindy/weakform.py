"""Weak-form features: test functions, the candidate library and linear-system assembly.

Every library column is a convolution ``D^beta phi * u^j`` evaluated at a set of
query points, followed by a trapezoidal integral in time against the temporal
bump.  Derivatives always sit on the test function and are applied literally,
with no ``(-1)^k`` factor, so ``b`` and ``G`` share one convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .grid import AXIS_NAMES, Field, MultiIndex, RingBuffer, SpatialGrid

MAX_ROWS = 10_000
MAX_DERIVATIVE = 4
MAX_POWER = 4


class MarginError(ValueError):
    """Query supports do not fit inside the grid."""


class NotReady(RuntimeError):
    """Not enough feature slices buffered to assemble a system."""


# --- test functions -------------------------------------------------------

@lru_cache(maxsize=None)
def _bump_derivative_coeffs(p: int, k: int) -> tuple[Fraction, ...]:
    """Exact power-series coefficients of d^k/ds^k (1 - s^2)^p."""
    coeffs = [Fraction(0)] * (2 * p + 1)
    for i in range(p + 1):
        coeffs[2 * i] = Fraction((-1) ** i * math.comb(p, i))
    for _ in range(k):
        coeffs = [c * n for n, c in enumerate(coeffs)][1:] or [Fraction(0)]
    return tuple(coeffs)


def _eval_exact(coeffs: Sequence[Fraction], s: Fraction) -> Fraction:
    acc = Fraction(0)
    for c in reversed(coeffs):
        acc = acc * s + c
    return acc


@dataclass(frozen=True)
class AxisTestFunction:
    """Samples of phi(x) = (1 - (x / (m h))^2)^p and its derivatives on 2m+1 points.

    ``samples[k, i]`` is the k-th derivative at ``x = (i - m) * h``.
    """

    m: int
    p: int
    h: float
    samples: np.ndarray

    @property
    def max_order(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def width(self) -> int:
        return 2 * self.m + 1

    @property
    def points(self) -> np.ndarray:
        return self.h * np.arange(-self.m, self.m + 1)

    def derivative(self, k: int) -> np.ndarray:
        return self.samples[k]

    def __call__(self, x, k: int = 0):
        """Closed-form evaluation off the sample grid (float arithmetic)."""
        radius = self.m * self.h
        s = np.asarray(x, dtype=float) / radius
        coeffs = np.array([float(c) for c in _bump_derivative_coeffs(self.p, k)])
        vals = np.polynomial.polynomial.polyval(s, coeffs) / radius**k
        return np.where(np.abs(s) <= 1, vals, 0.0)


def make_axis_test_function(m: int, p: int, h: float, max_order: int = MAX_DERIVATIVE) -> AxisTestFunction:
    if m < 1:
        raise ValueError("half-width m must be at least 1")
    if h <= 0:
        raise ValueError("spacing must be positive")
    if p <= max_order:
        raise ValueError(f"degree p={p} must exceed the highest derivative order {max_order}")
    radius = m * h
    samples = np.empty((max_order + 1, 2 * m + 1))
    for k in range(max_order + 1):
        coeffs = _bump_derivative_coeffs(p, k)
        # exact rational evaluation at s = j/m, so endpoint zeros are exact
        exact = [float(_eval_exact(coeffs, Fraction(j, m))) for j in range(-m, m + 1)]
        samples[k] = np.array(exact) / radius**k
    samples.setflags(write=False)
    return AxisTestFunction(m=m, p=p, h=float(h), samples=samples)


def make_temporal_test_function(K_mem: int, dt: float, lhs_order: int, p: int = 9) -> AxisTestFunction:
    if K_mem < 5 or K_mem % 2 == 0:
        raise ValueError(f"K_mem must be odd and >= 5, got {K_mem}")
    if lhs_order not in (1, 2):
        raise ValueError("lhs_order must be 1 or 2")
    return make_axis_test_function((K_mem - 1) // 2, p, dt, max_order=lhs_order)


# --- library --------------------------------------------------------------

@dataclass(frozen=True)
class Feature:
    alpha: MultiIndex
    power: int

    @property
    def label(self) -> str:
        return f"d^{self.alpha.order}_{AXIS_NAMES[self.alpha.axis]} u^{self.power}"


@dataclass(frozen=True)
class FeatureLibrary:
    d: int
    features: tuple[Feature, ...]
    lhs_order: int

    @property
    def n_columns(self) -> int:
        return len(self.features)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def operators(self) -> tuple[MultiIndex, ...]:
        """Distinct differential operators, in first-appearance order."""
        return tuple(dict.fromkeys(f.alpha for f in self.features))

    @property
    def powers(self) -> tuple[int, ...]:
        return tuple(sorted({f.power for f in self.features}))

    @property
    def I(self) -> int:
        return len(self.operators)

    @property
    def J(self) -> int:
        return len(self.powers)

    @property
    def labels(self) -> list[str]:
        return [f.label for f in self.features]

    def index(self, axis: int, order: int, power: int) -> int:
        target = Feature(MultiIndex.along(self.d, axis, order), power)
        return self.features.index(target)

    def serialize(self) -> str:
        lhs = "dt" if self.lhs_order == 1 else "dtt"
        return "\n".join(self.labels + [f"lhs: {lhs}"]) + "\n"

    @classmethod
    def parse(cls, text: str) -> "FeatureLibrary":
        feats = []
        lhs_order = None
        parsed = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("lhs:"):
                lhs_order = {"dt": 1, "dtt": 2}[line.split(":", 1)[1].strip()]
                continue
            op, mono = line.split()
            order, axis = op[2:].split("_")
            parsed.append((AXIS_NAMES.index(axis), int(order), int(mono[2:])))
        if lhs_order is None:
            raise ValueError("library text has no lhs line")
        d = max(1, max(a for a, _, _ in parsed) + 1)
        for axis, order, power in parsed:
            feats.append(Feature(MultiIndex.along(d, axis, order), power))
        return cls(d, tuple(feats), lhs_order)


def build_library(d: int, lhs_order: int) -> FeatureLibrary:
    if d not in (1, 2, 3):
        raise ValueError("d must be 1, 2 or 3")
    if lhs_order not in (1, 2):
        raise ValueError("lhs_order must be 1 or 2")
    zero = MultiIndex((0,) * d)
    feats = [Feature(zero, 0)]
    for j in range(1, MAX_POWER + 1):
        feats.append(Feature(zero, j))
        for axis in range(d):
            for k in range(1, MAX_DERIVATIVE + 1):
                feats.append(Feature(MultiIndex.along(d, axis, k), j))
    return FeatureLibrary(d, tuple(feats), lhs_order)


# --- query points ---------------------------------------------------------

@dataclass(frozen=True)
class QueryGrid:
    shape: tuple[int, ...]
    margin: tuple[int, ...]
    stride: tuple[int, ...]

    @property
    def axis_indices(self) -> list[np.ndarray]:
        return [np.arange(m, n - m, s) for n, m, s in zip(self.shape, self.margin, self.stride)]

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(len(ix) for ix in self.axis_indices)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def __len__(self) -> int:
        return self.size


def make_query_grid(shape: Sequence[int], margin, stride=None, max_rows: int = MAX_ROWS) -> QueryGrid:
    """Equally spaced interior points keeping every test-function support inside.

    With ``stride=None`` the smallest common stride giving fewer than
    ``max_rows`` points is used.
    """
    shape = tuple(int(n) for n in shape)
    d = len(shape)
    margin = (int(margin),) * d if np.isscalar(margin) else tuple(int(m) for m in margin)
    interior = [n - 2 * m for n, m in zip(shape, margin)]
    if any(w < 1 for w in interior):
        raise MarginError(f"margins {margin} leave no interior points on grid {shape}")
    if stride is None:
        s = 1
        while np.prod([-(-w // s) for w in interior]) >= max_rows:
            s += 1
        stride = (s,) * d
    elif np.isscalar(stride):
        stride = (int(stride),) * d
    else:
        stride = tuple(int(s) for s in stride)
    return QueryGrid(shape, margin, stride)


# --- kernels --------------------------------------------------------------

class KernelCache:
    """Per-axis derivative kernels (and their FFTs) plus temporal weight vectors.

    Everything is built once; ``builds`` counts constructions so streaming code
    can assert that nothing is recomputed.
    """

    def __init__(self, lib: FeatureLibrary, grid: SpatialGrid, m: int, p: int,
                 K_mem: int, p_time: int = 9):
        self.lib = lib
        self.grid = grid
        self.m = m
        self.builds = 0
        max_order = max(f.alpha.order for f in lib.features)
        self.space = make_axis_test_function(m, p, grid.dx, max_order=max(max_order, 0))
        self.time = make_temporal_test_function(K_mem, grid.dt, lib.lhs_order, p=p_time)
        self.builds += 2
        # kernel samples on a circular grid of length n, sample j at index j;
        # the last axis uses the real-input transform to match rfftn
        self.axis_fft: list[np.ndarray] = []
        d = grid.ndim
        for a, n in enumerate(grid.shape):
            padded = np.zeros((self.space.max_order + 1, n))
            padded[:, :self.space.width] = self.space.samples
            transform = sfft.rfft if a == d - 1 else sfft.fft
            self.axis_fft.append(transform(padded, axis=-1))
            self.builds += 1
        # slot s (oldest = 0) sits at offset (K-1)/2 - s from the query time
        self.temporal_weights: dict = {}
        for op in lib.operators:
            self.temporal_weights[op] = self.time.derivative(op.temporal)[::-1].copy()
            self.builds += 1
        self.temporal_weights["lhs"] = self.time.derivative(lib.lhs_order)[::-1].copy()
        self.builds += 1

    @property
    def K_mem(self) -> int:
        return self.time.width

    def spectral_kernel(self, alpha: MultiIndex) -> np.ndarray:
        """Separable kernel transform matching ``rfftn`` of a field."""
        d = self.grid.ndim
        out = None
        for a in range(d):
            order = alpha.spatial[a]
            vec = self.axis_fft[a][order]
            shape = [1] * d
            shape[a] = vec.size
            vec = vec.reshape(shape)
            out = vec if out is None else out * vec
        return out


# --- features and systems -------------------------------------------------

@dataclass
class PsiSlice:
    """Spatially integrated features of one snapshot; last column is the LHS term."""

    timestamp: int
    data: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


@dataclass
class LinearSystem:
    G: np.ndarray
    b: np.ndarray
    k: float  # step index of the query time (half-integer never occurs: K_mem is odd)

    @property
    def t_index(self) -> float:
        return self.k


def _valid_slices(query: QueryGrid, m: int) -> tuple:
    # circular convolution index c + m holds the value centred at c
    return tuple(slice(qm + m, n - qm + m, s)
                 for n, qm, s in zip(query.shape, query.margin, query.stride))


def _check_margins(shape, query: QueryGrid, m: int):
    if tuple(shape) != query.shape:
        raise MarginError(f"snapshot shape {tuple(shape)} does not match query grid {query.shape}")
    if any(qm < m for qm in query.margin):
        raise MarginError(f"query margin {query.margin} smaller than test-function half-width {m}")


def spatial_features(snapshot: Field, lib: FeatureLibrary, kernels: KernelCache,
                     query: QueryGrid, method: str = "fft") -> PsiSlice:
    """Convolve every library term (and the LHS term u) with the spatial test function.

    Returns a slice of shape ``(len(query), n_columns + 1)``.
    """
    u = snapshot.values
    m = kernels.m
    _check_margins(u.shape, query, m)
    d = u.ndim
    weight = kernels.grid.dx ** d
    out = np.empty((query.size, lib.n_columns + 1))
    cols_by_power: dict[int, list[int]] = {}
    for c, f in enumerate(lib.features):
        cols_by_power.setdefault(f.power, []).append(c)
    cols_by_power.setdefault(1, [])

    if method == "fft":
        sl = _valid_slices(query, m)
        axes = tuple(range(d))
        for j, cols in cols_by_power.items():
            uj = np.ones_like(u) if j == 0 else u**j
            uhat = sfft.rfftn(uj, axes=axes)
            alphas = [lib.features[c].alpha for c in cols]
            targets = list(cols)
            if j == 1:
                alphas.append(MultiIndex((0,) * d))
                targets.append(lib.n_columns)
            spec = np.stack([uhat * kernels.spectral_kernel(a) for a in alphas])
            conv = sfft.irfftn(spec, s=u.shape, axes=tuple(range(1, d + 1)))
            vals = conv[(slice(None),) + sl].reshape(len(alphas), -1)
            out[:, targets] = vals.T
    elif method == "direct":
        for j, cols in cols_by_power.items():
            uj = np.ones_like(u) if j == 0 else u**j
            jobs = [(lib.features[c].alpha, c) for c in cols]
            if j == 1:
                jobs.append((MultiIndex((0,) * d), lib.n_columns))
            for alpha, c in jobs:
                out[:, c] = _direct_conv(uj, kernels.space, alpha, query).ravel()
    else:
        raise ValueError(f"unknown method {method!r}")
    out *= weight
    return PsiSlice(snapshot.k, out)


def _direct_conv(values: np.ndarray, tf: AxisTestFunction, alpha: MultiIndex, query: QueryGrid) -> np.ndarray:
    """Valid-region separable convolution by explicit sliding dot products."""
    arr = values
    for a in range(values.ndim):
        kern = tf.derivative(alpha.spatial[a])[::-1]
        start = query.axis_indices[a] - tf.m
        windows = sliding_window_view(arr, tf.width, axis=a)
        windows = np.take(windows, start, axis=a)
        arr = windows @ kern
    return arr


def assemble_system(buffer: RingBuffer, kernels: KernelCache, lib: FeatureLibrary,
                    out: Optional[LinearSystem] = None) -> LinearSystem:
    """Integrate buffered feature slices in time against the temporal test function."""
    K = kernels.K_mem
    if buffer.count < K:
        raise NotReady(f"{buffer.count} of {K} slices buffered")
    n = lib.n_columns
    dt = kernels.grid.dt
    first = buffer[0].data
    if out is None:
        out = LinearSystem(np.zeros((first.shape[0], n)), np.zeros(first.shape[0]), 0)
    else:
        out.G[:] = 0.0
        out.b[:] = 0.0
    ops = lib.operators
    if all(op.temporal == 0 for op in ops):
        w = kernels.temporal_weights[ops[0]]
        for s, sl in enumerate(buffer):
            out.G += (dt * w[s]) * sl.data[:, :n]
    else:
        for c, f in enumerate(lib.features):
            w = kernels.temporal_weights[f.alpha]
            for s, sl in enumerate(buffer):
                out.G[:, c] += (dt * w[s]) * sl.data[:, c]
    wl = kernels.temporal_weights["lhs"]
    for s, sl in enumerate(buffer):
        out.b += (dt * wl[s]) * sl.data[:, n]
    out.k = buffer[0].timestamp + (K - 1) // 2
    return out


# --- cost model -----------------------------------------------------------

def cost_estimates(lib: FeatureLibrary, grid: SpatialGrid, query: QueryGrid, K_mem: int,
                   C: float = 5.0) -> tuple[float, int]:
    """Flops per incoming data point and working memory (doubles) of the stream.

    ``I`` counts distinct differential operators and ``J`` distinct powers.
    """
    return cost_formula(lib.I, lib.J, grid.size, grid.ndim, query.size, K_mem, C)


def cost_formula(I: int, J: int, n_points: int, d: int, n_query: int, K_mem: int,
                 C: float = 5.0) -> tuple[float, int]:
    N = n_points ** (1.0 / d)
    flops = J * (1 + C * I * math.log2(N) + I * K_mem * n_query / n_points)
    memory = I * J * n_query * K_mem + (I + 1) * J * n_query
    return flops, int(memory)
