"""Hard-thresholded proximal gradient steps, the threshold update rule and batch MSTLS."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


class DegenerateDataError(ValueError):
    pass


class LstsqCounter:
    """Counts least-squares solves so streaming code can prove it performs none."""

    def __init__(self):
        self.calls = 0

    def __call__(self, A: np.ndarray, b: np.ndarray) -> np.ndarray:
        self.calls += 1
        if A.shape[1] == 0:
            return np.zeros(0)
        # rcond matches eps * max(rows, cols) * largest singular value
        return np.linalg.lstsq(A, b, rcond=None)[0]


lstsq = LstsqCounter()


# --- basic pieces ---------------------------------------------------------

def hard_threshold(w, lam) -> np.ndarray:
    """Keep ``w_k`` when ``|w_k| >= lam_k``, zero it otherwise."""
    w = np.asarray(w, dtype=float)
    return np.where(np.abs(w) >= lam, w, 0.0)


def support(w) -> np.ndarray:
    return np.flatnonzero(np.asarray(w) != 0)


def objective(G, b, w, lam) -> float:
    """1/2 ||Gw - b||^2 + 1/2 sum_k lam_k^2 [w_k != 0]."""
    r = G @ w - b
    lam = np.broadcast_to(np.asarray(lam, dtype=float), np.shape(w))
    return 0.5 * float(r @ r) + 0.5 * float(np.sum(lam[np.asarray(w) != 0] ** 2))


def spectral_norm(A: np.ndarray, iters: int = 20, tol: float = 1e-8, seed: int = 0) -> float:
    """Largest singular value of ``A`` by power iteration on ``A^T A``."""
    if A.size == 0:
        return 0.0
    v = np.random.default_rng(seed).standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        Av = A @ v
        u = A.T @ Av
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        new = np.sqrt(nu)
        v = u / nu
        if abs(new - sigma) <= tol * new:
            sigma = new
            break
        sigma = new
    return float(np.linalg.norm(A @ v))


def step_size(G: np.ndarray, S, mode: str = "estimate", iters: int = 20, tol: float = 1e-8) -> float:
    """Gradient step for support ``S``.

    ``exact``: 1 / ||G^T G_S||_2.  ``estimate`` (unit-norm columns only):
    1 / sqrt(|S| * n).
    """
    S = np.asarray(S, dtype=int)
    if S.size == 0:
        raise ValueError("step size undefined for an empty support")
    if mode == "exact":
        return 1.0 / spectral_norm(G.T @ G[:, S], iters=iters, tol=tol)
    if mode == "estimate":
        return 1.0 / np.sqrt(S.size * G.shape[1])
    raise ValueError(f"unknown step-size mode {mode!r}")


# --- column scaling -------------------------------------------------------

@dataclass
class ScaledSystem:
    G: np.ndarray
    b: np.ndarray
    scale: np.ndarray      # diagonal of M; 0 marks excluded (zero) columns
    factors: np.ndarray    # max(1, ||b|| M_kk): per-column threshold multiplier

    @property
    def G_scaled(self) -> np.ndarray:
        return self.G * self.scale

    @property
    def active_columns(self) -> np.ndarray:
        return self.scale > 0

    def thresholds(self, lam: float) -> np.ndarray:
        return lam * self.factors


def scale_system(G: np.ndarray, b: np.ndarray, zero_tol: float = 1e-300) -> ScaledSystem:
    norms = np.linalg.norm(G, axis=0)
    scale = np.zeros_like(norms)
    ok = norms > zero_tol
    scale[ok] = 1.0 / norms[ok]
    factors = np.maximum(1.0, np.linalg.norm(b) * scale)
    return ScaledSystem(G, b, scale, factors)


THRESHOLD_MODES = ("unit", "step")


def prox_grad_step(w: np.ndarray, sys: ScaledSystem, lam: float, S=None,
                   alpha: Optional[float] = None, mode: str = "exact",
                   threshold: str = "unit") -> np.ndarray:
    """One thresholded gradient step written in unscaled coordinates.

    w+ = H_{c lam_vec}(w - alpha M^2 G^T (G w - b)), with c = 1 for ``unit``
    thresholds and c = alpha for ``step`` thresholds.  ``unit`` keeps exactly the
    terms with |w_k| >= lam and ||G_k w_k|| >= lam ||b||.
    """
    if threshold not in THRESHOLD_MODES:
        raise ValueError(f"unknown threshold mode {threshold!r}")
    S = support(w) if S is None else np.asarray(S, dtype=int)
    if alpha is None:
        if S.size == 0:
            raise ValueError("empty support: step size undefined")
        alpha = step_size(sys.G_scaled, S, mode=mode)
    grad = sys.G.T @ (sys.G @ w - sys.b)
    z = w - alpha * sys.scale**2 * grad
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite gradient step")
    cut = sys.thresholds(lam) if threshold == "unit" else alpha * sys.thresholds(lam)
    out = hard_threshold(z, cut)
    out[~sys.active_columns] = 0.0
    return out


def plain_prox_step(w: np.ndarray, G: np.ndarray, b: np.ndarray, lam, alpha: float = 1.0) -> np.ndarray:
    """Unscaled iteration H_{alpha lam}(w - alpha G^T (G w - b))."""
    z = w - alpha * (G.T @ (G @ w - b))
    if not np.all(np.isfinite(z)):
        raise DivergenceError("non-finite gradient step")
    return hard_threshold(z, alpha * np.asarray(lam, dtype=float))


# --- threshold policy -----------------------------------------------------

@dataclass(frozen=True)
class ThresholdPolicy:
    dlam: float = 0.1
    lam_max: float = 0.1
    lam0: float = 1e-4

    def __post_init__(self):
        if not 0 < self.dlam < 1:
            raise ValueError("dlam must lie in (0, 1)")
        if not 0 < self.lam0 <= self.lam_max:
            raise ValueError("need 0 < lam0 <= lam_max")


def update_lambda(policy: ThresholdPolicy, lam: float, F_new: float, F_old: float,
                  S_new, S_old) -> float:
    S_new, S_old = set(np.asarray(S_new).tolist()), set(np.asarray(S_old).tolist())
    increased = F_new > F_old
    if increased and S_new < S_old:
        return (1 - policy.dlam) * lam
    if (increased and S_old < S_new) or (not increased and S_new == S_old):
        return (1 - policy.dlam) * lam + policy.lam_max * policy.dlam
    return lam


# --- online state ---------------------------------------------------------

@dataclass
class WeightState:
    w: np.ndarray
    lam: float
    F_prev_resid: float        # 1/2 ||G w - b||^2 on the system that produced w
    factors_prev: np.ndarray   # threshold multipliers of that system
    step: int = 0
    rejected: int = 0

    @property
    def S(self) -> np.ndarray:
        return support(self.w)


@dataclass
class StepResult:
    w: np.ndarray
    lam: float
    F_new: float
    F_old: float
    accepted: bool


def online_update(state: WeightState, G: np.ndarray, b: np.ndarray, policy: ThresholdPolicy,
                  mode: str = "exact", threshold: str = "unit") -> StepResult:
    """One proximal step on the new system followed by the threshold update.

    Both objective values use the current threshold ``state.lam``; the old one is
    evaluated on the previous system from stored pieces.
    """
    sys = scale_system(G, b)
    S_old = state.S
    lam = state.lam
    F_old = state.F_prev_resid + 0.5 * float(np.sum((lam * state.factors_prev[S_old]) ** 2))
    if S_old.size == 0:
        w_new = state.w.copy()
    else:
        w_new = prox_grad_step(state.w, sys, lam, S=S_old, mode=mode, threshold=threshold)
    S_new = support(w_new)
    if S_new.size == 0:
        # nothing survives: keep the old weights and relax the threshold
        resid = G @ state.w - b
        state.F_prev_resid = 0.5 * float(resid @ resid)
        state.factors_prev = sys.factors
        state.lam = (1 - policy.dlam) * lam
        state.step += 1
        state.rejected += 1
        log.debug("step %d rejected: empty support", state.step)
        F_cur = objective(G, b, state.w, sys.thresholds(lam))
        return StepResult(state.w, state.lam, F_cur, F_old, False)
    resid = G @ w_new - b
    F_resid = 0.5 * float(resid @ resid)
    F_new = F_resid + 0.5 * float(np.sum((lam * sys.factors[S_new]) ** 2))
    state.lam = update_lambda(policy, lam, F_new, F_old, S_new, S_old)
    state.w = w_new
    state.F_prev_resid = F_resid
    state.factors_prev = sys.factors
    state.step += 1
    return StepResult(w_new, state.lam, F_new, F_old, True)


def initial_guess(G: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares solution; the only solve in a streaming run."""
    return lstsq(G, b)


def init_state(G: np.ndarray, b: np.ndarray, policy: ThresholdPolicy) -> WeightState:
    w0 = initial_guess(G, b)
    r = G @ w0 - b
    return WeightState(w=w0, lam=policy.lam0, F_prev_resid=0.5 * float(r @ r),
                       factors_prev=scale_system(G, b).factors)


# --- batch MSTLS ----------------------------------------------------------

def mstls_bounds(G: np.ndarray, b: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    ratio = np.linalg.norm(b) / np.linalg.norm(G, axis=0)
    return lam * np.maximum(1.0, ratio), np.minimum(1.0, ratio) / lam


def mstls(G: np.ndarray, b: np.ndarray, lam: float, max_iter: Optional[int] = None) -> np.ndarray:
    """Sequential thresholding with dominant-balance bounds, least squares in between."""
    n = G.shape[1]
    max_iter = n if max_iter is None else max_iter
    lower, upper = mstls_bounds(G, b, lam)
    w = lstsq(G, b)
    keep = None
    for _ in range(max_iter):
        mag = np.abs(w)
        new_keep = np.flatnonzero((lower <= mag) & (mag <= upper))
        if new_keep.size == 0:
            log.debug("mstls: empty support at lam=%g", lam)
            return np.zeros(n)
        if keep is not None and np.array_equal(new_keep, keep):
            break
        keep = new_keep
        w = np.zeros(n)
        w[keep] = lstsq(G[:, keep], b)
    return w


def mstls_loss(G: np.ndarray, w: np.ndarray, w0: np.ndarray) -> float:
    denom = np.linalg.norm(G @ w0)
    if denom == 0:
        raise DegenerateDataError("least-squares fit is identically zero")
    return float(np.linalg.norm(G @ (w - w0)) / denom + np.count_nonzero(w) / G.shape[1])


def default_lambda_grid(n: int = 50, lo: float = 1e-4, hi: float = 1.0) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


def mstls_grid_search(G: np.ndarray, b: np.ndarray, lambdas: Optional[Sequence[float]] = None
                      ) -> tuple[float, np.ndarray]:
    """Return the smallest threshold minimising the MSTLS loss, and its weights."""
    lambdas = default_lambda_grid() if lambdas is None else np.asarray(lambdas, dtype=float)
    if lambdas.size == 0:
        raise ValueError("empty lambda grid")
    w0 = lstsq(G, b)
    if np.linalg.norm(G @ w0) == 0:
        raise DegenerateDataError("least-squares fit is identically zero")
    best = None
    for lam in lambdas:
        w = mstls(G, b, lam)
        loss = mstls_loss(G, w, w0)
        if best is None or loss < best[0]:
            best = (loss, lam, w)
    return float(best[1]), best[2]
