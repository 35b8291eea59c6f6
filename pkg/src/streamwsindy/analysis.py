"""Run metrics: support recovery, coefficient error, fixed-point certificates and regret."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .sparse import objective


class UndefinedMetric(ValueError):
    pass


def tpr(w_hat, w_true) -> float:
    """TP / (TP + FP + FN) on the supports; 1 when both supports are empty."""
    s_hat = np.asarray(w_hat) != 0
    s_true = np.asarray(w_true) != 0
    if s_hat.shape != s_true.shape:
        raise ValueError("weight vectors differ in length")
    tp = np.sum(s_hat & s_true)
    fp = np.sum(s_hat & ~s_true)
    fn = np.sum(~s_hat & s_true)
    denom = tp + fp + fn
    return 1.0 if denom == 0 else float(tp / denom)


def e2(w_hat, w_true) -> float:
    w_true = np.asarray(w_true, dtype=float)
    nrm = np.linalg.norm(w_true)
    if nrm == 0:
        raise UndefinedMetric("relative error against a zero vector")
    return float(np.linalg.norm(np.asarray(w_hat, dtype=float) - w_true) / nrm)


@dataclass
class FixedPointReport:
    is_lsq_on_S: bool
    dual_max: float
    min_active: float
    satisfies_iii: bool
    lsq_residual: float = 0.0


def certify_fixed_point(w, G, b, lam, rtol: float = 1e-10, margin: float = 0.0) -> FixedPointReport:
    """Check optimality on the support and the strict dual / active-magnitude gap.

    ``margin`` demands ``dual_max < lam - margin``.
    """
    w = np.asarray(w, dtype=float)
    r = G @ w - b
    corr = G.T @ r
    S = w != 0
    scale = rtol * np.linalg.norm(G, 2) * np.linalg.norm(b)
    lsq_res = float(np.max(np.abs(corr[S]))) if S.any() else 0.0
    is_lsq = lsq_res <= scale
    dual_max = float(np.max(np.abs(corr[~S]))) if (~S).any() else 0.0
    min_active = float(np.min(np.abs(w[S]))) if S.any() else np.inf
    ok = bool(is_lsq and dual_max < lam - margin and lam <= min_active)
    return FixedPointReport(bool(is_lsq), dual_max, min_active, ok, lsq_res)


def brute_force_minimizer(G, b, lam) -> np.ndarray:
    """Global minimiser of 1/2||Gw-b||^2 + 1/2 lam^2 ||w||_0 by enumerating supports."""
    n = G.shape[1]
    best_w = np.zeros(n)
    best_F = objective(G, b, best_w, lam)
    for size in range(1, n + 1):
        for S in combinations(range(n), size):
            S = list(S)
            w = np.zeros(n)
            w[S] = np.linalg.lstsq(G[:, S], b, rcond=None)[0]
            F = objective(G, b, w, lam)
            if F < best_F:
                best_F, best_w = F, w
    return best_w


@dataclass
class RegretLedger:
    total: float = 0.0
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def averages(self) -> np.ndarray:
        cum = np.cumsum(self.records)
        return cum / np.arange(1, len(cum) + 1)


def regret_step(ledger: RegretLedger, G, b, w_hat, w_ref, lam) -> RegretLedger:
    """Append F_t(w_hat) - F_t(w_ref); ``lam`` may be a per-column vector."""
    r = objective(G, b, w_hat, lam) - objective(G, b, w_ref, lam)
    ledger.records.append(r)
    ledger.total += r
    return ledger


@dataclass
class TruthTrack:
    """True coefficients as a function of step index."""

    weights_at: Callable[[int], np.ndarray]

    def __call__(self, k: int) -> np.ndarray:
        w = self.weights_at(k)
        if not np.any(w):
            raise ValueError("true support must be non-empty")
        return w

    def support(self, k: int) -> np.ndarray:
        return np.flatnonzero(self(k))


def reach_and_hold(tpr_track, level: float = 1.0) -> Optional[int]:
    """First index at which ``tpr_track`` hits ``level`` and never leaves it, else None."""
    tpr_track = np.asarray(tpr_track)
    hit = np.flatnonzero(tpr_track >= level)
    if hit.size == 0:
        return None
    first = hit[0]
    return int(first) if np.all(tpr_track[first:] >= level) else None
