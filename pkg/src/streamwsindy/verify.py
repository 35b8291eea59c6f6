"""Fast self-checks behind ``streamwsindy verify``.

Each check returns (ok, detail).  The full test-suite lives in tests/; these are
the cheap invariants worth running on a fresh install.
"""

from __future__ import annotations

import numpy as np

from . import sparse
from .analysis import certify_fixed_point
from .harness import ExperimentConfig, offline_phase
from .sims import preset, simulate, true_weights
from .weakform import KernelCache, build_library, make_query_grid, spatial_features


def check_library_sizes():
    sizes = [build_library(d, 1).n_columns for d in (1, 2, 3)]
    return sizes == [21, 37, 53], f"columns {sizes}"


def check_prox(rng):
    z = rng.uniform(-2, 2, 10_000)
    lam = rng.uniform(0.1, 1.5, z.size)
    z[:50] = lam[:50] * np.sign(rng.standard_normal(50))
    keep = 0.5 * lam**2 <= 0.5 * z**2   # cost of keeping <= cost of zeroing
    brute = np.where(keep, z, 0.0)
    ok = np.array_equal(sparse.hard_threshold(z, lam), brute)
    return ok, "10000 scalars"


def check_fixed_points(rng, trials: int = 50):
    bad = 0
    for _ in range(trials):
        G = rng.standard_normal((10, 6))
        G /= 1.01 * np.linalg.norm(G, 2)
        b = rng.standard_normal(10)
        lam = rng.uniform(0.05, 0.3)
        w = np.linalg.lstsq(G, b, rcond=None)[0]
        for _ in range(100_000):
            w_new = sparse.plain_prox_step(w, G, b, lam)
            # iterates may cycle in the last ulp
            done = np.array_equal(w_new != 0, w != 0) and \
                np.max(np.abs(w_new - w)) <= 8 * np.finfo(float).eps * max(1.0, np.max(np.abs(w)))
            w = w_new
            if done:
                break
        if not certify_fixed_point(w, G, b, lam, rtol=1e-10).satisfies_iii:
            bad += 1
    return bad == 0, f"{trials - bad}/{trials} converged points certified"


def check_fft_direct():
    sim = preset("KS", steps=3)
    f = next(iter(simulate(sim)))
    lib = build_library(1, 1)
    kc = KernelCache(lib, f.grid, 21, 11, 5)
    q = make_query_grid(f.grid.shape, 21)
    a = spatial_features(f, lib, kc, q, method="fft").data
    b = spatial_features(f, lib, kc, q, method="direct").data
    err = float(np.max(np.abs(a - b)) / np.max(np.abs(b)))
    return err < 1e-12, f"relative difference {err:.1e}"


def check_ks_residual():
    cfg = ExperimentConfig(problem="KS", K_mem=21, steps=40)
    state, _ = offline_phase(cfg, iter(simulate(cfg.sim_config())), problem="KS")
    G, b = state.system.G, state.system.b
    w = true_weights("KS", state.lib, 0.0)
    r = float(np.linalg.norm(G @ w - b) / np.linalg.norm(b))
    return r < 1e-3, f"relative residual {r:.1e}"


def run_checks(quick: bool = True) -> bool:
    rng = np.random.default_rng(0)
    checks = [
        ("library sizes 21/37/53", check_library_sizes),
        ("hard threshold = scalar prox", lambda: check_prox(rng)),
        ("prox fixed points satisfy optimality gap", lambda: check_fixed_points(rng)),
        ("fft convolution = direct sum", check_fft_direct),
    ]
    if not quick:
        checks.append(("KS weak-form residual", check_ks_residual))
    all_ok = True
    for name, fn in checks:
        ok, detail = fn()
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok

