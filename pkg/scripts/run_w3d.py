"""3D linear wave equation on a 32^3 periodic grid."""

import argparse
from pathlib import Path

import numpy as np

from streamwsindy.analysis import reach_and_hold
from streamwsindy.harness import ExperimentConfig, run_experiment
from streamwsindy.weakform import build_library

p = argparse.ArgumentParser()
p.add_argument("--K", type=int, default=17)
p.add_argument("--sigma", type=float, nargs="+", default=[0.0, 0.001])
p.add_argument("--trials", type=int, default=3)
p.add_argument("--n", type=int, default=32)
p.add_argument("--m", type=int, default=5)
p.add_argument("--workers", type=int, default=1)
p.add_argument("--out", default="results/w3d")
args = p.parse_args()

cfg = ExperimentConfig(problem="W3D", K_mem=args.K, sigma_nr=tuple(args.sigma), trials=args.trials,
                       n=args.n, m=args.m, workers=args.workers, out=str(Path(args.out) / f"K{args.K}"))
res = run_experiment(cfg)
lib = build_library(3, 2)
cols = [lib.index(a, 2, 1) for a in range(3)]
for s in args.sigma:
    for t in res.completed(s):
        w = t.weights[-1, cols]
        print(f"sigma={s:<6g} trial {t.trial}: hold from step {reach_and_hold(t.column('tpr'))}, "
              f"final Laplacian coefficients {np.array2string(w, precision=5)}")
