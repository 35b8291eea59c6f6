"""Time-varying wave speed in 2D: support tracking and learned c(t)."""

import argparse
from pathlib import Path

import numpy as np

from streamwsindy.analysis import reach_and_hold
from streamwsindy.harness import ExperimentConfig, run_experiment
from streamwsindy.sims import wavespeed
from streamwsindy.weakform import build_library

p = argparse.ArgumentParser()
p.add_argument("--K", type=int, default=21)
p.add_argument("--sigma", type=float, nargs="+", default=[0.0, 0.01])
p.add_argument("--trials", type=int, default=10)
p.add_argument("--workers", type=int, default=1)
p.add_argument("--out", default="results/w2d")
args = p.parse_args()

cfg = ExperimentConfig(problem="W2D", K_mem=args.K, sigma_nr=tuple(args.sigma), trials=args.trials,
                       workers=args.workers, out=str(Path(args.out) / f"K{args.K}"))
res = run_experiment(cfg)
lib = build_library(2, 2)
for s in args.sigma:
    done = res.completed(s)
    held = sum(reach_and_hold(t.column("tpr")) is not None for t in done)
    t = done[0].column("t")
    c_hat = res.wavespeed_tracks(s, lib).mean(0)
    err = np.abs(c_hat - wavespeed(t)) / wavespeed(t)
    print(f"sigma={s:<5g} held {held}/{len(done)}  median |c_hat - c|/c {np.median(err):.2e}")
