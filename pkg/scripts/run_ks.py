"""KS sweep over memory sizes and noise ratios; writes CSVs under results/ks."""

import argparse
from pathlib import Path

from streamwsindy.analysis import reach_and_hold
from streamwsindy.harness import ExperimentConfig, run_experiment

p = argparse.ArgumentParser()
p.add_argument("--K", type=int, nargs="+", default=[5, 13, 21])
p.add_argument("--sigma", type=float, nargs="+", default=[0.0, 0.001, 0.01])
p.add_argument("--trials", type=int, default=20)
p.add_argument("--workers", type=int, default=1)
p.add_argument("--out", default="results/ks")
args = p.parse_args()

for K in args.K:
    cfg = ExperimentConfig(problem="KS", K_mem=K, sigma_nr=tuple(args.sigma), trials=args.trials,
                           workers=args.workers, out=str(Path(args.out) / f"K{K}"))
    res = run_experiment(cfg)
    for s in args.sigma:
        done = res.completed(s)
        held = sum(reach_and_hold(t.column("tpr")) is not None for t in done)
        e2_end = res.mean_track(s, "e2")[-1]
        print(f"K={K:2d} sigma={s:<6g} held {held}/{len(done)}  mean final E2 {e2_end:.2e}")
