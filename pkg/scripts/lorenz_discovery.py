#!/usr/bin/env python3
"""Blind discovery on Lorenz: scalar x1 in, sparse latent ODE out.

Runs a small seed batch of random-init trainings with the settings that
give the best odds of a sparse bounded model, then prints the discovered
equations of the best run.
"""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from delaysindy.dynsys import builtin_system, simulate, measure
from delaysindy.hankel import build_hankel
from delaysindy.sindy import format_equations
from delaysindy import delaymodel as dm

DT = 0.002
STEPS = 10_000
WINDOW = 50
SEEDS = range(5)
OUT = sys.argv[1] if len(sys.argv) > 1 else "runs/lorenz_discovery"


def main():
    lor = builtin_system("lorenz")
    traj = simulate(lor, np.array([-8.0, 8.0, 27.0]), DT, STEPS, burn_in=1000)
    series, mu, sd = dm.standardize_series(measure(traj, 0))
    emb = build_hankel(series, WINDOW)
    weights = dm.LossWeights(lambda4=5e-2)

    best = None
    for seed in SEEDS:
        t0 = time.time()
        model = dm.assemble_model(emb, p=10, m=3, weights=weights, seed=seed)
        dm.initialize_xi(model, "random", seed=seed)
        cfg = dm.TrainConfig(epochs=170, batch_size=512, lr=2e-3,
                             refit_period=25, stlsq_threshold=24.0,
                             stlsq_normalize=True, rollout_steps=8,
                             init_mode="random", pretrain_epochs=30, seed=seed)
        model, report = dm.train(model, emb, cfg)
        ev = dm.evaluate(model, emb, horizon=1)
        print(f"seed {seed}: {time.time() - t0:5.1f}s  "
              f"active {ev.active_terms:2d}  bounded {ev.bounded}  "
              f"one-step {ev.pred_mse:.2e}  total {report.final().total:.2e}")
        score = (not ev.bounded, ev.active_terms, ev.pred_mse)
        if ev.bounded and (best is None or score < best[0]):
            best = (score, seed, model, report)

    if best is None:
        print("no seed produced a bounded model; rerun with more seeds")
        return
    _, seed, model, report = best
    print(f"\nbest run: seed {seed}")
    print(format_equations(model.sindy, var_names=("z1", "z2", "z3")))
    os.makedirs(OUT, exist_ok=True)
    dm.save_model(model, os.path.join(OUT, f"checkpoint_seed{seed}"))
    report.to_csv(os.path.join(OUT, f"report_seed{seed}.csv"))
    print(f"artifacts -> {OUT}")


if __name__ == "__main__":
    main()
