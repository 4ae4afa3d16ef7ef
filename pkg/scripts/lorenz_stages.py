#!/usr/bin/env python3
"""Difficulty ladder on Lorenz: supervised -> known equation -> perturbed -> random.

Each stage relaxes how much of the answer the trainer is given, holding the
data fixed. Short runs; intended as a quick behavioral check of the whole
pipeline rather than a converged result.
"""

import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from delaysindy.dynsys import builtin_system, simulate, measure, DEFAULT_PARAMS
from delaysindy.hankel import build_hankel
from delaysindy import delaymodel as dm

DT = 0.002
STEPS = 10_000
WINDOW = 50
EPOCHS = 60
SEED = 1


def main():
    lor = builtin_system("lorenz")
    traj = simulate(lor, np.array([-8.0, 8.0, 27.0]), DT, STEPS, burn_in=1000)
    series, mu, sd = dm.standardize_series(measure(traj, 0))
    emb = build_hankel(series, WINDOW)
    sup = (traj.states[:emb.q] - traj.states.mean(axis=0)) / traj.states.std(axis=0)

    print(f"{'stage':<16} {'secs':>6} {'recon':>10} {'z1':>10} {'total':>10} active")
    for mode in ("supervised", "known_equation", "perturbed", "random"):
        model = dm.assemble_model(emb, p=10, m=3, seed=SEED)
        kwargs = {}
        if mode in ("known_equation", "perturbed"):
            Xi, _, _ = dm.standardized_true_xi("lorenz", DEFAULT_PARAMS["lorenz"],
                                               model.sindy.library, traj)
            dm.initialize_xi(model, mode, true_xi=Xi, sigma=5.0, seed=SEED)
        else:
            dm.initialize_xi(model, mode, seed=SEED)
            if mode == "supervised":
                kwargs = {"sup_targets": sup, "lambda_sup": 5.0}
        cfg = dm.TrainConfig(epochs=EPOCHS, batch_size=512, lr=2e-3,
                             refit_period=25, rollout_steps=4, init_mode=mode,
                             pretrain_epochs=20 if mode == "random" else 0,
                             seed=SEED)
        t0 = time.time()
        model, report = dm.train(model, emb, cfg, **kwargs)
        f = report.final()
        print(f"{mode:<16} {time.time() - t0:6.1f} {f.recon:10.2e} "
              f"{f.z1:10.2e} {f.total:10.2e} {report.active_terms[-1]:6d}")


if __name__ == "__main__":
    main()
