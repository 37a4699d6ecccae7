"""Estimate where a vehicle goes next from the fingerprints it reported.

A reduced version of the acceptance experiment: 1200 vehicle trips instead
of 2000 and at most 40 epochs, so it finishes in about a minute.
"""

import numpy as np

from bfftraj import bench
from bfftraj.fingerprint import BeamCodebook
from bfftraj.seq2seq import TrainConfig, constant_velocity_baseline, predict, train
from bfftraj.trajectories import PROFILES, attach_corpus, generate_corpus, split_corpus

grid = bench.desk_grid()
profile = PROFILES["vehicle"]
codebook = BeamCodebook()
scene = bench.desk_scene(grid, noise_sigma_db=6.0)

# Ten positions per trip; the first seven are observed, the last three predicted.
trips = generate_corpus(grid, profile, n=1200, L=10, seed=1, T_obs=7)
trips = attach_corpus(grid, trips, codebook, scene, seed=1)
split = split_corpus([t.id for t in trips], seed=1)
print(f"{len(trips)} trips, split {len(split.train)}/{len(split.val)}/{len(split.test)}")
print("first trip:", np.round(trips[0].positions, 1).tolist())

cfg = bench.transformer_config_for(grid, profile, 7, 3, codebook, scene)
result = train(trips, split, cfg, TrainConfig(epochs=40, seed=1), log=print)
print(f"best epoch {result.best_epoch}, {result.params.count()} parameters")

by_id = {t.id: t for t in trips}
test = [by_id[i] for i in split.test]
truth = np.stack([t.target for t in test])
tn = predict(result.params, cfg, test)
cv = constant_velocity_baseline(np.stack([t.observed for t in test]), 3)

# Straight-line extrapolation is hard to beat on straight trips; turns are
# where the fingerprints carry information about the street layout.
turns = bench.turn_mask(test)
for label, mask in (("all test trips", np.ones(len(test), bool)), ("trips with a turn", turns)):
    m_tn = bench.evaluate(tn[mask], truth[mask])
    m_cv = bench.evaluate(cv[mask], truth[mask])
    print(f"{label:18s} n={m_tn.N:3d}  transformer {m_tn.rmse_m:6.2f} m  constant velocity {m_cv.rmse_m:6.2f} m  "
          f"(p95 {m_tn.p95_rmse_m:.1f} vs {m_cv.p95_rmse_m:.1f})")

k = int(np.flatnonzero(turns)[0])
print("a turning trip, truth vs estimate:")
for y, yh, c in zip(truth[k], tn[k], cv[k]):
    print(f"  truth {np.round(y, 1)}  transformer {np.round(yh, 1)}  constant velocity {np.round(c, 1)}")
