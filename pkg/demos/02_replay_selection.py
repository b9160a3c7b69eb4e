"""Decide which training submaps to keep for replay.

Per domain: embed the training set, measure its information quantity (the effective
rank of a Gaussian kernel over descriptors, divided by the set size), split
the replay budget with a temperature softmax over those values, then pick
members greedily so that they are far apart in both space and descriptor
angle. Shrinking an old set reruns the same greedy pick on its own members,
so the kept samples are always a subset of what was stored before.

Run:  python3 demos/02_replay_selection.py
"""

import numpy as np

from lifelongpr.data import SequenceSpec, desk_profiles, generate_sequence, stack_points, stack_poses
from lifelongpr.encoder import embed, init_encoder
from lifelongpr.infoq import info_quantity_from_features
from lifelongpr.selection import (Candidates, ReplayBuffer, diversity, greedy_select,
                                  random_select, update_buffer)

K_TOTAL = 64
small = [type(p)(**{**p.__dict__, "n_train": 120, "n_database": 20, "n_query": 20})
         for p in desk_profiles()]
domains = generate_sequence(SequenceSpec(small, seed=1, n_points=128))
model = init_encoder(0)
buffer = ReplayBuffer(K_TOTAL, tau=4.0, alpha=8.0, seed=0)

for d in domains:
    feats = embed(model, stack_points(d.train))
    cands = Candidates([s.id for s in d.train], feats, stack_poses(d.train))
    rec = info_quantity_from_features(feats, d.domain_id)
    d_thr = 0.25 * d.world_extent
    before = {s.domain_id: set(s.ids) for s in buffer.sets}
    buffer = update_buffer(buffer, rec, cands, d_thr, seed=d.domain_id)
    print(f"after {d.name:7s} InfoQ={rec.info_q:.3f} (rank {rec.effective_rank}/{rec.n_used})"
          f"  sizes {[len(s.ids) for s in buffer.sets]}")
    for s in buffer.sets[:-1]:
        assert set(s.ids) <= before[s.domain_id]  # forgetting keeps a subset

# greedy against random picks on the last domain
k = 16
rows = {i: r for r, i in enumerate(cands.ids)}
g_greedy = diversity([rows[i] for i in greedy_select(cands, k, 8.0, 0, d_thr)], cands, d_thr).g
g_rand = [diversity([rows[i] for i in random_select(cands, k, s)], cands, d_thr).g
          for s in range(50)]
print(f"\ndiversity g of {k} picks: greedy {g_greedy:.2f}, random mean {np.mean(g_rand):.2f}"
      f" (best of 50 random {max(g_rand):.2f})")
