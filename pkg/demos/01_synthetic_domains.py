"""Generate the four-domain desk sequence and look at what makes the domains differ.

Each domain is a synthetic world of boxes and cylinders scanned along a route.
The domains disagree about sensor noise, occlusion, structure height and the
height band where transient clutter lives, so a descriptor tuned to one
domain transfers badly to the next.

Run:  python3 demos/01_synthetic_domains.py
"""

import numpy as np
from scipy.spatial import cKDTree

from lifelongpr.data import SequenceSpec, desk_profiles, generate_sequence


def chamfer(a, b):
    return float(cKDTree(b).query(a)[0].mean() + cKDTree(a).query(b)[0].mean())


profiles = desk_profiles()
# smaller splits than the acceptance runs keep this demo to a few seconds
small = [type(p)(**{**p.__dict__, "n_train": 60, "n_database": 30, "n_query": 30})
         for p in profiles]
domains = generate_sequence(SequenceSpec(small, seed=0, n_points=256))

print(f"{'domain':8s} {'train':>5s} {'db':>4s} {'query':>5s} {'z-spread':>8s} {'noise':>6s}")
for p, d in zip(small, domains):
    z = np.concatenate([s.points[:, 2] for s in d.train])
    print(f"{d.name:8s} {len(d.train):5d} {len(d.database):4d} {len(d.query):5d} "
          f"{z.std():8.2f} {p.noise_sigma:6.2f}")

# a query and its database match look alike; submaps from different domains do not
print("\nmean Chamfer distance between submaps (lower is more similar)")
for d in domains:
    q, db = d.query[0], d.database
    near = min(db, key=lambda s: np.hypot(*(s.pose - q.pose)))
    others = [o.train[0] for o in domains if o.domain_id != d.domain_id]
    cross = np.mean([chamfer(q.points, o.points) for o in others])
    print(f"  {d.name:8s} query vs nearest place {chamfer(q.points, near.points):6.2f}"
          f"   vs other domains {cross:6.2f}")
