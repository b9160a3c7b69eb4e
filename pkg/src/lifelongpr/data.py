"""Submaps, domain datasets and the synthetic multi-domain world generator.

Each domain is a 2D landmark map (cylinders and boxes extruded vertically)
observed by a simulated range sensor along a lawnmower route. The route is
driven twice; the train split takes both passes over some route segments,
while the held-out segments supply the database (first pass) and the queries
(second pass). Sensor profiles (noise, occlusion dropout, landmark density,
height and size statistics) differ from domain to domain, which is what
produces the domain gap.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

SUBMAP_MAGIC = b"LPRS"
SUBMAP_VERSION = 1
_HEADER = struct.Struct("<4sHIIdd")

SEQUENCE_MANIFEST = "sequence.json"


class DataError(ValueError):
    """Raised for invalid generator profiles or inconsistent datasets."""


@dataclass
class Submap:
    id: int
    points: np.ndarray  # (n_points, 3) float32, centred
    pose: np.ndarray  # (2,) float64 world position
    domain_id: int


@dataclass
class DomainDataset:
    domain_id: int
    name: str
    train: list[Submap]
    database: list[Submap]
    query: list[Submap]
    positive_radius: float
    negative_radius: float
    eval_radius: float
    world_extent: float

    def split(self, role: str) -> list[Submap]:
        if role not in ("train", "database", "query"):
            raise KeyError(role)
        return getattr(self, role)

    def all_submaps(self) -> list[Submap]:
        return self.train + self.database + self.query

    def by_id(self) -> dict[int, Submap]:
        return {s.id: s for s in self.all_submaps()}


@dataclass
class DomainProfile:
    """Sensor and world parameters for one synthetic domain."""

    name: str = "domain"
    world_extent: float = 100.0
    landmark_density: float = 0.02  # landmarks per unit area
    noise_sigma: float = 0.05
    dropout: float = 0.1  # per-landmark occlusion probability
    height_scale: float = 1.0
    size_scale: float = 1.0
    box_fraction: float = 0.5
    sensor_radius: float = 12.0
    surface_density: float = 6.0  # world points per unit of surface area
    row_spacing: float = 20.0
    n_train: int = 400
    n_database: int = 100
    n_query: int = 100
    pose_jitter: float = 0.5
    positive_radius: float = 3.0
    negative_radius: float = 8.0
    eval_radius: float = 3.0
    tilt_deg: float = 0.0  # sensor mounting pitch
    roll_deg: float = 0.0
    frame_scale: float = 1.0
    clutter_fraction: float = 0.0  # share of points from transient objects
    clutter_blobs: int = 6
    clutter_z_min: float = 0.0
    clutter_z_max: float = 1.0

    def validate(self) -> None:
        checks = {
            "world_extent": self.world_extent > 0,
            "landmark_density": self.landmark_density > 0,
            "noise_sigma": self.noise_sigma >= 0,
            "dropout": 0 <= self.dropout < 1,
            "height_scale": self.height_scale > 0,
            "size_scale": self.size_scale > 0,
            "box_fraction": 0 <= self.box_fraction <= 1,
            "sensor_radius": self.sensor_radius > 0,
            "surface_density": self.surface_density > 0,
            "row_spacing": 0 < self.row_spacing <= self.world_extent,
            "n_train": self.n_train >= 2 and self.n_train % 2 == 0,
            "n_database": self.n_database >= 1,
            "n_query": self.n_query == self.n_database,
            "pose_jitter": self.pose_jitter >= 0,
            "positive_radius": 0 < self.positive_radius < self.negative_radius,
            "eval_radius": self.eval_radius > 2 * self.pose_jitter,
            "frame_scale": self.frame_scale > 0,
            "clutter_fraction": 0 <= self.clutter_fraction < 1,
            "clutter_blobs": self.clutter_blobs >= 1,
            "clutter_z_max": self.clutter_z_max >= self.clutter_z_min,
        }
        for name, ok in checks.items():
            if not ok:
                raise DataError(f"invalid profile field {name!r}={getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "DomainProfile":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown profile field {sorted(unknown)[0]!r}")
        try:
            prof = cls(**raw)
        except TypeError as exc:
            raise DataError(str(exc)) from exc
        for f in fields(cls):
            val = getattr(prof, f.name)
            if f.name == "name":
                if not isinstance(val, str):
                    raise DataError("invalid profile field 'name'")
            elif isinstance(val, bool) or not isinstance(val, (int, float)):
                raise DataError(f"invalid profile field {f.name!r}={val!r}")
        prof.validate()
        return prof


@dataclass
class SequenceSpec:
    profiles: list[DomainProfile]
    seed: int = 0
    n_points: int = 256

    def __post_init__(self):
        if len(self.profiles) < 1:
            raise DataError("a sequence needs at least one domain")
        if self.n_points < 8:
            raise DataError(f"invalid field 'n_points'={self.n_points!r}")

    @property
    def T(self) -> int:
        return len(self.profiles)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "n_points": self.n_points,
                "profiles": [asdict(p) for p in self.profiles]}

    @classmethod
    def from_dict(cls, raw: dict) -> "SequenceSpec":
        if "profiles" not in raw or not isinstance(raw["profiles"], list):
            raise DataError("missing field 'profiles'")
        profs = [DomainProfile.from_dict(p) for p in raw["profiles"]]
        seed = raw.get("seed", 0)
        n_points = raw.get("n_points", 256)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise DataError(f"invalid field 'seed'={seed!r}")
        if not isinstance(n_points, int) or isinstance(n_points, bool):
            raise DataError(f"invalid field 'n_points'={n_points!r}")
        return cls(profs, seed=seed, n_points=n_points)


def desk_profiles() -> list[DomainProfile]:
    """The default four-domain desk-scale sequence.

    Consecutive domains disagree about which height band carries static
    structure and which is transient clutter, so features tuned to one domain
    transfer poorly to the others.
    """
    return [
        DomainProfile(name="urban", landmark_density=0.02, noise_sigma=0.02, dropout=0.05,
                      height_scale=1.0, box_fraction=0.7, clutter_fraction=0.3,
                      clutter_z_min=0.0, clutter_z_max=1.0),
        DomainProfile(name="campus", landmark_density=0.03, noise_sigma=0.04, dropout=0.1,
                      height_scale=0.3, size_scale=0.8, box_fraction=0.3,
                      clutter_fraction=0.3, clutter_z_min=2.0, clutter_z_max=5.0),
        DomainProfile(name="helmet", landmark_density=0.025, noise_sigma=0.05, dropout=0.15,
                      height_scale=1.5, box_fraction=0.5, clutter_fraction=0.3,
                      clutter_z_min=0.0, clutter_z_max=4.0, tilt_deg=35.0),
        DomainProfile(name="forest", landmark_density=0.045, noise_sigma=0.06, dropout=0.2,
                      height_scale=2.0, size_scale=0.5, box_fraction=0.0,
                      clutter_fraction=0.35, clutter_z_min=5.0, clutter_z_max=10.0,
                      frame_scale=0.8),
    ]


def pairwise_pose_distance(a: Submap, b: Submap) -> float:
    """Planar Euclidean distance between the poses of two submaps."""
    return float(math.hypot(a.pose[0] - b.pose[0], a.pose[1] - b.pose[1]))


def pose_distance_matrix(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    diff = pa[:, None, :] - pb[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


# -- world model --------------------------------------------------------------


@dataclass
class _World:
    points: np.ndarray  # (P, 3) world coordinates
    owner: np.ndarray  # (P,) landmark index per point
    keys: np.ndarray  # (P,) fixed sampling priority
    n_landmarks: int
    tree: cKDTree = field(init=False, repr=False)

    def __post_init__(self):
        self.tree = cKDTree(self.points[:, :2])


def _build_world(prof: DomainProfile, rng: np.random.Generator) -> _World:
    W = prof.world_extent
    margin = prof.sensor_radius
    area = (W + 2 * margin) ** 2
    n_lm = max(1, rng.poisson(prof.landmark_density * area))
    centres = rng.uniform(-margin, W + margin, size=(n_lm, 2))
    is_box = rng.random(n_lm) < prof.box_fraction
    heights = rng.uniform(1.0, 6.0, n_lm) * prof.height_scale
    pts, owner = [], []
    for i in range(n_lm):
        h = heights[i]
        if is_box[i]:
            hx, hy = rng.uniform(0.5, 2.5, 2) * prof.size_scale
            yaw = rng.uniform(0, np.pi)
            perim = 4 * (hx + hy)
            n = max(4, int(perim * h * prof.surface_density))
            s = rng.uniform(0, perim, n)
            # walk the rectangle outline
            side = np.minimum((s // (perim / 4)).astype(int), 3)
            u = (s % (perim / 4)) / (perim / 4) * 2 - 1
            local = np.empty((n, 2))
            local[side == 0] = np.c_[u[side == 0] * hx, np.full((side == 0).sum(), -hy)]
            local[side == 1] = np.c_[np.full((side == 1).sum(), hx), u[side == 1] * hy]
            local[side == 2] = np.c_[-u[side == 2] * hx, np.full((side == 2).sum(), hy)]
            local[side == 3] = np.c_[np.full((side == 3).sum(), -hx), -u[side == 3] * hy]
            c, sn = np.cos(yaw), np.sin(yaw)
            xy = local @ np.array([[c, sn], [-sn, c]]) + centres[i]
        else:
            r = rng.uniform(0.3, 2.0) * prof.size_scale
            n = max(4, int(2 * np.pi * r * h * prof.surface_density))
            ang = rng.uniform(0, 2 * np.pi, n)
            xy = centres[i] + r * np.c_[np.cos(ang), np.sin(ang)]
        z = rng.uniform(0, h, n)
        pts.append(np.c_[xy, z])
        owner.append(np.full(n, i))
    points = np.concatenate(pts)
    owner_arr = np.concatenate(owner)
    return _World(points, owner_arr, rng.random(len(points)), n_lm)


def _route(prof: DomainProfile, n_places: int) -> np.ndarray:
    """Equally spaced poses along a lawnmower route covering the world."""
    W = prof.world_extent
    rows = np.arange(0.0, W + 1e-9, prof.row_spacing)
    verts = []
    for k, y in enumerate(rows):
        xs = (0.0, W) if k % 2 == 0 else (W, 0.0)
        verts += [(xs[0], y), (xs[1], y)]
    verts = np.asarray(verts)
    seg = np.diff(verts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.r_[0.0, np.cumsum(seg_len)]
    s = np.linspace(0.0, cum[-1], n_places, endpoint=False)
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    return verts[idx] + seg[idx] * frac[:, None]


def _observe(world: _World, pose: np.ndarray, prof: DomainProfile, n_points: int,
             rng: np.random.Generator) -> np.ndarray:
    visible = np.sort(np.asarray(world.tree.query_ball_point(pose, prof.sensor_radius), int))
    if prof.dropout > 0 and len(visible):
        lms = np.unique(world.owner[visible])
        gone = lms[rng.random(len(lms)) < prof.dropout]
        visible = visible[~np.isin(world.owner[visible], gone)]
    if len(visible) == 0:
        raise DataError("empty submap; increase landmark_density or sensor_radius")
    n_clutter = int(round(prof.clutter_fraction * n_points))
    n_static = n_points - n_clutter
    if len(visible) >= n_static:
        chosen = visible[np.argsort(world.keys[visible], kind="stable")[:n_static]]
    else:
        extra = rng.choice(visible, n_static - len(visible), replace=True)
        chosen = np.r_[visible, extra]
    pts = world.points[chosen].copy()
    pts[:, :2] -= pose
    if n_clutter:
        pts = np.r_[pts, _clutter(prof, n_clutter, rng)]
    if prof.noise_sigma > 0:
        pts += rng.normal(0.0, prof.noise_sigma, pts.shape)
    pts /= prof.sensor_radius
    pts -= pts.mean(0)
    if prof.tilt_deg or prof.roll_deg or prof.frame_scale != 1.0:
        pts = pts @ _mount_matrix(prof).T
    pts = pts[rng.permutation(n_points)]
    out = pts.astype(np.float32)
    # float32 rounding can leave a tiny residual offset
    out -= out.mean(0, dtype=np.float64).astype(np.float32)
    return out


def _clutter(prof: DomainProfile, n: int, rng: np.random.Generator) -> np.ndarray:
    """Transient objects around the sensor, in sensor-centred coordinates."""
    r = prof.sensor_radius * np.sqrt(rng.random(prof.clutter_blobs))
    a = rng.uniform(0, 2 * np.pi, prof.clutter_blobs)
    centres = np.c_[r * np.cos(a), r * np.sin(a)]
    owner = rng.integers(0, prof.clutter_blobs, n)
    xy = centres[owner] + rng.normal(0, 0.5 * prof.size_scale, (n, 2))
    z = rng.uniform(prof.clutter_z_min, prof.clutter_z_max, n)
    return np.c_[xy, z]


def _mount_matrix(prof: DomainProfile) -> np.ndarray:
    a, b = np.deg2rad(prof.tilt_deg), np.deg2rad(prof.roll_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    return prof.frame_scale * (ry @ rx)


def _jitter(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    a = rng.uniform(0, 2 * np.pi, n)
    return np.c_[r * np.cos(a), r * np.sin(a)]


def generate_domain(prof: DomainProfile, seed: int, domain_id: int = 0,
                    n_points: int = 256, id_offset: int = 0,
                    max_retries: int = 5) -> DomainDataset:
    """Sample one synthetic domain.

    The world map and the route depend only on ``seed``; sensor noise and
    occlusion are drawn from a separate stream, so two profiles that share a
    seed observe the same places.
    """
    prof.validate()
    for attempt in range(max_retries):
        ss = np.random.SeedSequence([seed, attempt])
        world_ss, sensor_ss = ss.spawn(2)
        wrng = np.random.default_rng(world_ss)
        srng = np.random.default_rng(sensor_ss)
        world = _build_world(prof, wrng)
        n_train_places = prof.n_train // 2
        n_test = prof.n_database
        places = _route(prof, n_train_places + n_test)
        # contiguous blocks: two train blocks, then one test block
        n_total = len(places)
        block = max(1, n_total // 12)
        is_test = np.zeros(n_total, bool)
        cand = [b for b in range(0, n_total, block) if (b // block) % 3 == 2]
        for b in cand:
            is_test[b:b + block] = True
        order = np.flatnonzero(is_test)
        if len(order) >= n_test:
            is_test[:] = False
            is_test[order[:n_test]] = True
        else:
            rest = np.flatnonzero(~is_test)
            is_test[rest[len(rest) - (n_test - len(order)):]] = True
        train_places = places[~is_test]
        test_places = places[is_test]

        next_id = id_offset
        def make(poses_list):
            nonlocal next_id
            out = []
            for p in poses_list:
                pts = _observe(world, p, prof, n_points, srng)
                out.append(Submap(next_id, pts, np.asarray(p, np.float64), domain_id))
                next_id += 1
            return out
        try:
            train = make(np.r_[train_places + _jitter(wrng, len(train_places), prof.pose_jitter),
                               train_places + _jitter(wrng, len(train_places), prof.pose_jitter)])
            database = make(test_places + _jitter(wrng, n_test, prof.pose_jitter))
            query = make(test_places + _jitter(wrng, n_test, prof.pose_jitter))
        except DataError:
            continue
        ds = DomainDataset(domain_id, prof.name, train, database, query,
                           prof.positive_radius, prof.negative_radius, prof.eval_radius,
                           prof.world_extent)
        if _queries_covered(ds):
            return ds
    raise DataError(f"could not generate domain {prof.name!r} with a true positive "
                    f"for every query after {max_retries} attempts")


def _queries_covered(ds: DomainDataset) -> bool:
    qp = np.stack([s.pose for s in ds.query])
    dp = np.stack([s.pose for s in ds.database])
    return bool((pose_distance_matrix(qp, dp).min(1) <= ds.eval_radius).all())


def generate_sequence(spec: SequenceSpec) -> list[DomainDataset]:
    out = []
    offset = 0
    for t, prof in enumerate(spec.profiles):
        dom_seed = int(np.random.SeedSequence([spec.seed, t]).generate_state(1)[0])
        ds = generate_domain(prof, dom_seed, domain_id=t, n_points=spec.n_points,
                             id_offset=offset)
        offset += len(ds.all_submaps())
        out.append(ds)
    return out


def stack_points(submaps: list[Submap]) -> np.ndarray:
    return np.stack([s.points for s in submaps])


def stack_poses(submaps: list[Submap]) -> np.ndarray:
    return np.stack([s.pose for s in submaps])


# -- on-disk format -----------------------------------------------------------


def write_submap(path: str | os.PathLike, sm: Submap) -> None:
    pts = np.ascontiguousarray(sm.points, dtype="<f4")
    header = _HEADER.pack(SUBMAP_MAGIC, SUBMAP_VERSION, pts.shape[0], sm.domain_id,
                          float(sm.pose[0]), float(sm.pose[1]))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pts.tobytes())


def read_submap(path: str | os.PathLike, sid: int) -> Submap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, dom, px, py = _HEADER.unpack_from(raw)
    if magic != SUBMAP_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != SUBMAP_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    body = raw[_HEADER.size:]
    if len(body) != n * 12:
        raise DataError(f"{path}: expected {n * 12} payload bytes, got {len(body)}")
    pts = np.frombuffer(body, dtype="<f4").reshape(n, 3).astype(np.float32)
    return Submap(sid, pts, np.array([px, py]), dom)


def save_sequence(root: str | os.PathLike, spec: SequenceSpec,
                  domains: list[DomainDataset]) -> Path:
    root = Path(root)
    (root / "submaps").mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in domains:
        splits = {}
        for role in ("train", "database", "query"):
            ids = []
            for sm in ds.split(role):
                write_submap(root / "submaps" / f"{sm.id:07d}.bin", sm)
                ids.append(sm.id)
            splits[role] = ids
        dom_manifest = {
            "domain_id": ds.domain_id, "name": ds.name,
            "positive_radius": ds.positive_radius, "negative_radius": ds.negative_radius,
            "eval_radius": ds.eval_radius, "world_extent": ds.world_extent,
            "splits": splits,
        }
        fname = f"domain_{ds.domain_id:02d}.json"
        (root / fname).write_text(json.dumps(dom_manifest, indent=1))
        entries.append(fname)
    seq = {"format": "lifelongpr-sequence/1", "spec": spec.to_dict(), "domains": entries}
    (root / SEQUENCE_MANIFEST).write_text(json.dumps(seq, indent=1))
    return root


def load_sequence(root: str | os.PathLike) -> tuple[SequenceSpec, list[DomainDataset]]:
    root = Path(root)
    seq = json.loads((root / SEQUENCE_MANIFEST).read_text())
    spec = SequenceSpec.from_dict(seq["spec"])
    domains = []
    for fname in seq["domains"]:
        m = json.loads((root / fname).read_text())
        splits = {}
        for role, ids in m["splits"].items():
            splits[role] = [read_submap(root / "submaps" / f"{i:07d}.bin", i) for i in ids]
        domains.append(DomainDataset(
            m["domain_id"], m["name"], splits["train"], splits["database"], splits["query"],
            m["positive_radius"], m["negative_radius"], m["eval_radius"], m["world_extent"]))
    return spec, domains


def directory_checksum(root: str | os.PathLike) -> str:
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
