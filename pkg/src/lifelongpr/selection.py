"""Replay sample selection: diversity scoring, greedy selection, forgetting.

Pairwise separation between two samples combines clamped pose distance and
cosine dissimilarity of their features; a member's score is its minimum
separation from the rest of the set and the set diversity ``g`` is the sum of
member scores.
"""

from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .infoq import InfoQRecord, allocate_sizes, uniform_sizes

SINGLETON_SCORE = 2.0


class SelectionError(ValueError):
    pass


@dataclass
class Candidates:
    """Ids, features and planar poses of a candidate pool, aligned by row."""

    ids: np.ndarray
    features: np.ndarray
    poses: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if not (len(self.ids) == len(self.features) == len(self.poses)):
            raise SelectionError("ids, features and poses must be aligned")
        norms = np.linalg.norm(self.features, axis=1) if len(self.ids) else np.zeros(0)
        if np.any(norms == 0):
            raise SelectionError("zero-norm feature: cosine similarity is undefined")
        self._unit = (self.features / norms[:, None]).astype(np.float64) if len(self.ids) \
            else np.zeros((0, self.features.shape[-1] if self.features.ndim == 2 else 0))

    def __len__(self):
        return len(self.ids)

    def take(self, rows) -> "Candidates":
        rows = np.asarray(rows, dtype=np.int64)
        return Candidates(self.ids[rows], self.features[rows], self.poses[rows])

    def separation(self, i: int, rows: np.ndarray, d_thr: float) -> np.ndarray:
        """Separation terms between row ``i`` and each row in ``rows``."""
        dp = np.sqrt(((self.poses[rows] - self.poses[i]) ** 2).sum(-1))
        cos = self._unit[rows] @ self._unit[i]
        return np.minimum(dp / d_thr, 1.0) + (1.0 - cos) / 2.0


@dataclass
class DiversityScore:
    scores: np.ndarray
    g: float


def member_score(i: int, members, cands: Candidates, d_thr: float) -> float:
    """Score of row ``i`` within the member rows ``members`` (which contain ``i``)."""
    members = np.asarray(members, dtype=np.int64)
    others = members[members != i]
    if len(others) == 0:
        return SINGLETON_SCORE
    return float(cands.separation(i, others, d_thr).min())


def diversity(members, cands: Candidates, d_thr: float) -> DiversityScore:
    members = np.asarray(members, dtype=np.int64)
    if len(members) == 0:
        raise SelectionError("diversity of an empty set")
    s = np.array([member_score(i, members, cands, d_thr) for i in members])
    return DiversityScore(s, float(s.sum()))


def pool_size(n: int, k: int, alpha: float, remaining: int) -> int:
    return min(remaining, math.ceil(n / k * alpha))


@dataclass
class GreedyTrace:
    evaluations: int = 0
    gains: list = field(default_factory=list)


def greedy_select(cands: Candidates, k: int, alpha: float, seed: int, d_thr: float,
                  trace: GreedyTrace | None = None) -> list[int]:
    """Greedy diversity maximisation with random candidate pools.

    Returns the selected submap ids in pick order. Each step scores a pool of
    ``ceil(|D| / k * alpha)`` unselected candidates (clamped to what is left)
    and adds the one maximising ``g``; ties go to the smallest id.
    """
    n = len(cands)
    if k < 0:
        raise SelectionError("k must be >= 0")
    if k > n:
        raise SelectionError(f"cannot select {k} samples from {n} candidates")
    if alpha <= 0:
        raise SelectionError("alpha must be > 0")
    if d_thr <= 0:
        raise SelectionError("d_thr must be > 0")
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    # work in id order so that index order doubles as the tie-break
    order = np.argsort(cands.ids, kind="stable")
    remaining = list(order)
    chosen: list[int] = []
    cur_min = np.zeros(0)  # current score of each chosen member
    g = 0.0
    for _ in range(k):
        m = pool_size(n, k, alpha, len(remaining))
        if m < len(remaining):
            pick = np.sort(rng.choice(len(remaining), m, replace=False))
            pool = [remaining[j] for j in pick]
        else:
            pool = list(remaining)
        best, best_g, best_upd = None, -np.inf, None
        ch = np.asarray(chosen, dtype=np.int64)
        for r in pool:
            if len(ch) == 0:
                cand_g, upd, s_new = SINGLETON_SCORE, cur_min, SINGLETON_SCORE
            else:
                sep = cands.separation(r, ch, d_thr)
                upd = np.minimum(cur_min, sep)
                s_new = float(sep.min())
                cand_g = float(upd.sum()) + s_new
            if cand_g > best_g:
                best, best_g, best_upd, best_s = r, cand_g, upd, s_new
        if trace is not None:
            trace.evaluations += len(pool)
            trace.gains.append(best_g - g)
        chosen.append(best)
        cur_min = np.append(best_upd, best_s)
        g = best_g
        remaining.remove(best)
    return [int(cands.ids[r]) for r in chosen]


def random_select(cands: Candidates, k: int, seed: int) -> list[int]:
    if k > len(cands):
        raise SelectionError(f"cannot select {k} samples from {len(cands)} candidates")
    rng = np.random.default_rng(seed)
    rows = rng.choice(len(cands), k, replace=False)
    return [int(cands.ids[r]) for r in rows]


# -- buffer ----------------------------------------------------------------------


@dataclass
class ReplaySet:
    domain_id: int
    ids: list[int]
    k: int
    record: InfoQRecord
    features: np.ndarray  # (len(ids), D) float32, aligned with ids
    poses: np.ndarray  # (len(ids), 2)
    d_thr: float

    def candidates(self) -> Candidates:
        return Candidates(self.ids, self.features, self.poses)


@dataclass
class ReplayBuffer:
    k_total: int
    sets: list[ReplaySet] = field(default_factory=list)
    tau: float = 4.0
    alpha: float = 8.0
    seed: int = 0

    def __len__(self):
        return sum(len(s.ids) for s in self.sets)

    @property
    def domain_ids(self) -> list[int]:
        return [s.domain_id for s in self.sets]

    def all_ids(self) -> list[int]:
        return [i for s in self.sets for i in s.ids]

    def records(self) -> list[InfoQRecord]:
        return [s.record for s in self.sets]

    def validate(self, train_ids: dict[int, set[int]] | None = None) -> None:
        if len(self) > self.k_total:
            raise SelectionError("buffer exceeds its budget")
        prev = -1
        for s in self.sets:
            if s.domain_id <= prev:
                raise SelectionError("replay sets are not in learning order")
            prev = s.domain_id
            if len(s.ids) > s.k:
                raise SelectionError(f"set {s.domain_id} holds more than its allocation")
            if train_ids is not None:
                missing = set(s.ids) - train_ids.get(s.domain_id, set())
                if missing:
                    raise SelectionError(f"set {s.domain_id} references missing submaps "
                                         f"{sorted(missing)[:5]}")


def _sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _pick(cands: Candidates, k: int, alpha: float, seed: int, d_thr: float, mode: str):
    if mode == "greedy":
        return greedy_select(cands, k, alpha, seed, d_thr)
    if mode == "random":
        return random_select(cands, k, seed)
    raise SelectionError(f"unknown selection mode {mode!r}")


def update_buffer(buffer: ReplayBuffer, record: InfoQRecord, cands: Candidates,
                  d_thr: float, seed: int | None = None, selection: str = "greedy",
                  allocation: str = "infoq") -> ReplayBuffer:
    """Add the set for a new domain and shrink historical sets to their new sizes."""
    if record.domain_id in buffer.domain_ids:
        raise SelectionError(f"domain {record.domain_id} is already in the buffer")
    seed = buffer.seed if seed is None else seed
    records = buffer.records() + [record]
    if allocation == "infoq":
        sizes = allocate_sizes(records, buffer.k_total, buffer.tau).sizes
    elif allocation == "uniform":
        sizes = uniform_sizes(len(records), buffer.k_total, records).sizes
    else:
        raise SelectionError(f"unknown allocation mode {allocation!r}")
    new_sets = []
    for s, k in zip(buffer.sets, sizes[:-1]):
        if k >= len(s.ids):
            new_sets.append(s)
            continue
        keep = _pick(s.candidates(), k, buffer.alpha,
                     _sub_seed(seed, record.domain_id, s.domain_id), s.d_thr, selection)
        rows = {i: r for r, i in enumerate(s.ids)}
        idx = [rows[i] for i in keep]
        new_sets.append(ReplaySet(s.domain_id, keep, k, s.record,
                                  s.features[idx], s.poses[idx], s.d_thr))
    k_new = min(sizes[-1], len(cands))
    chosen = _pick(cands, k_new, buffer.alpha, _sub_seed(seed, record.domain_id,
                                                         record.domain_id), d_thr, selection)
    rows = {int(i): r for r, i in enumerate(cands.ids)}
    idx = [rows[i] for i in chosen]
    new_sets.append(ReplaySet(record.domain_id, chosen, sizes[-1], record,
                              np.asarray(cands.features[idx], np.float32),
                              cands.poses[idx], d_thr))
    out = ReplayBuffer(buffer.k_total, new_sets, buffer.tau, buffer.alpha, buffer.seed)
    out.validate()
    return out


# -- manifest --------------------------------------------------------------------


def _enc(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode()


def _dec(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float32)


def buffer_to_dict(buf: ReplayBuffer) -> dict:
    sets = []
    for s in buf.sets:
        sets.append({
            "domain_id": s.domain_id, "k": s.k, "ids": list(map(int, s.ids)),
            "infoq": s.record.to_dict(), "d_thr": s.d_thr,
            "poses": np.asarray(s.poses, float).tolist(),
            "feature_dim": int(s.features.shape[1]) if s.features.ndim == 2 else 0,
            "features_b64_f32": _enc(s.features),
        })
    return {"format": "lifelongpr-replay/1", "k_total": buf.k_total, "tau": buf.tau,
            "alpha": buf.alpha, "seed": buf.seed, "sets": sets}


def buffer_from_dict(raw: dict) -> ReplayBuffer:
    sets = []
    for s in raw["sets"]:
        n = len(s["ids"])
        feats = _dec(s["features_b64_f32"], (n, s["feature_dim"]))
        sets.append(ReplaySet(s["domain_id"], list(s["ids"]), s["k"],
                              InfoQRecord.from_dict(s["infoq"]), feats,
                              np.asarray(s["poses"], float).reshape(n, 2), s["d_thr"]))
    return ReplayBuffer(raw["k_total"], sets, raw["tau"], raw["alpha"], raw["seed"])


def save_buffer(path: str | os.PathLike, buf: ReplayBuffer) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(buffer_to_dict(buf), indent=1))
    os.replace(tmp, path)


def load_buffer(path: str | os.PathLike) -> ReplayBuffer:
    return buffer_from_dict(json.loads(Path(path).read_text()))
