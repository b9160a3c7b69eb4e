"""Recall@1 evaluation and continual-learning metrics over a recall matrix."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class RecallMatrix:
    """Lower-triangular matrix; ``rows[k-1][t-1]`` is recall on domain t after stage k."""

    T: int
    names: list[str]
    rows: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) != self.T:
            raise MetricsError("need one name per domain")
        for k, row in enumerate(self.rows, start=1):
            self._check_row(k, row)

    def _check_row(self, k: int, row):
        if len(row) != k:
            raise MetricsError(f"row {k} must have {k} entries, got {len(row)}")
        for v in row:
            if not 0.0 <= v <= 1.0:
                raise MetricsError(f"recall {v} outside [0, 1]")

    @classmethod
    def from_rows(cls, rows, names=None) -> "RecallMatrix":
        T = len(rows)
        return cls(T, list(names) if names else [f"domain_{t}" for t in range(T)],
                   [list(map(float, r)) for r in rows])

    @property
    def n_complete(self) -> int:
        return len(self.rows)

    @property
    def complete(self) -> bool:
        return len(self.rows) == self.T

    def append_row(self, row) -> None:
        k = len(self.rows) + 1
        if k > self.T:
            raise MetricsError("matrix already complete")
        row = [float(v) for v in row]
        self._check_row(k, row)
        self.rows.append(row)

    def get(self, k: int, t: int) -> float:
        """Recall on domain ``t`` after stage ``k`` (both 1-based, t <= k)."""
        if not 1 <= t <= k:
            raise MetricsError(f"entry ({k}, {t}) is outside the lower triangle")
        if k > len(self.rows):
            raise MetricsError(f"row {k} is not available")
        return self.rows[k - 1][t - 1]

    def to_dict(self) -> dict:
        return {"format": "lifelongpr-recall/1", "T": self.T, "names": self.names,
                "rows": self.rows}

    @classmethod
    def from_dict(cls, raw: dict) -> "RecallMatrix":
        return cls(raw["T"], raw["names"], [list(map(float, r)) for r in raw["rows"]])


def mean_recall(matrix: RecallMatrix, k: int) -> float:
    if not 1 <= k <= matrix.T:
        raise MetricsError(f"k={k} outside 1..{matrix.T}")
    if k > matrix.n_complete:
        raise MetricsError(f"row {k} is incomplete")
    row = matrix.rows[k - 1]
    return float(sum(row) / k)


def mean_incremental_recall(matrix: RecallMatrix, k: int) -> float:
    if not 1 <= k <= matrix.T:
        raise MetricsError(f"k={k} outside 1..{matrix.T}")
    if k > matrix.n_complete:
        raise MetricsError(f"rows 1..{k} are incomplete")
    return float(sum(mean_recall(matrix, j) for j in range(1, k + 1)) / k)


def forgetting_score(matrix: RecallMatrix) -> float:
    """Mean drop from each earlier domain's peak recall to its final recall.

    The peak of column t is taken over the defined rows t..T-1.
    """
    T = matrix.T
    if T < 2:
        raise MetricsError("forgetting needs at least two stages")
    if not matrix.complete:
        raise MetricsError("forgetting needs a complete matrix")
    drops = []
    for t in range(1, T):
        peak = max(matrix.get(l, t) for l in range(t, T))
        drops.append(peak - matrix.get(T, t))
    return float(sum(drops) / (T - 1))


# -- retrieval -------------------------------------------------------------------


def nearest_neighbours(db_desc: np.ndarray, q_desc: np.ndarray, db_ids=None) -> np.ndarray:
    """Row index of the exact nearest database descriptor for each query.

    Equal distances resolve to the database entry with the smaller id.
    """
    db = np.asarray(db_desc, dtype=np.float64)
    q = np.asarray(q_desc, dtype=np.float64)
    order = np.argsort(np.asarray(db_ids), kind="stable") if db_ids is not None \
        else np.arange(len(db))
    dbo = db[order]
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), 256):
        diff = q[s:s + 256, None, :] - dbo[None, :, :]
        d2 = (diff * diff).sum(-1)
        out[s:s + 256] = order[d2.argmin(1)]
    return out


def recall_from_descriptors(db_desc, db_poses, q_desc, q_poses, eval_radius: float,
                            db_ids=None) -> float:
    if len(db_desc) == 0 or len(q_desc) == 0:
        raise MetricsError("database and query splits must be non-empty")
    nn = nearest_neighbours(db_desc, q_desc, db_ids)
    d = np.sqrt(((np.asarray(db_poses)[nn] - np.asarray(q_poses)) ** 2).sum(1))
    return float(np.mean(d <= eval_radius))


def recall_at_1(model, domain) -> float:
    """Fraction of queries whose top-1 database match lies within ``eval_radius``."""
    from .data import stack_points, stack_poses
    from .encoder import embed

    if not domain.database or not domain.query:
        raise MetricsError("database and query splits must be non-empty")
    db = embed(model, stack_points(domain.database))
    q = embed(model, stack_points(domain.query))
    return recall_from_descriptors(db, stack_poses(domain.database), q,
                                   stack_poses(domain.query), domain.eval_radius,
                                   [s.id for s in domain.database])


# -- files -----------------------------------------------------------------------


def save_matrix(path: str | os.PathLike, matrix: RecallMatrix) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(matrix.to_dict(), indent=1))
    os.replace(tmp, path)


def load_matrix(path: str | os.PathLike) -> RecallMatrix:
    return RecallMatrix.from_dict(json.loads(Path(path).read_text()))


def summarize(matrix: RecallMatrix) -> dict:
    k_done = matrix.n_complete
    out = {
        "T": matrix.T, "stages_completed": k_done, "partial": not matrix.complete,
        "mR@1": {str(k): mean_recall(matrix, k) for k in range(1, k_done + 1)},
        "mIR@1": {str(k): mean_incremental_recall(matrix, k) for k in range(1, k_done + 1)},
        "F": forgetting_score(matrix) if matrix.complete and matrix.T >= 2 else None,
    }
    return out


def format_table(matrix: RecallMatrix) -> str:
    """Aligned text report in percent, one line per stage plus the final F."""
    s = summarize(matrix)
    lines = [f"{'stage':>5}  {'mR@1(%)':>8}  {'mIR@1(%)':>8}  recall per domain (%)"]
    for k in range(1, matrix.n_complete + 1):
        row = "  ".join(f"{100 * v:6.2f}" for v in matrix.rows[k - 1])
        lines.append(f"{k:>5}  {100 * s['mR@1'][str(k)]:8.2f}  "
                     f"{100 * s['mIR@1'][str(k)]:8.2f}  {row}")
    if s["F"] is not None:
        lines.append(f"F(%) = {100 * s['F']:.2f}")
    if s["partial"]:
        lines.append(f"partial run: {matrix.n_complete}/{matrix.T} stages")
    return "\n".join(lines) + "\n"


def recall_series_csv(matrix: RecallMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "domain", "name", "recall"])
    for k, row in enumerate(matrix.rows, start=1):
        for t, v in enumerate(row, start=1):
            w.writerow([k, t, matrix.names[t - 1], repr(v)])
    return buf.getvalue()
