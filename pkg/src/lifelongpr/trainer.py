"""Continual-learning loop: replay selection, two-stage training, distillation.

Methods:

* ``finetune``: one training stage per domain on current data only.
* ``replay_only``: one stage per domain on replay-augmented batches with the
  distillation term, no prompt module.
* ``lifelongpr``: the prompt module is trained first on replay samples with the
  backbone frozen, then the backbone is trained on replay-augmented batches
  with the prompt frozen.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DomainDataset, pose_distance_matrix, stack_points, stack_poses
from .encoder import (ENC_PREFIX, PROMPT_PREFIX, Adam, ModelState, backprop, embed,
                      encoder_backward, encoder_forward, init_encoder, kd_loss, kd_weight,
                      load_checkpoint, save_checkpoint, triplet_loss)
from .infoq import info_quantity_from_features
from .metrics import RecallMatrix, recall_at_1, save_matrix, summarize, format_table
from .prompt import attach, init_prompt, is_neutral, prompt_forward
from .selection import Candidates, ReplayBuffer, load_buffer, save_buffer, update_buffer

log = logging.getLogger(__name__)

METHODS = ("finetune", "replay_only", "lifelongpr")


class StageFailure(RuntimeError):
    """A training stage failed; the run directory holds everything up to the last stage."""


@dataclass
class StageConfig:
    method: str = "lifelongpr"
    # single-stage methods, and the first domain of every method
    epochs: int = 10
    lr: float = 1e-3
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    lr_stage1: float = 1e-3
    lr_stage2: float = 2e-4
    first_domain_schedule: str = "single"  # or "stage2": use epochs_stage2/lr_stage2 at t=1
    lam: float = 0.9
    margin: float = 0.2
    batch_anchors: int = 8
    n_pos: int = 2
    n_neg: int = 4
    replay_fraction: float = 0.25
    kd_in_stage1: bool = True
    k_total: int = 64
    tau: float = 4.0
    alpha: float = 8.0
    gamma_k: float = 0.2
    median_gamma: bool = False
    epsilon: float = 1e-6
    infoq_cap: int = 2048
    d_thr: float | None = None  # None: d_thr_fraction * world extent
    d_thr_fraction: float = 0.25
    selection: str = "greedy"
    allocation: str = "infoq"
    k_q: int = 64
    prompt_dim: int = 8
    n_attn: int = 2
    augment_sigma: float = 0.01
    augment_drop: float = 0.2

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"invalid field 'method'={self.method!r}")
        if not 0 < self.lam < 1:
            raise ValueError(f"invalid field 'lam'={self.lam!r}: must lie in (0, 1)")
        for name in ("epochs", "epochs_stage1", "epochs_stage2", "k_total", "infoq_cap"):
            if getattr(self, name) < 0:
                raise ValueError(f"invalid field {name!r}")
        for name in ("lr", "lr_stage1", "lr_stage2", "tau", "alpha", "gamma_k", "epsilon",
                     "margin"):
            if not getattr(self, name) > 0:
                raise ValueError(f"invalid field {name!r}={getattr(self, name)!r}")
        if self.batch_anchors < 1 or self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("invalid batch specification")
        if not 0 < self.replay_fraction < 1:
            raise ValueError("invalid field 'replay_fraction'")
        if self.selection not in ("greedy", "random"):
            raise ValueError(f"invalid field 'selection'={self.selection!r}")
        if self.allocation not in ("infoq", "uniform"):
            raise ValueError(f"invalid field 'allocation'={self.allocation!r}")
        if self.first_domain_schedule not in ("single", "stage2"):
            raise ValueError("invalid field 'first_domain_schedule'")
        if self.d_thr is not None and self.d_thr <= 0:
            raise ValueError("invalid field 'd_thr'")

    @classmethod
    def from_dict(cls, raw: dict) -> "StageConfig":
        known = {f.name for f in fields(cls)}
        bad = set(raw) - known
        if bad:
            raise ValueError(f"unknown config field {sorted(bad)[0]!r}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @property
    def uses_replay(self) -> bool:
        return self.method != "finetune"

    @property
    def uses_prompt(self) -> bool:
        return self.method == "lifelongpr"


@dataclass
class StageEntry:
    t: int
    checkpoint: str | None
    manifest: str | None
    losses: list[dict]
    seconds: float
    recall_row: list[float]


@dataclass
class RunRecord:
    seed: int
    method: str
    names: list[str]
    stages: list[StageEntry] = field(default_factory=list)
    matrix: RecallMatrix | None = None
    complete: bool = False
    model: ModelState | None = None
    buffer: ReplayBuffer | None = None

    def summary(self) -> dict:
        return summarize(self.matrix)


def _seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# -- batching ----------------------------------------------------------------------


class _Split:
    """Stacked arrays and mining tables for one training split."""

    def __init__(self, ds: DomainDataset):
        self.domain_id = ds.domain_id
        self.ids = np.array([s.id for s in ds.train])
        self.points = stack_points(ds.train).astype(np.float32)
        self.poses = stack_poses(ds.train)
        self.row = {int(i): r for r, i in enumerate(self.ids)}
        d = pose_distance_matrix(self.poses, self.poses)
        np.fill_diagonal(d, np.inf)
        self.pos = [np.flatnonzero(r <= ds.positive_radius) for r in d]
        np.fill_diagonal(d, 0.0)
        self.neg = [np.flatnonzero(r >= ds.negative_radius) for r in d]
        self.negative_radius = ds.negative_radius


@dataclass
class _ReplayItem:
    domain_id: int
    row: int  # row inside its domain's _Split


class _Batcher:
    def __init__(self, cfg: StageConfig, splits: dict[int, _Split]):
        self.cfg = cfg
        self.splits = splits

    def augment(self, pts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n = len(pts)
        keep = np.flatnonzero(rng.random(n) >= self.cfg.augment_drop)
        if len(keep) == 0:
            keep = np.arange(n)
        out = pts[rng.choice(keep, n, replace=True)]
        out = out + rng.normal(0.0, self.cfg.augment_sigma, out.shape).astype(np.float32)
        return (out - out.mean(0)).astype(np.float32)

    def current_tuple(self, sp: _Split, r: int, rng: np.random.Generator):
        cfg = self.cfg
        dom = sp.domain_id
        if len(sp.pos[r]):
            pos = [(dom, int(j)) for j in rng.choice(sp.pos[r], cfg.n_pos, replace=True)]
        else:
            pos = [self.augment(sp.points[r], rng) for _ in range(cfg.n_pos)]
        negs = [(dom, int(j)) for j in rng.choice(sp.neg[r], cfg.n_neg,
                                                  replace=len(sp.neg[r]) < cfg.n_neg)]
        return (dom, int(r)), pos, negs

    def replay_tuple(self, item: _ReplayItem, pool: list[_ReplayItem],
                     rng: np.random.Generator):
        cfg = self.cfg
        sp = self.splits[item.domain_id]
        pos = [self.augment(sp.points[item.row], rng) for _ in range(cfg.n_pos)]
        far = set(sp.neg[item.row].tolist())
        valid = [j for j, other in enumerate(pool)
                 if other.domain_id != item.domain_id or other.row in far]
        if valid:
            picks = rng.choice(valid, cfg.n_neg, replace=len(valid) < cfg.n_neg)
            negs = [(pool[j].domain_id, pool[j].row) for j in picks]
        else:
            negs = [(item.domain_id, int(j))
                    for j in rng.choice(sp.neg[item.row], cfg.n_neg, replace=True)]
        return (item.domain_id, item.row), pos, negs

    def assemble(self, tuples):
        """Stack anchors, then positives, then negatives; keys mirror the rows."""
        rows = [t[0] for t in tuples] + [p for t in tuples for p in t[1]] + \
            [n for t in tuples for n in t[2]]
        X = np.stack([self._points(r) for r in rows])
        keys = [r if isinstance(r, tuple) else None for r in rows]
        return X, keys

    def _points(self, ref):
        if isinstance(ref, tuple):
            return self.splits[ref[0]].points[ref[1]]
        return ref


def _loss_fn(cfg: StageConfig, B: int, kd_rows: np.ndarray, old_desc: np.ndarray | None,
             weight: float, stats: dict):
    P, K = cfg.n_pos, cfg.n_neg

    def fn(desc):
        D = desc.shape[1]
        a = desc[:B]
        p = desc[B:B + B * P].reshape(B, P, D)
        n = desc[B + B * P:].reshape(B, K, D)
        lpr, (ga, gp, gn) = triplet_loss(a, p, n, cfg.margin, return_grad=True)
        grad = np.concatenate([ga, gp.reshape(-1, D), gn.reshape(-1, D)])
        lkd = 0.0
        if old_desc is not None and len(kd_rows):
            lkd, gk = kd_loss(old_desc, a[kd_rows], return_grad=True)
            if weight > 0:
                grad[kd_rows] += weight * gk
        stats["pr"] += lpr
        stats["kd"] += lkd
        stats["n"] += 1
        return lpr + weight * lkd, grad.astype(desc.dtype)

    return fn


class _PromptCache:
    """Per-submap outputs of a frozen prompt module, computed on first use."""

    def __init__(self, model: ModelState, splits: dict[int, _Split]):
        self.params = model.params
        self.splits = splits
        self.neutral = is_neutral(model.params)
        self.store: dict[tuple[int, int], np.ndarray] = {}

    def get(self, X: np.ndarray, keys) -> np.ndarray | None:
        if self.neutral:
            return None
        miss = [i for i, k in enumerate(keys) if k is None or k not in self.store]
        fresh = {}
        if miss:
            out, _ = prompt_forward(self.params, X[miss])
            for i, o in zip(miss, out):
                fresh[i] = o
                if keys[i] is not None:
                    self.store[keys[i]] = o
        return np.stack([fresh[i] if i in fresh else self.store[k]
                         for i, k in enumerate(keys)])


def _train_loop(model: ModelState, trainable: set[str], epochs: int, lr: float,
                batches_fn, cfg: StageConfig, splits: dict[int, _Split],
                replay_desc_old: dict | None, stage_tag: str, t: int,
                use_kd: bool) -> list[dict]:
    """Run ``epochs`` epochs of Adam on the ``trainable`` parameters.

    ``batches_fn(epoch)`` yields (X, row_keys, n_anchors, kd_rows, kd_keys).
    """
    opt = Adam(lr)
    curve = []
    frozen_prompt = model.has_prompt and not any(k.startswith(PROMPT_PREFIX) for k in trainable)
    pcache = _PromptCache(model, splits) if frozen_prompt else None
    for e in range(epochs):
        w = kd_weight(cfg.lam, e) if use_kd else 0.0
        stats = {"pr": 0.0, "kd": 0.0, "n": 0}
        for X, row_keys, B, kd_rows, kd_keys in batches_fn(e):
            old = None
            if use_kd and len(kd_rows):
                old = np.stack([replay_desc_old[k] for k in kd_keys])
            fn = _loss_fn(cfg, B, kd_rows, old, w, stats)
            if pcache is None:
                _, grads = backprop(model, X, fn, trainable)
            else:
                desc, ecache = encoder_forward(model.params, X, pcache.get(X, row_keys))
                _, d_desc = fn(desc)
                grads, _ = encoder_backward(model.params, ecache, d_desc)
                grads = {k: v for k, v in grads.items() if k in trainable}
            opt.step(model.params, grads)
        n = max(stats["n"], 1)
        curve.append({"t": t, "stage": stage_tag, "epoch": e, "L_PR": stats["pr"] / n,
                      "L_KD": stats["kd"] / n, "weight": w})
    return curve


# -- one domain ----------------------------------------------------------------------


def fresh_model(cfg: StageConfig, seed: int) -> ModelState:
    model = init_encoder(_seed(seed, 0, 1))
    if cfg.uses_prompt:
        model = attach(model, init_prompt(_seed(seed, 0, 2), model.point_width,
                                          cfg.k_q, cfg.prompt_dim, cfg.n_attn))
    return model


def train_stage(t: int, domain: DomainDataset, buffer: ReplayBuffer, prev: ModelState,
                cfg: StageConfig, seed: int, splits: dict[int, _Split]):
    """Train on domain ``t`` (1-based) and return (model, buffer, entry).

    ``splits`` maps domain ids to training splits of every domain seen so far;
    it is used to fetch the point clouds of replay samples.
    """
    cfg.validate()
    if cfg.method == "finetune" and len(buffer):
        raise StageFailure("fine-tuning does not use a replay buffer, got a non-empty one")
    t0 = time.perf_counter()
    if domain.domain_id not in splits:
        splits[domain.domain_id] = _Split(domain)
    sp = splits[domain.domain_id]
    batcher = _Batcher(cfg, splits)
    old_model = prev.copy()
    model = prev.copy()

    # pre-update features of the new domain, used for InfoQ and selection
    feats = embed(prev, sp.points) if cfg.uses_replay else None

    pool = [_ReplayItem(s.domain_id, splits[s.domain_id].row[i])
            for s in buffer.sets for i in s.ids]
    replay_old = {}
    if pool:
        pts = np.stack([splits[it.domain_id].points[it.row] for it in pool])
        for it, d in zip(pool, embed(old_model, pts)):
            replay_old[(it.domain_id, it.row)] = d

    enc_names = set(model.names(ENC_PREFIX))
    prompt_names = set(model.names(PROMPT_PREFIX))
    n_rep = max(1, round(cfg.batch_anchors * cfg.replay_fraction)) if pool else 0
    n_cur = cfg.batch_anchors - n_rep

    def mixed_batches(tag):
        def gen(epoch):
            rng = np.random.default_rng(_seed(seed, t, tag, epoch))
            order = rng.permutation(len(sp.ids))
            rep_order = rng.permutation(len(pool)) if pool else np.zeros(0, int)
            rp = 0
            for s in range(0, len(order), n_cur):
                tuples = [batcher.current_tuple(sp, r, rng) for r in order[s:s + n_cur]]
                keys = []
                for _ in range(n_rep):
                    it = pool[rep_order[rp % len(pool)]]
                    rp += 1
                    tuples.append(batcher.replay_tuple(it, pool, rng))
                    keys.append((it.domain_id, it.row))
                B = len(tuples)
                kd_rows = np.arange(B - len(keys), B)
                X, row_keys = batcher.assemble(tuples)
                yield X, row_keys, B, kd_rows, keys
        return gen

    def replay_batches(epoch):
        rng = np.random.default_rng(_seed(seed, t, 1, epoch))
        order = rng.permutation(len(pool))
        for s in range(0, len(order), cfg.batch_anchors):
            items = [pool[j] for j in order[s:s + cfg.batch_anchors]]
            tuples = [batcher.replay_tuple(it, pool, rng) for it in items]
            keys = [(it.domain_id, it.row) for it in items]
            X, row_keys = batcher.assemble(tuples)
            yield X, row_keys, len(tuples), np.arange(len(tuples)), keys

    losses = []
    if t == 1 or not pool:
        if cfg.uses_prompt and cfg.first_domain_schedule == "stage2":
            epochs, lr = cfg.epochs_stage2, cfg.lr_stage2
        else:
            epochs, lr = cfg.epochs, cfg.lr
        losses += _train_loop(model, enc_names, epochs, lr, mixed_batches(2), cfg,
                              splits, None, "single", t, use_kd=False)
        model.stage = (t, 0)
    elif cfg.method == "lifelongpr":
        losses += _train_loop(model, prompt_names, cfg.epochs_stage1, cfg.lr_stage1,
                              replay_batches, cfg, splits, replay_old, "stage1", t,
                              use_kd=cfg.kd_in_stage1)
        losses += _train_loop(model, enc_names, cfg.epochs_stage2, cfg.lr_stage2,
                              mixed_batches(2), cfg, splits, replay_old, "stage2", t,
                              use_kd=True)
        model.stage = (t, 2)
    else:
        kd = cfg.method == "replay_only"
        losses += _train_loop(model, enc_names, cfg.epochs, cfg.lr, mixed_batches(2), cfg,
                              splits, replay_old, "single", t, use_kd=kd)
        model.stage = (t, 0)

    new_buffer = buffer
    if cfg.uses_replay:
        d_thr = cfg.d_thr if cfg.d_thr is not None else cfg.d_thr_fraction * domain.world_extent
        rec = info_quantity_from_features(feats, domain.domain_id, cfg.gamma_k, cfg.epsilon,
                                          cfg.infoq_cap, _seed(seed, t, 7), cfg.median_gamma)
        cands = Candidates(sp.ids, feats.astype(np.float32), sp.poses)
        new_buffer = update_buffer(buffer, rec, cands, d_thr, seed=_seed(seed, t, 8),
                                   selection=cfg.selection, allocation=cfg.allocation)
    entry = StageEntry(t, None, None, losses, time.perf_counter() - t0, [])
    return model, new_buffer, entry


# -- whole sequence ------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)


LOSS_FIELDS = ["t", "stage", "epoch", "L_PR", "L_KD", "weight"]


def _write_losses(path: Path, rows: list[dict]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, LOSS_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    os.replace(tmp, path)


def evaluate_row(model: ModelState, domains: list[DomainDataset], k: int) -> list[float]:
    return [recall_at_1(model, domains[i]) for i in range(k)]


def run_sequence(domains: list[DomainDataset], cfg: StageConfig, seed: int,
                 out_dir: str | os.PathLike | None = None, resume: bool = True,
                 stop_after: int | None = None) -> RunRecord:
    """Train over all domains in order, evaluating every seen domain after each stage.

    With ``out_dir`` set, checkpoints, replay manifests, the loss curve and the
    recall matrix are written after every stage, and an existing directory is
    resumed from its last completed stage. ``stop_after`` ends the run early
    after that many stages (used to simulate interruptions).
    """
    cfg.validate()
    names = [d.name for d in domains]
    T = len(domains)
    rec = RunRecord(seed, cfg.method, names, matrix=RecallMatrix(T, names))
    model = fresh_model(cfg, seed)
    buffer = ReplayBuffer(cfg.k_total if cfg.uses_replay else 0, tau=cfg.tau, alpha=cfg.alpha,
                          seed=seed)
    splits: dict[int, _Split] = {}
    out = Path(out_dir) if out_dir is not None else None
    curve: list[dict] = []
    start = 1
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        snap = {"seed": seed, "config": asdict(cfg), "domains": names}
        cfg_path = out / "config.json"
        if cfg_path.exists() and resume:
            if json.loads(cfg_path.read_text()) != json.loads(json.dumps(snap)):
                raise StageFailure(f"{out} holds a run with a different configuration")
        _write_json(cfg_path, snap)
        prog_path = out / "progress.json"
        if resume and prog_path.exists():
            prog = json.loads(prog_path.read_text())
            done = prog["completed"]
            if done:
                model = load_checkpoint(out / f"stage_{done:02d}.ckpt")
                if cfg.uses_replay:
                    buffer = load_buffer(out / f"buffer_{done:02d}.json")
                rec.matrix = RecallMatrix.from_dict(
                    json.loads((out / "recall_matrix.json").read_text()))
                rec.matrix.rows = rec.matrix.rows[:done]
                curve = [r for r in prog["losses"] if r["t"] <= done]
                rec.stages = [StageEntry(**s) for s in prog["stages"][:done]]
                for i in range(done):
                    splits[domains[i].domain_id] = _Split(domains[i])
                start = done + 1
                log.info("resuming %s after stage %d", out, done)
    for t in range(start, T + 1):
        if stop_after is not None and t > stop_after:
            break
        try:
            model, buffer, entry = train_stage(t, domains[t - 1], buffer, model, cfg, seed,
                                               splits)
        except Exception as exc:
            raise StageFailure(f"stage {t} failed: {exc}") from exc
        row = evaluate_row(model, domains, t)
        rec.matrix.append_row(row)
        entry.recall_row = row
        curve += entry.losses
        if out is not None:
            entry.checkpoint = f"stage_{t:02d}.ckpt"
            save_checkpoint(out / entry.checkpoint, model,
                            {"method": cfg.method, "seed": seed,
                             "n_points": int(domains[0].train[0].points.shape[0])})
            if cfg.uses_replay:
                entry.manifest = f"buffer_{t:02d}.json"
                save_buffer(out / entry.manifest, buffer)
            save_matrix(out / "recall_matrix.json", rec.matrix)
            _write_losses(out / "loss_curve.csv", curve)
        rec.stages.append(entry)
        if out is not None:
            _write_json(out / "progress.json", {
                "completed": t, "losses": curve,
                "stages": [asdict(s) for s in rec.stages]})
        log.info("stage %d/%d done in %.1fs: %s", t, T, entry.seconds,
                 " ".join(f"{v:.3f}" for v in row))
    rec.complete = rec.matrix.complete
    if out is not None:
        s = summarize(rec.matrix)
        _write_json(out / "metrics.json", s)
        (out / "metrics.txt").write_text(format_table(rec.matrix))
    rec.model = model
    rec.buffer = buffer
    return rec
