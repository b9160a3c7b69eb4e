"""Command-line entry point: ``lifelongpr {generate,select,train,report}``.

Exit codes: 0 success, 1 internal invariant violation, 2 invalid
configuration, 3 I/O failure, 4 model or dataset mismatch, 5 stage failure,
6 missing recall matrix.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import SEED_ENV, ConfigError, RunConfig, field_types, load_config
from .data import (DataError, SequenceSpec, desk_profiles, directory_checksum,
                   generate_sequence, load_sequence, save_sequence, stack_points, stack_poses)
from .encoder import ModelError, checkpoint_extra, embed, init_encoder, load_checkpoint
from .infoq import info_quantity_from_features
from .metrics import (MetricsError, format_table, load_matrix, recall_series_csv, summarize)
from .selection import (Candidates, ReplayBuffer, SelectionError, diversity, load_buffer,
                        save_buffer, update_buffer)
from .trainer import StageFailure, run_sequence

EXIT_INTERNAL = 1
EXIT_CONFIG, EXIT_IO, EXIT_MISMATCH, EXIT_STAGE, EXIT_NO_MATRIX = 2, 3, 4, 5, 6

RUN_CONFIG = "run_config.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


# -- argument parsing ---------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with run configuration fields")
    types = field_types()
    g = p.add_argument_group("run configuration (overrides the config file)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        typ = types[f.name]
        if typ is bool:
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            g.add_argument(flag, dest=f.name, type=typ, default=None,
                           metavar=typ.__name__.upper())


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="lifelongpr",
        description="Continual place recognition on synthetic point-cloud sequences.")
    root.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = root.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-domain dataset")
    _add_config_flags(g)

    s = sub.add_parser("select", help="run InfoQ, allocation and greedy replay selection")
    _add_config_flags(s)
    s.add_argument("--checkpoint", help="model checkpoint (default: fresh seeded encoder)")
    s.add_argument("--domains", type=int, nargs="+",
                   help="domain ids to add, in order (default: all not in --history)")
    s.add_argument("--history", help="replay manifest from an earlier selection")

    t = sub.add_parser("train", help="run continual training over a dataset")
    _add_config_flags(t)
    t.add_argument("--resume", action="store_true", help="continue an interrupted run")
    t.add_argument("--stop-after", type=int, help="stop after this many stages")

    r = sub.add_parser("report", help="metrics tables and CSV series for a run directory")
    r.add_argument("run_dir")
    r.add_argument("--out", help="directory for report files (default: the run directory)")
    return root


def _config(args) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if hasattr(args, f.name)}
    try:
        return load_config(args.config, overrides)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _seed_explicit(args) -> bool:
    return args.seed is not None or bool(os.environ.get(SEED_ENV))


# -- generate ------------------------------------------------------------------------


def _read_sequence_spec(cfg: RunConfig, args) -> SequenceSpec:
    if cfg.sequence is None:
        return SequenceSpec(desk_profiles(), seed=cfg.seed, n_points=cfg.n_points)
    try:
        raw = json.loads(Path(cfg.sequence).read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {cfg.sequence}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{cfg.sequence}: not valid JSON ({exc})") from exc
    if isinstance(raw, list):
        raw = {"profiles": raw}
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, f"{cfg.sequence}: expected a list of profiles or an object")
    try:
        spec = SequenceSpec.from_dict(raw)
    except DataError as exc:
        raise CliError(EXIT_CONFIG, f"{cfg.sequence}: {exc}") from exc
    if _seed_explicit(args) or "seed" not in raw:
        spec.seed = cfg.seed
    if args.n_points is not None or "n_points" not in raw:
        spec.n_points = cfg.n_points
    return spec


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.out is None:
        raise CliError(EXIT_CONFIG, "generate needs --out DIR")
    spec = _read_sequence_spec(cfg, args)
    if spec.T < 2:
        raise CliError(EXIT_CONFIG, "invalid field 'profiles': a sequence needs T >= 2 domains")
    try:
        domains = generate_sequence(spec)
    except DataError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    try:
        root = save_sequence(cfg.out, spec, domains)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {cfg.out}: {exc}") from exc
    print(f"{'domain':>6}  {'name':<12} {'train':>6} {'database':>8} {'query':>6}")
    for d in domains:
        print(f"{d.domain_id:>6}  {d.name:<12} {len(d.train):>6} {len(d.database):>8} "
              f"{len(d.query):>6}")
    print(f"wrote {root} (seed {spec.seed}, N_x {spec.n_points}, "
          f"checksum {directory_checksum(root)[:16]})")
    return 0


# -- shared loading --------------------------------------------------------------------


def _load_domains(cfg: RunConfig):
    if cfg.data is None:
        raise CliError(EXIT_CONFIG, "need --data DIR")
    try:
        spec, domains = load_sequence(cfg.data)
    except (OSError, KeyError, json.JSONDecodeError, DataError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset {cfg.data}: {exc}") from exc
    radii = {k: getattr(cfg, k) for k in ("positive_radius", "negative_radius", "eval_radius")
             if getattr(cfg, k) is not None}
    if radii:
        domains = [replace(d, **radii) for d in domains]
        for d in domains:
            if not d.positive_radius < d.negative_radius:
                raise CliError(EXIT_CONFIG, "invalid field 'positive_radius': must be below "
                                            "negative_radius")
    return spec, domains


# -- select ----------------------------------------------------------------------------


def _load_model(args, cfg: RunConfig, n_points: int):
    if args.checkpoint is None:
        return init_encoder(_seed(cfg.seed, 0, 1))
    try:
        model = load_checkpoint(args.checkpoint)
        extra = checkpoint_extra(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"cannot load checkpoint {args.checkpoint}: {exc}") from exc
    if "enc.w1" not in model.params:
        raise CliError(EXIT_MISMATCH, f"{args.checkpoint} holds no encoder")
    if extra.get("n_points") not in (None, n_points):
        raise CliError(EXIT_MISMATCH, f"checkpoint was trained on N_x={extra['n_points']} "
                                      f"but the dataset has N_x={n_points}")
    return model


def cmd_select(args) -> int:
    cfg = _config(args)
    if cfg.out is None:
        raise CliError(EXIT_CONFIG, "select needs --out FILE for the manifest")
    spec, domains = _load_domains(cfg)
    by_id = {d.domain_id: d for d in domains}
    model = _load_model(args, cfg, spec.n_points)

    buffer = ReplayBuffer(cfg.k_total, tau=cfg.tau, alpha=cfg.alpha, seed=cfg.seed)
    if args.history:
        try:
            hist = load_buffer(args.history)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(EXIT_IO, f"cannot load history {args.history}: {exc}") from exc
        train_ids = {d.domain_id: {s.id for s in d.train} for d in domains}
        try:
            hist.validate(train_ids)
        except SelectionError as exc:
            raise CliError(EXIT_MISMATCH, f"history does not match the dataset: {exc}") from exc
        for s in hist.sets:
            if s.features.shape[1] != model.descriptor_dim:
                raise CliError(EXIT_MISMATCH, f"history features have dimension "
                                              f"{s.features.shape[1]}, model produces "
                                              f"{model.descriptor_dim}")
        buffer.sets = list(hist.sets)
    todo = args.domains if args.domains is not None else \
        [d.domain_id for d in domains if d.domain_id not in buffer.domain_ids]
    if not todo:
        raise CliError(EXIT_CONFIG, "no domains left to select from")
    for t in todo:
        if t not in by_id:
            raise CliError(EXIT_MISMATCH, f"domain {t} is not in {cfg.data}")

    entry_size = {s.domain_id: len(s.ids) for s in buffer.sets}
    for t in todo:
        d = by_id[t]
        before = {s.domain_id: set(s.ids) for s in buffer.sets}
        try:
            feats = embed(model, stack_points(d.train).astype(np.float32))
        except ModelError as exc:
            raise CliError(EXIT_MISMATCH, f"cannot embed domain {t}: {exc}") from exc
        rec = info_quantity_from_features(feats, t, cfg.gamma_k, cfg.epsilon, cfg.infoq_cap,
                                          _seed(cfg.seed, t + 1, 7), cfg.median_gamma)
        d_thr = cfg.d_thr if cfg.d_thr is not None else cfg.d_thr_fraction * d.world_extent
        cands = Candidates([s.id for s in d.train], feats.astype(np.float32),
                           stack_poses(d.train))
        try:
            buffer = update_buffer(buffer, rec, cands, d_thr, seed=_seed(cfg.seed, t + 1, 8),
                                   selection=cfg.selection, allocation=cfg.allocation)
        except SelectionError as exc:
            raise CliError(EXIT_MISMATCH, str(exc)) from exc
        for s in buffer.sets:
            if s.domain_id in before and not set(s.ids) <= before[s.domain_id]:
                raise CliError(EXIT_INTERNAL, f"forgetting of domain {s.domain_id} "
                                              f"is not a subset operation")
        entry_size[t] = len(buffer.sets[-1].ids)
    try:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        save_buffer(cfg.out, buffer)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {cfg.out}: {exc}") from exc

    print(f"{'domain':>6}  {'name':<12} {'InfoQ':>8} {'rank':>6} {'n':>6} {'k_t':>5} "
          f"{'|M_t|':>5} {'g(M)':>9}  status")
    for s in buffer.sets:
        g = diversity(range(len(s.ids)), s.candidates(), s.d_thr).g if s.ids else 0.0
        name = by_id[s.domain_id].name if s.domain_id in by_id else "?"
        status = "new" if s.domain_id in todo else "history"
        if len(s.ids) < entry_size[s.domain_id]:
            status += f", forgot {entry_size[s.domain_id] - len(s.ids)} (subset verified)"
        print(f"{s.domain_id:>6}  {name:<12} {s.record.info_q:8.4f} "
              f"{s.record.effective_rank:>6} {s.record.n_used:>6} {s.k:>5} {len(s.ids):>5} "
              f"{g:9.4f}  {status}")
    print(f"total {len(buffer)}/{buffer.k_total} samples -> {cfg.out}")
    return 0


# -- train ------------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    if cfg.out is None:
        raise CliError(EXIT_CONFIG, "train needs --out DIR")
    _, domains = _load_domains(cfg)
    out = Path(cfg.out)
    snap = out / RUN_CONFIG
    if (out / "progress.json").exists():
        if not args.resume:
            raise CliError(EXIT_CONFIG, f"{out} already holds a run; pass --resume to continue")
        if snap.exists():
            old = json.loads(snap.read_text())
            if old != cfg.to_dict():
                diff = sorted(k for k in old if old.get(k) != cfg.to_dict().get(k))
                raise CliError(EXIT_CONFIG, f"--resume with a different configuration "
                                            f"(fields {', '.join(diff)})")
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(snap)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    try:
        rec = run_sequence(domains, cfg.stage_config(), cfg.seed, out, resume=args.resume,
                           stop_after=args.stop_after)
    except StageFailure as exc:
        raise CliError(EXIT_STAGE, f"{exc} (completed stages are kept in {out})") from exc
    print(format_table(rec.matrix), end="")
    return 0


# -- report -----------------------------------------------------------------------------


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    path = run / "recall_matrix.json"
    if not path.exists():
        raise CliError(EXIT_NO_MATRIX, f"{path} not found")
    try:
        matrix = load_matrix(path)
    except (ValueError, KeyError, MetricsError) as exc:
        raise CliError(EXIT_NO_MATRIX, f"{path} is not a recall matrix: {exc}") from exc
    dest = Path(args.out) if args.out else run
    table = format_table(matrix)
    try:
        dest.mkdir(parents=True, exist_ok=True)
        (dest / "report.txt").write_text(table)
        (dest / "report.json").write_text(json.dumps(summarize(matrix), indent=1) + "\n")
        (dest / "recall_series.csv").write_text(recall_series_csv(matrix))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report to {dest}: {exc}") from exc
    print(table, end="")
    return 0


COMMANDS = {"generate": cmd_generate, "select": cmd_select, "train": cmd_train,
            "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"lifelongpr {args.command}: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
