"""Run configuration shared by the command-line tools.

Defaults use the reference hyperparameters where they exist (kernel width,
rank threshold, temperature, replay budget, prompt sizes) and desk-scale values
elsewhere. Every field can be set from a JSON file or a command-line flag.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .trainer import StageConfig

SEED_ENV = "LIFELONGPR_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # inputs and outputs
    sequence: str | None = None  # profile / sequence-spec JSON for `generate`
    data: str | None = None  # dataset directory
    out: str | None = None  # output directory or file
    seed: int = 0
    n_points: int = 256
    # method and schedule
    method: str = "lifelongpr"
    epochs: int = 10
    lr: float = 1e-3
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    lr_stage1: float = 1e-3
    lr_stage2: float = 2e-4
    first_domain_schedule: str = "single"
    lam: float = 0.9
    margin: float = 0.2
    batch_anchors: int = 8
    n_pos: int = 2
    n_neg: int = 4
    replay_fraction: float = 0.25
    kd_in_stage1: bool = True
    # replay selection
    k_total: int = 256
    tau: float = 4.0
    alpha: float = 8.0
    gamma_k: float = 0.2
    median_gamma: bool = False
    epsilon: float = 1e-6
    infoq_cap: int = 2048
    d_thr: float | None = None
    d_thr_fraction: float = 0.25
    selection: str = "greedy"
    allocation: str = "infoq"
    # prompt module
    k_q: int = 64
    prompt_dim: int = 8
    n_attn: int = 2
    # training-time augmentation of replay positives
    augment_sigma: float = 0.01
    augment_drop: float = 0.2
    # radii override the values stored with the dataset when set
    positive_radius: float | None = None
    negative_radius: float | None = None
    eval_radius: float | None = None

    def stage_config(self) -> StageConfig:
        names = {f.name for f in fields(StageConfig)}
        return StageConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def validate(self) -> None:
        try:
            self.stage_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.n_points < 8:
            raise ConfigError(f"invalid field 'n_points'={self.n_points!r}")
        for name in ("positive_radius", "negative_radius", "eval_radius"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"invalid field {name!r}={v!r}")
        if self.positive_radius is not None and self.negative_radius is not None \
                and self.positive_radius >= self.negative_radius:
            raise ConfigError("invalid field 'positive_radius': must be below negative_radius")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("a config file must hold a JSON object")
        kinds = {f.name: f for f in fields(cls)}
        for k, v in raw.items():
            if k not in kinds:
                raise ConfigError(f"unknown config field {k!r}")
            _check_type(k, v, cls.__dataclass_fields__[k].default)
        return cls(**raw)


def _check_type(name, value, default):
    if value is None:
        if default is None:
            return
        raise ConfigError(f"invalid field {name!r}=None")
    typ = field_types()[name]
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"invalid field {name!r}={value!r}")


_STRINGS = {"sequence", "data", "out"}


def field_types() -> dict[str, type]:
    """Type used to parse each field from a command-line string."""
    out = {}
    for f in fields(RunConfig):
        d = f.default
        if f.name in _STRINGS or isinstance(d, str):
            out[f.name] = str
        elif isinstance(d, bool):
            out[f.name] = bool
        elif isinstance(d, int):
            out[f.name] = int
        else:
            out[f.name] = float
    return out


def load_config(path: str | os.PathLike | None, overrides: dict,
                env: dict | None = None) -> RunConfig:
    """Defaults < config file < LIFELONGPR_SEED < explicit flags."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"invalid {SEED_ENV}={env[SEED_ENV]!r}") from exc
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.validate()
    return cfg
