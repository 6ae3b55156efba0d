"""Run configuration: nested YAML mapping onto dataclasses, unknown keys rejected.

Example::

    world: ring8
    seed: 0
    model: {blocks: 8, hidden: 32}
    stage1: {max_iters: 1000, curve: c}
    cache: {enabled: true, train: true, segment: auto, k: 2}
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .autograd import ContractError
from .denoiser import SegmentSpec
from .stage1 import CURVES, Stage1Config
from .stage2 import Stage2Config
from .worlds import PRESETS


class ConfigError(ContractError):
    """Malformed or inconsistent configuration (a usage error)."""


@dataclass
class ModelSection:
    blocks: int = 8
    hidden: int = 32
    mlp_ratio: int = 4


@dataclass
class TeacherSection:
    iters: int = 3000
    batch: int = 256
    lr: float = 2e-3
    cond_dropout: float = 0.1


@dataclass
class Stage1Section:
    enabled: bool = True
    schedule: tuple[float, ...] = (1.0, 0.75)
    w: float = 7.0
    alpha: float = 0.94
    ttur: int = 1
    lr_gen: float = 1e-4
    lr_fake: float = 8e-4
    max_iters: int = 1000
    curve: str = "c"
    batch: int = 256


@dataclass
class Stage2Section:
    enabled: bool = True
    init: str = "stage1"          # "stage1" | "teacher"
    ttur: int = 3
    lr_gen: float = 2e-5
    lr_comp: float = 1e-4
    lr_disc: float = 2e-4
    warmup: int = 500
    max_iters: int = 2000
    reference_steps: int = 8
    reference_w: float = 1.0
    kd_feat: float = 0.0
    kd_out: float = 0.0
    batch: int = 256


@dataclass
class CacheSection:
    enabled: bool = False         # sample the second step through the cache
    train: bool = False           # co-train generator and compensator in Stage II
    segment: Any = "auto"         # "auto" | [n, m] | [[n, m], [n, m]]
    k: int = 2
    min_start: int = 3
    compensator: str = "segment"  # "none" | "segment" | "per_block"
    profile_batch: int = 256


@dataclass
class EvalSection:
    n: int = 1000                 # samples per condition
    groups: int = 100             # diversity groups per condition
    group_size: int = 4
    ref_steps: int = 28
    ref_w: float = 7.0
    every: int = 0                # Stage I/II in-loop evaluation cadence (0 = off)


@dataclass
class RunConfig:
    world: str = "ring8"
    seed: int = 0
    out_dir: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    stage2: Stage2Section = field(default_factory=Stage2Section)
    cache: CacheSection = field(default_factory=CacheSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -------------------------------------------------------- conversion

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        cfg = _build(cls, data or {}, "")
        cfg.validate()
        return cfg

    def replace(self, **dotted) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"stage1.alpha": 1.0})``."""
        d = self.to_dict()
        for key, value in dotted.items():
            node = d
            parts = key.split(".")
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = copy.deepcopy(value)
        return RunConfig.from_dict(d)

    # -------------------------------------------------------- validation

    def validate(self) -> None:
        if self.world not in PRESETS:
            raise ConfigError(f"unknown world {self.world!r}; known: {sorted(PRESETS)}")
        if self.model.blocks < 4:
            raise ConfigError("model.blocks must be >= 4")
        if self.model.hidden < 8:
            raise ConfigError("model.hidden must be >= 8")
        if not 0.0 <= self.teacher.cond_dropout < 1.0:
            raise ConfigError("teacher.cond_dropout must be in [0, 1)")
        if self.stage1.curve not in CURVES:
            raise ConfigError(f"unknown stage1.curve {self.stage1.curve!r}")
        if self.stage2.init not in ("stage1", "teacher"):
            raise ConfigError("stage2.init must be 'stage1' or 'teacher'")
        if self.cache.compensator not in ("none", "segment", "per_block"):
            raise ConfigError(f"unknown cache.compensator {self.cache.compensator!r}")
        if self.cache.train and not self.cache.enabled:
            raise ConfigError("cache.train requires cache.enabled")
        if self.cache.enabled and len(self.stage1.schedule) != 2:
            raise ConfigError("caching is defined for the two-step schedule")
        seg = self.cache.segment
        if seg != "auto":
            pairs = seg if seg and isinstance(seg[0], (list, tuple)) else [seg]
            last = -1
            for p in pairs:
                if len(p) != 2 or not 0 <= p[0] <= p[1] < self.model.blocks:
                    raise ConfigError(f"cache.segment {seg!r} outside {self.model.blocks} blocks")
                if p[0] <= last:
                    raise ConfigError("cache segments must be ordered and non-overlapping")
                last = p[1]
        elif self.cache.min_start + self.cache.k > self.model.blocks:
            raise ConfigError("cache.k + cache.min_start exceeds model.blocks")
        for n in ("n", "groups"):
            if getattr(self.eval, n) < 1:
                raise ConfigError(f"eval.{n} must be >= 1")
        if self.eval.group_size < 2:
            raise ConfigError("eval.group_size must be >= 2")
        try:
            self.stage1_config()
            self.stage2_config(segment=None)
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc

    # -------------------------------------------------------- derived

    def stage1_config(self) -> Stage1Config:
        s = self.stage1
        return Stage1Config(schedule=tuple(s.schedule), w=s.w, alpha=s.alpha, ttur=s.ttur, lr_gen=s.lr_gen,
                            lr_fake=s.lr_fake, max_iters=s.max_iters, curve=s.curve, batch=s.batch,
                            eval_every=self.eval.every, seed=self.seed)

    def stage2_config(self, segment) -> Stage2Config:
        s = self.stage2
        train_cache = self.cache.train and segment is not None
        if isinstance(segment, SegmentSpec):
            segment = (segment.n, segment.m)
        elif segment is not None:
            segment = tuple((sg.n, sg.m) if isinstance(sg, SegmentSpec) else tuple(sg) for sg in segment)
        return Stage2Config(schedule=tuple(self.stage1.schedule), ttur=s.ttur, lr_gen=s.lr_gen, lr_comp=s.lr_comp,
                            lr_disc=s.lr_disc, warmup=s.warmup, max_iters=s.max_iters, cache=train_cache,
                            segment=segment if train_cache else None, compensator=self.cache.compensator,
                            reference_steps=s.reference_steps, reference_w=s.reference_w,
                            kd_feat=s.kd_feat, kd_out=s.kd_out, batch=s.batch,
                            eval_every=self.eval.every, seed=self.seed)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        if default == "auto":  # segment: "auto" or a list
            if isinstance(value, list):
                return _plain(value)
        raise ConfigError(f"{where} must be a string")
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        return tuple(float(v) for v in value)
    return value


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    inst = cls()
    for name, value in data.items():
        default = getattr(inst, name)
        where = prefix + name
        if dataclasses.is_dataclass(default):
            setattr(inst, name, _build(type(default), value, where + "."))
        else:
            setattr(inst, name, _coerce(value, default, where))
    return inst


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
