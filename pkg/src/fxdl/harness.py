"""Experiment orchestration: pipelines, evaluation protocol, artifacts, ablation presets.

All randomness derives from ``RunConfig.seed`` through named streams, so an
identical config reproduces every CSV byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .autograd import ParamSet, Tensor, no_grad
from .cache import CompensatorBank, ReuseProfile, effective_nfe, profile_reuse_error, select_segment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .denoiser import BlockStackModel, SegmentSpec, normalize_segments
from .diffusion import GuidanceConfig, Schedule, euler_sample
from .rng import Streams
from .stage1 import Stage1Result, TeacherConfig, stage1_loop, train_teacher
from .stage2 import Discriminator, Stage2Result, generate_inference_path, stage2_loop
from .worlds import MixtureSpec, preset

log = logging.getLogger(__name__)

OUT_ENV = "FXDL_OUT"
EVAL_HEADER = metrics.EvalReport.HEADER + ("effective_nfe",)


def output_dir(cfg: RunConfig) -> Path:
    """``$FXDL_OUT`` if set, else the configured directory; created on demand."""
    path = Path(os.environ.get(OUT_ENV) or cfg.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_id(cfg: RunConfig) -> str:
    return f"{cfg.world}-s{cfg.seed}"


# ---------------------------------------------------------------- csv


def write_rows(path: Path, rows: list[dict], header: list[str] | None = None) -> None:
    header = header or _header(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in header])


def _header(rows: list[dict]) -> list[str]:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    return keys


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------- models


def new_model(cfg: RunConfig, world: MixtureSpec, stream: str = "teacher/init") -> BlockStackModel:
    return BlockStackModel(world.dim, world.n_classes, cfg.model.blocks, cfg.model.hidden, cfg.model.mlp_ratio,
                           seed=Streams(cfg.seed).get(stream))


def load_params(params: ParamSet, arrays: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(arrays)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, p in params.items():
        a = arrays[k]
        if a.shape != p.data.shape:
            raise ConfigError(f"checkpoint shape mismatch for {k}: {a.shape} vs {p.data.shape}")
        p.data = a.astype(p.data.dtype, copy=True)


def load_model(cfg: RunConfig, world: MixtureSpec, path: str | Path) -> BlockStackModel:
    m = new_model(cfg, world)
    load_params(m.params, load_checkpoint(path))
    m.uncond_trained = cfg.teacher.cond_dropout > 0
    return m


# ---------------------------------------------------------------- memoized stages

_MEMO: dict[str, object] = {}


def clear_memo() -> None:
    _MEMO.clear()


def _key(*parts) -> str:
    return json.dumps(parts, sort_keys=True, default=str)


def _teacher_key(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return _key("teacher", d["world"], d["seed"], d["model"], d["teacher"])


def get_teacher(cfg: RunConfig, log_rows: list | None = None) -> BlockStackModel:
    key = _teacher_key(cfg)
    if key not in _MEMO:
        world = preset(cfg.world)
        model = new_model(cfg, world)
        rows: list[dict] = []
        t = cfg.teacher
        train_teacher(world, model, TeacherConfig(iters=t.iters, batch=t.batch, lr=t.lr, cond_dropout=t.cond_dropout),
                      seed=cfg.seed, callback=lambda i, loss: rows.append({"iter": i + 1, "loss": loss}))
        _MEMO[key] = (model, rows)
    model, rows = _MEMO[key]
    if log_rows is not None:
        log_rows.extend(rows)
    return model


def _stage1_key(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    return _key(_teacher_key(cfg), "stage1", d["stage1"], d["eval"])


def get_stage1(cfg: RunConfig, teacher: BlockStackModel | None = None) -> Stage1Result:
    key = _stage1_key(cfg)
    if key not in _MEMO:
        teacher = teacher or get_teacher(cfg)
        world = preset(cfg.world)
        s1 = cfg.stage1_config()
        evaluator = None
        if cfg.eval.every:
            def evaluator(G, it):
                r = evaluate_model(cfg, G, None, teacher, cache_on=False)
                return {"mode_coverage": r.mode_coverage, "diversity": r.diversity, "mmd": r.mmd2}
        _MEMO[key] = stage1_loop(s1, teacher, world, G=teacher.copy_weights(), fake=teacher.copy_weights(),
                                 evaluator=evaluator)
    return _MEMO[key]


def profile_model(cfg: RunConfig, model: BlockStackModel) -> ReuseProfile:
    world = preset(cfg.world)
    return profile_reuse_error(model, Schedule(tuple(cfg.stage1.schedule)), world.n_classes,
                               batch=cfg.cache.profile_batch, seed=Streams(cfg.seed).get("cache/profile"))


def resolve_segment(cfg: RunConfig, model: BlockStackModel):
    """SegmentSpec or list of them (None when caching is off)."""
    if not cfg.cache.enabled:
        return None
    seg = cfg.cache.segment
    if seg == "auto":
        return select_segment(profile_model(cfg, model), cfg.cache.k, cfg.cache.min_start)
    if isinstance(seg[0], (list, tuple)):
        return [SegmentSpec(int(a), int(b)) for a, b in seg]
    return SegmentSpec(int(seg[0]), int(seg[1]))


def _segment_tuple(seg):
    if seg is None:
        return None
    if isinstance(seg, SegmentSpec):
        return (seg.n, seg.m)
    return tuple((s.n, s.m) for s in seg)


def _stage2_key(cfg: RunConfig, segment) -> str:
    d = cfg.to_dict()
    base = _stage1_key(cfg) if d["stage2"]["init"] == "stage1" and d["stage1"]["enabled"] else _teacher_key(cfg)
    cache_part = {"train": d["cache"]["train"], "segment": _segment_tuple(segment) if d["cache"]["train"] else None,
                  "compensator": d["cache"]["compensator"] if d["cache"]["train"] else None}
    return _key(base, "stage2", d["stage2"], d["eval"], cache_part)


def stage2_init(cfg: RunConfig, teacher: BlockStackModel) -> BlockStackModel:
    if cfg.stage2.init == "stage1" and cfg.stage1.enabled:
        return get_stage1(cfg, teacher).generator
    return teacher


def get_stage2(cfg: RunConfig, teacher: BlockStackModel | None = None, segment=None,
               init: BlockStackModel | None = None) -> Stage2Result:
    """``init`` overrides the starting generator (e.g. one loaded from a checkpoint)."""
    # an explicit init is not part of the config, so it bypasses the memo
    key = _stage2_key(cfg, segment) if init is None else None
    if key is None or key not in _MEMO:
        teacher = teacher or get_teacher(cfg)
        world = preset(cfg.world)
        G0 = init or stage2_init(cfg, teacher)
        s2 = cfg.stage2_config(segment)
        evaluator = None
        if cfg.eval.every:
            def evaluator(G, bank, it):
                r = evaluate_model(cfg, G, bank, teacher, cache_on=s2.cache)
                return {"mode_coverage": r.mode_coverage, "diversity": r.diversity, "mmd": r.mmd2}
        res = stage2_loop(s2, G0.copy_weights(), teacher, world, evaluator=evaluator)
        if key is None:
            return res
        _MEMO[key] = res
    return _MEMO[key]


# ---------------------------------------------------------------- evaluation


def reference_set(cfg: RunConfig, teacher: BlockStackModel) -> dict[int, np.ndarray]:
    """Teacher samples per condition (guided, many steps): the target for mmd2."""
    key = _key(_teacher_key(cfg), "ref", cfg.eval.n, cfg.eval.ref_steps, cfg.eval.ref_w)
    if key not in _MEMO:
        world = preset(cfg.world)
        rs = Streams(cfg.seed).child("eval/reference")
        guidance = GuidanceConfig(cfg.eval.ref_w, 1.0) if cfg.eval.ref_w != 1.0 else None
        _MEMO[key] = {c: euler_sample(teacher, Schedule.uniform(cfg.eval.ref_steps), c, n=cfg.eval.n,
                                      dim=world.dim, seed=rs.get(f"c{c}"), cfg=guidance).x0.astype(np.float64)
                      for c in range(world.n_classes)}
    return _MEMO[key]


def sample_model(cfg: RunConfig, G: BlockStackModel, bank: CompensatorBank | None, x_init: np.ndarray, c,
                 cache_on: bool, steps: int | None = None) -> np.ndarray:
    schedule = Schedule(tuple(cfg.stage1.schedule)) if steps is None else Schedule.uniform(steps)
    with no_grad():
        out = generate_inference_path(G, bank, x_init.astype(G.dtype), c, cache_on and len(schedule) == 2,
                                      schedule)
    return out.x0.data.astype(np.float64)


def evaluate_model(cfg: RunConfig, G: BlockStackModel, bank: CompensatorBank | None, teacher: BlockStackModel,
                   cache_on: bool, steps: int | None = None) -> metrics.EvalReport:
    world = preset(cfg.world)
    ref = reference_set(cfg, teacher)
    rs = Streams(cfg.seed).child("eval/student")
    samples, groups = {}, []
    for c in range(world.n_classes):
        x = rs.get(f"c{c}").standard_normal((cfg.eval.n, world.dim))
        samples[c] = sample_model(cfg, G, bank, x, np.full(cfg.eval.n, c), cache_on, steps)
        g = cfg.eval.group_size
        xg = rs.get(f"groups/c{c}").standard_normal((cfg.eval.groups * g, world.dim))
        sg = sample_model(cfg, G, bank, xg, np.full(len(xg), c), cache_on, steps)
        groups += [sg[i:i + g] for i in range(0, len(sg), g)]
    return metrics.evaluate(samples, ref, world, groups)


def nfe_for(cfg: RunConfig, segment, cache_on: bool, steps: int | None = None) -> float:
    B = cfg.model.blocks
    n_steps = len(cfg.stage1.schedule) if steps is None else steps
    counts = [B] * n_steps
    if cache_on and segment is not None and n_steps == 2:
        counts[1] = B - sum(len(s) for s in normalize_segments(segment))
    return effective_nfe(B, counts).value


# ---------------------------------------------------------------- pipeline


@dataclass
class PipelineResult:
    cfg: RunConfig
    teacher: BlockStackModel
    student: BlockStackModel
    bank: CompensatorBank | None
    segment: object
    report: metrics.EvalReport
    nfe: float
    stage1: Stage1Result | None = None
    stage2: Stage2Result | None = None
    logs: dict[str, list[dict]] = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, out: Path | None = None) -> PipelineResult:
    """Teacher -> (Stage I) -> (Stage II) -> evaluation, with artifacts under ``out`` if given."""
    teacher_rows: list[dict] = []
    teacher = get_teacher(cfg, teacher_rows)
    s1 = get_stage1(cfg, teacher) if cfg.stage1.enabled else None
    student = s1.generator if s1 else teacher
    segment = resolve_segment(cfg, student)
    s2 = None
    bank = None
    if cfg.stage2.enabled:
        s2 = get_stage2(cfg, teacher, segment)
        student = s2.generator
        bank = s2.bank
    if cfg.cache.enabled and bank is None:
        bank = CompensatorBank("none", student.hidden, segment)
    report = evaluate_model(cfg, student, bank, teacher, cfg.cache.enabled)
    nfe = nfe_for(cfg, segment, cfg.cache.enabled)
    res = PipelineResult(cfg, teacher, student, bank, segment, report, nfe, s1, s2,
                         {"teacher": teacher_rows, "stage1": s1.log if s1 else [], "stage2": s2.log if s2 else []})
    if out is not None:
        write_pipeline_artifacts(res, out)
    return res


def write_pipeline_artifacts(res: PipelineResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(res.teacher.params, out / "teacher.ckpt")
    if res.stage1 is not None:
        save_checkpoint(res.stage1.generator.params, out / "stage1_generator.ckpt")
        save_checkpoint(res.stage1.fake.params, out / "stage1_fake.ckpt")
        write_rows(out / "stage1.csv", res.logs["stage1"], _stage1_header(res.logs["stage1"]))
    if res.stage2 is not None:
        save_stage2(res.stage2, out)
        write_rows(out / "stage2.csv", res.logs["stage2"], _stage2_header(res.logs["stage2"]))
    write_rows(out / "teacher.csv", res.logs["teacher"], ["iter", "loss"])
    append_eval(out / "eval.csv", res.report, run_id(res.cfg), "final", res.nfe)


def _stage1_header(rows):
    base = ["iter", "dmd_loss_surrogate", "fake_loss"]
    return base + [k for k in ("mode_coverage", "diversity", "mmd") if any(k in r for r in rows)]


def _stage2_header(rows):
    base = ["iter", "L_G", "L_D", "cache_gap"]
    return base + [k for k in ("mode_coverage", "diversity", "mmd") if any(k in r for r in rows)]


def save_stage2(res: Stage2Result, out: Path) -> None:
    save_checkpoint(res.generator.params, out / "stage2_generator.ckpt")
    disc = dict(res.disc.params.arrays())
    disc.update({f"disc.frozen.{k}": v for k, v in res.disc.frozen.items()})
    save_checkpoint(disc, out / "discriminator.ckpt")
    if res.bank is not None:
        save_checkpoint(res.bank.params, out / "compensator.ckpt")


def append_eval(path: Path, report: metrics.EvalReport, rid: str, it, nfe: float) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(EVAL_HEADER)
        w.writerow(report.row(rid, it) + [repr(float(nfe))])


# ---------------------------------------------------------------- ablations

SEEDS = (0, 1, 2, 3, 4)


def _preset_axes(name: str, B: int) -> list[tuple[str, dict]]:
    late = B - 2
    if name == "guidance":
        return [("control", {"stage1.alpha": 0.94, "stage2.enabled": False}),
                ("always-cfg", {"stage1.alpha": 1.0, "stage2.enabled": False})]
    if name == "alpha-sweep":
        return [(f"alpha={a}", {"stage1.alpha": a, "stage2.enabled": False})
                for a in (0.85, 0.90, 0.92, 0.94, 0.97, 1.0)]
    if name == "curves":
        return [(f"curve-{c}", {"stage1.curve": c, "stage2.enabled": False}) for c in ("a", "b", "c", "d", "uniform")]
    if name == "stages":
        return [("stage1-uniform", {"stage1.curve": "uniform", "stage2.enabled": False}),
                ("stage1-c", {"stage1.curve": "c", "stage2.enabled": False}),
                ("stage1+2", {"stage1.curve": "c", "stage2.enabled": True}),
                ("stage2-only", {"stage1.enabled": False, "stage2.enabled": True, "stage2.init": "teacher"})]
    if name == "cache":
        return [("no-cache", {"cache.enabled": False, "cache.train": False}),
                ("naive-post-hoc", {"cache.enabled": True, "cache.train": False, "cache.compensator": "none"}),
                ("dct-no-mlp", {"cache.enabled": True, "cache.train": True, "cache.compensator": "none"}),
                ("dct", {"cache.enabled": True, "cache.train": True, "cache.compensator": "segment"})]
    if name == "blocks":
        mid = B // 2 - 1 if B // 2 - 1 > 3 else 4
        return [("early", {"cache.segment": [3, 4]}),
                ("middle", {"cache.segment": [mid, mid + 1]}),
                ("late", {"cache.segment": [late, late + 1]}),
                ("mixed-early-late", {"cache.segment": [[3, 3], [late + 1, late + 1]]}),
                ("mixed-early-middle", {"cache.segment": [[3, 3], [mid + 1, mid + 1]]})]
    if name == "mlp":
        return [(f"mlp-{v}", {"cache.compensator": v}) for v in ("none", "segment", "per_block")]
    if name == "kd":
        return [(f"kd-feat{a}-out{b}", {"stage2.kd_feat": a, "stage2.kd_out": b})
                for a, b in ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))]
    raise ConfigError(f"unknown ablation preset {name!r}; known: {', '.join(PRESET_NAMES)}")


PRESET_NAMES = ("guidance", "alpha-sweep", "curves", "stages", "cache", "blocks", "mlp", "kd")

# Cache-related presets train the generator with the compensator unless the member says otherwise.
_PRESET_BASE = {
    "blocks": {"cache.enabled": True, "cache.train": True},
    "mlp": {"cache.enabled": True, "cache.train": True},
    "kd": {"cache.enabled": True, "cache.train": True},
}


def ablation_presets(name: str, base: RunConfig | None = None, seeds=SEEDS) -> list[tuple[str, RunConfig]]:
    """(label, config) pairs differing from ``base`` only in the studied fields and the seed."""
    base = base or RunConfig()
    axes = _preset_axes(name, base.model.blocks)
    common = _PRESET_BASE.get(name, {})
    out = []
    for seed in seeds:
        for label, overrides in axes:
            out.append((label, base.replace(seed=seed, **{**common, **overrides})))
    return out


def run_ablation(name: str, base: RunConfig | None = None, seeds=SEEDS, out: Path | None = None) -> list[dict]:
    rows = []
    for label, cfg in ablation_presets(name, base, seeds):
        res = run_pipeline(cfg)
        r = {"preset": name, "label": label, "seed": cfg.seed}
        r.update({k: getattr(res.report, k) for k in metrics.EvalReport.__dataclass_fields__})
        r["effective_nfe"] = res.nfe
        rows.append(r)
        log.info("%s %s seed=%d %s", name, label, cfg.seed, res.report)
    if out is not None:
        write_rows(out / f"ablation_{name}.csv", rows)
    return rows


def summarize(rows: list[dict], metric: str) -> dict[str, float]:
    """Median of ``metric`` per label."""
    labels = list(dict.fromkeys(r["label"] for r in rows))
    return {lab: float(np.median([r[metric] for r in rows if r["label"] == lab])) for lab in labels}
