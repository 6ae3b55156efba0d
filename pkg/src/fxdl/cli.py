"""Command-line entry point.

Exit status: 0 success, 1 runtime failure (e.g. missing or corrupt
artifact), 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .autograd import ContractError, NumericError
from .cache import CompensatorBank, select_segment
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .denoiser import SegmentSpec
from .rng import Streams
from .stage1 import flow_excess_loss
from .worlds import preset

EXIT_RUNTIME, EXIT_USAGE, EXIT_NUMERIC = 1, 2, 3
SEGMENT_FILE = "cache_segment.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fxdl", description="Two-step distillation with block caching on toy worlds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", metavar="PATH", help="YAML run configuration")
        return s

    cmd("train-teacher", "train the flow-matching teacher")
    d = cmd("distill", "run a distillation stage")
    d.add_argument("--stage", type=int, choices=(1, 2), required=True)
    pc = cmd("profile-cache", "per-block reuse-error profile and segment choice")
    pc.add_argument("--model", choices=("teacher", "stage1", "stage2"), default=None)
    s = cmd("sample", "draw samples from a student and evaluate them")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--n", type=int, default=None, help="samples per condition")
    s.add_argument("--checkpoint", metavar="PATH", default=None)
    e = cmd("eval", "evaluate the latest student")
    e.add_argument("--checkpoint", metavar="PATH", default=None)
    a = cmd("ablate", "run an ablation preset")
    a.add_argument("--preset", required=True, choices=harness.PRESET_NAMES)
    a.add_argument("--seeds", default=None, help="comma-separated seeds (default 0..4)")
    return p


# ---------------------------------------------------------------- helpers


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found ({hint})")
    return path


def _teacher(cfg: RunConfig, out: Path):
    return harness.load_model(cfg, preset(cfg.world), _require(out / "teacher.ckpt", "run train-teacher first"))


def _student_path(out: Path, explicit: str | None) -> Path:
    if explicit:
        return _require(Path(explicit), "checkpoint given by --checkpoint")
    for name in ("stage2_generator.ckpt", "stage1_generator.ckpt"):
        if (out / name).exists():
            return out / name
    raise FileNotFoundError(f"no student checkpoint in {out} (run distill first)")


def _segment_from_file(out: Path):
    path = out / SEGMENT_FILE
    if not path.exists():
        return None
    data = json.loads(path.read_text())
    if data and isinstance(data[0], list):
        return [SegmentSpec(a, b) for a, b in data]
    return SegmentSpec(*data)


def _segment_json(seg) -> str:
    if isinstance(seg, SegmentSpec):
        return json.dumps([seg.n, seg.m])
    return json.dumps([[s.n, s.m] for s in seg])


def _bank(cfg: RunConfig, out: Path, G, student_path: Path):
    """Compensator for cached sampling: trained one next to a Stage II student, else naive reuse."""
    seg = _segment_from_file(out) or harness.resolve_segment(cfg, G)
    trained = student_path.name == "stage2_generator.ckpt" and cfg.cache.train and (out / "compensator.ckpt").exists()
    bank = CompensatorBank(cfg.cache.compensator if trained else "none", G.hidden, seg, dtype=G.dtype)
    if trained:
        harness.load_params(bank.params, load_checkpoint(out / "compensator.ckpt"))
    return bank, seg


# ---------------------------------------------------------------- commands


def cmd_train_teacher(cfg: RunConfig, out: Path, args) -> str:
    rows: list[dict] = []
    teacher = harness.get_teacher(cfg, rows)
    save_checkpoint(teacher.params, out / "teacher.ckpt")
    harness.write_rows(out / "teacher.csv", rows, ["iter", "loss"])
    excess = flow_excess_loss(teacher, preset(cfg.world), n=1024, c=0)
    return f"train-teacher: {len(rows)} iters, final loss {rows[-1]['loss']:.4f}, excess {excess:.4f} -> {out}"


def cmd_distill(cfg: RunConfig, out: Path, args) -> str:
    world = preset(cfg.world)
    teacher = _teacher(cfg, out)
    if args.stage == 1:
        res = harness.get_stage1(cfg, teacher)
        save_checkpoint(res.generator.params, out / "stage1_generator.ckpt")
        save_checkpoint(res.fake.params, out / "stage1_fake.ckpt")
        harness.write_rows(out / "stage1.csv", res.log, harness._stage1_header(res.log))
        last = res.log[-1]
        return f"distill stage 1: {len(res.log)} iters, mean|d| {last['dmd_loss_surrogate']:.4f} -> {out}"
    if cfg.stage2.init == "stage1":
        G0 = harness.load_model(cfg, world, _require(out / "stage1_generator.ckpt", "run distill --stage 1 first"))
    else:
        G0 = teacher
    segment = harness.resolve_segment(cfg, G0) if cfg.cache.train else None
    res = harness.get_stage2(cfg, teacher, segment, init=G0)
    harness.save_stage2(res, out)
    if segment is not None:
        (out / SEGMENT_FILE).write_text(_segment_json(segment))
    harness.write_rows(out / "stage2.csv", res.log, harness._stage2_header(res.log))
    last = res.log[-1]
    return f"distill stage 2: L_G {last['L_G']:.4f}, L_D {last['L_D']:.4f}, cache {'on' if segment else 'off'} -> {out}"


def cmd_profile_cache(cfg: RunConfig, out: Path, args) -> str:
    world = preset(cfg.world)
    which = args.model
    if which is None:
        which = next((m for m in ("stage2", "stage1") if (out / f"{m}_generator.ckpt").exists()), "teacher")
    path = out / ("teacher.ckpt" if which == "teacher" else f"{which}_generator.ckpt")
    model = harness.load_model(cfg, world, _require(path, f"no {which} checkpoint"))
    prof = harness.profile_model(cfg, model)
    prof.to_csv(out / "profile.csv")
    seg = select_segment(prof, cfg.cache.k, cfg.cache.min_start)
    return (f"profile-cache ({which}): e_n = {np.array2string(prof.errors, precision=4)}; "
            f"segment [{seg.n}, {seg.m}] -> {out / 'profile.csv'}")


def _sample_and_eval(cfg: RunConfig, out: Path, args, write_samples: bool) -> str:
    world = preset(cfg.world)
    teacher = _teacher(cfg, out)
    spath = _student_path(out, args.checkpoint)
    G = harness.load_model(cfg, world, spath)
    steps = getattr(args, "steps", None)
    n_steps = steps or len(cfg.stage1.schedule)
    cache_on = cfg.cache.enabled and n_steps == 2
    bank, seg = _bank(cfg, out, G, spath) if cache_on else (None, None)
    if getattr(args, "n", None):
        cfg = cfg.replace(**{"eval.n": args.n})
    report = harness.evaluate_model(cfg, G, bank, teacher, cache_on, steps)
    nfe = harness.nfe_for(cfg, seg, cache_on, n_steps)
    harness.append_eval(out / "eval.csv", report, harness.run_id(cfg), f"{spath.stem}@{n_steps}", nfe)
    if write_samples:
        rs = Streams(cfg.seed).child("sample")
        rows = []
        for c in range(world.n_classes):
            x = harness.sample_model(cfg, G, bank, rs.get(f"c{c}").standard_normal((cfg.eval.n, world.dim)),
                                     np.full(cfg.eval.n, c), cache_on, steps)
            rows += [{"condition": c, **{f"x{j}": float(v) for j, v in enumerate(row)}} for row in x]
        harness.write_rows(out / "samples.csv", rows)
    return (f"{'sample' if write_samples else 'eval'}: {spath.name} steps={n_steps} nfe={nfe:.2f} "
            f"coverage={report.mode_coverage:.3f} hq={report.hq_fraction:.3f} "
            f"diversity={report.diversity:.3f} mmd2={report.mmd2:.4f} acc={report.condition_accuracy:.3f}")


def cmd_sample(cfg, out, args) -> str:
    if args.steps is not None and args.steps < 1:
        raise UsageError("--steps must be >= 1")
    if args.n is not None and args.n < 2:
        raise UsageError("--n must be >= 2")
    return _sample_and_eval(cfg, out, args, True)


def cmd_eval(cfg, out, args) -> str:
    return _sample_and_eval(cfg, out, args, False)


def cmd_ablate(cfg: RunConfig, out: Path, args) -> str:
    seeds = harness.SEEDS
    if args.seeds:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError as exc:
            raise UsageError(f"bad --seeds {args.seeds!r}") from exc
    rows = harness.run_ablation(args.preset, cfg, seeds, out)
    parts = []
    for metric in ("diversity", "hq_fraction", "mode_coverage", "mmd2"):
        med = harness.summarize(rows, metric)
        parts.append(metric + " " + ", ".join(f"{k}={v:.4g}" for k, v in med.items()))
    return f"ablate {args.preset} ({len(rows)} runs, medians): " + "; ".join(parts)


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "profile-cache": cmd_profile_cache,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        out = harness.output_dir(cfg)
        dump_config(cfg, out / "config.yaml")
        print(COMMANDS[args.command](cfg, out, args))
        return 0
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, FileNotFoundError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
