"""Block-contribution caching: compensator, reuse-error profile, segment choice."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ParamSet, Tensor
from .denoiser import BlockStackModel, SegmentSpec, normalize_segments
from .diffusion import Schedule, euler_sample


class Compensator:
    """Residual MLP f(D) = D + W2 silu(W1 norm(D)); W2 and its bias start at zero."""

    def __init__(self, dim: int, seed: int | np.random.Generator = 0, dtype=None, prefix: str = "comp"):
        dtype = dtype or ag.default_dtype()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.dim = dim
        self.prefix = prefix
        h = 2 * dim
        p = {
            "norm.g": np.ones(dim, dtype),
            "norm.b": np.zeros(dim, dtype),
            "fc1.w": (rng.standard_normal((dim, h)) / np.sqrt(dim)).astype(dtype),
            "fc1.b": np.zeros(h, dtype),
            "fc2.w": np.zeros((h, dim), dtype),
            "fc2.b": np.zeros(dim, dtype),
        }
        self.params = ParamSet((f"{prefix}.{k}", Tensor(v, requires_grad=True, name=f"{prefix}.{k}"))
                               for k, v in p.items())

    @staticmethod
    def expected_param_count(d: int) -> int:
        return d * 2 * d + 2 * d + 2 * d * d + d + 2 * d

    def _p(self, k: str) -> Tensor:
        return self.params[f"{self.prefix}.{k}"]

    def __call__(self, delta) -> Tensor:
        delta = delta if isinstance(delta, Tensor) else Tensor(np.asarray(delta, dtype=self._p("fc2.w").dtype))
        if delta.data.ndim != 2 or delta.shape[1] != self.dim:
            raise ContractError(f"delta shape {delta.shape}, expected (n, {self.dim})")
        z = ag.add(ag.mul(ag.layer_norm(delta), self._p("norm.g")), self._p("norm.b"))
        a = ag.silu(ag.affine(z, self._p("fc1.w"), self._p("fc1.b")))
        return ag.add(delta, ag.affine(a, self._p("fc2.w"), self._p("fc2.b")))


def compensate(f: Compensator | None, delta) -> Tensor:
    """Predicted next-step contribution. ``f=None`` is naive reuse."""
    if f is None:
        return delta if isinstance(delta, Tensor) else Tensor(np.asarray(delta))
    return f(delta)


class CompensatorBank:
    """Compensators for one or more skipped segments.

    ``"segment"`` keeps one compensator per segment, ``"per_block"`` one per
    skipped block (the segment prediction is the sum over its blocks) and
    ``"none"`` is naive reuse.
    """

    VARIANTS = ("none", "segment", "per_block")

    def __init__(self, variant: str, dim: int, segment, seed=0, dtype=None):
        if variant not in self.VARIANTS:
            raise ContractError(f"unknown compensator variant {variant!r}")
        self.variant = variant
        self.segments = normalize_segments(segment)
        self.single = isinstance(segment, SegmentSpec)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.members: list[list[Compensator]] = []
        for sg in self.segments:
            if variant == "segment":
                self.members.append([Compensator(dim, rng, dtype, prefix=f"comp{sg.n}_{sg.m}")])
            elif variant == "per_block":
                self.members.append([Compensator(dim, rng, dtype, prefix=f"comp{b}")
                                     for b in range(sg.n, sg.m + 1)])
            else:
                self.members.append([])
        self.params = ParamSet()
        for group in self.members:
            for f in group:
                self.params.update(f.params)

    @property
    def needs_block_deltas(self) -> bool:
        return self.variant == "per_block"

    def _predict_one(self, group, delta, block_deltas):
        if self.variant == "none":
            return compensate(None, delta)
        if self.variant == "segment":
            return group[0](delta)
        if block_deltas is None or len(block_deltas) != len(group):
            raise ContractError("per-block compensation needs one cached delta per skipped block")
        out = None
        for f, d in zip(group, block_deltas):
            out = f(d) if out is None else ag.add(out, f(d))
        return out

    def predict(self, delta, block_deltas=None):
        """Predicted contribution(s): a Tensor for a single segment, else a list."""
        if self.single:
            return self._predict_one(self.members[0], delta, block_deltas)
        block_deltas = block_deltas or [None] * len(self.segments)
        return [self._predict_one(g, d, bd) for g, d, bd in zip(self.members, delta, block_deltas)]


@dataclass
class ReuseProfile:
    errors: np.ndarray
    steps: tuple[float, float]
    batch: int

    def __len__(self) -> int:
        return len(self.errors)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "e_n"])
            for i, e in enumerate(self.errors):
                w.writerow([i, repr(float(e))])


def profile_reuse_error(model: BlockStackModel, schedule: Schedule, n_classes: int, batch: int = 256,
                        seed: int | np.random.Generator = 0, step_index: int = 0) -> ReuseProfile:
    """Per-block mean-absolute change of the block contribution between adjacent steps."""
    if len(schedule) < 2:
        raise ContractError("profiling needs a schedule with at least two steps")
    if not 0 <= step_index < len(schedule) - 1:
        raise ContractError("step_index out of range")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c = rng.integers(0, n_classes, size=batch)
    res = euler_sample(model, schedule, c, x_init=rng.standard_normal((batch, model.data_dim)),
                       record_taps=True)
    d0 = res.taps[step_index].deltas()
    d1 = res.taps[step_index + 1].deltas()
    errs = np.array([np.abs(b - a).mean() for a, b in zip(d0, d1)], dtype=np.float64)
    return ReuseProfile(errs, (schedule[step_index], schedule[step_index + 1]), batch)


def select_segment(profile: ReuseProfile | np.ndarray, k: int, min_start: int = 3) -> SegmentSpec:
    """Contiguous window of length k starting at >= min_start with the least total error."""
    e = np.asarray(profile.errors if isinstance(profile, ReuseProfile) else profile, dtype=np.float64)
    if k < 1 or min_start < 0 or min_start + k > len(e):
        raise ContractError(f"no window of length {k} starting at >= {min_start} in {len(e)} blocks")
    best, best_n = None, None
    for n in range(min_start, len(e) - k + 1):
        s = float(e[n:n + k].sum())
        if best is None or s < best:
            best, best_n = s, n
    return SegmentSpec(best_n, best_n + k - 1)


@dataclass(frozen=True)
class EffectiveNFE:
    value: float

    @property
    def rounded(self) -> float:
        return round(self.value + 1e-12, 2)

    def __float__(self) -> float:
        return self.value


def effective_nfe(total_blocks: int, computed_blocks_per_step) -> EffectiveNFE:
    """Fully computed blocks over all steps divided by the model's block count."""
    counts = [int(c) for c in computed_blocks_per_step]
    if any(c < 0 or c > total_blocks for c in counts):
        raise ContractError("computed block count outside [0, total_blocks]")
    return EffectiveNFE(sum(counts) / total_blocks)
