"""Rectified-flow algebra, guidance, schedules and the Euler sampler.

Convention: t = 1 is pure noise, t = 0 is clean data,
x_t = (1 - t) x0 + t eps and the velocity target is v = eps - x0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import ContractError, Tensor, no_grad


def _as_np(v) -> np.ndarray:
    return v.data if isinstance(v, Tensor) else np.asarray(v)


def _tcol(t, like):
    """Broadcast a scalar or per-sample t against a (n, D) array."""
    if np.ndim(t) == 0:
        return float(t)
    t = np.asarray(t, dtype=_as_np(like).dtype)
    return t.reshape(-1, *([1] * (np.ndim(_as_np(like)) - 1)))


@dataclass(frozen=True)
class TimeShift:
    s: float = 3.0

    def __post_init__(self):
        if not self.s > 0:
            raise ContractError("shift must be positive")

    def __call__(self, u):
        return shift_time(u, self.s)


def shift_time(u, s: float = 3.0):
    """Warp uniform time u in [0, 1]: t = s u / (1 + (s - 1) u)."""
    u = np.asarray(u, dtype=np.float64)
    t = s * u / (1.0 + (s - 1.0) * u)
    return float(t) if t.ndim == 0 else t


def unshift_time(t, s: float = 3.0):
    """Inverse of :func:`shift_time`."""
    t = np.asarray(t, dtype=np.float64)
    u = t / (s - (s - 1.0) * t)
    return float(u) if u.ndim == 0 else u


@dataclass(frozen=True)
class Schedule:
    """Strictly decreasing timesteps starting at 1.0, all in (0, 1]."""

    steps: tuple[float, ...]

    def __post_init__(self):
        st = tuple(float(x) for x in self.steps)
        object.__setattr__(self, "steps", st)
        if not st:
            raise ContractError("empty schedule")
        if abs(st[0] - 1.0) > 1e-12:
            raise ContractError("schedule must start at 1.0")
        if any(b >= a for a, b in zip(st, st[1:])):
            raise ContractError("schedule must be strictly decreasing")
        if st[-1] <= 0.0:
            raise ContractError("schedule entries must be > 0")

    @classmethod
    def uniform(cls, k: int, shift: float = 3.0) -> "Schedule":
        u = 1.0 - np.arange(k) / k
        return cls(tuple(float(x) for x in shift_time(u, shift)))

    @classmethod
    def from_config(cls, value) -> "Schedule":
        """Accept an explicit list or a mapping {"uniform_steps": k, "shift": s}."""
        if isinstance(value, Schedule):
            return value
        if isinstance(value, dict):
            unknown = set(value) - {"uniform_steps", "shift"}
            if unknown or "uniform_steps" not in value:
                raise ContractError(f"bad schedule mapping {value!r}")
            return cls.uniform(int(value["uniform_steps"]), float(value.get("shift", 3.0)))
        return cls(tuple(value))

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i: int) -> float:
        return self.steps[i]


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 7.0
    alpha: float = 0.94

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError("alpha must be in (0, 1]")
        if self.w < 1.0:
            raise ContractError("guidance scale must be >= 1")


@dataclass
class NoisedSample:
    x_t: np.ndarray
    t: float | np.ndarray
    eps: np.ndarray | None = None


def add_noise(x0, eps, t):
    if _as_np(x0).shape != _as_np(eps).shape:
        raise ContractError(f"shape mismatch {_as_np(x0).shape} vs {_as_np(eps).shape}")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ContractError("t outside [0, 1]")
    tc = _tcol(t, x0)
    return (1.0 - tc) * x0 + tc * eps


def v_to_x0(x_t, v, t):
    return x_t - _tcol(t, x_t) * v


def x0_to_v(x_t, x0, t):
    if np.any(np.asarray(t) <= 0):
        raise ContractError("x0 -> v conversion needs t > 0")
    return (x_t - x0) * (1.0 / _tcol(t, x_t))


def velocity_x0_convert(x_t, pred, t, direction: str = "v->x0"):
    if direction == "v->x0":
        return v_to_x0(x_t, pred, t)
    if direction == "x0->v":
        return x0_to_v(x_t, pred, t)
    raise ContractError(f"unknown direction {direction!r}")


def x0_to_score(x_t, x0, t):
    """Score of the Gaussian perturbation around x0: -(x_t - (1 - t) x0) / t^2."""
    if np.any(np.asarray(t) <= 0):
        raise ContractError("score needs t > 0")
    tc = _tcol(t, x_t)
    return -(x_t - (1.0 - tc) * x0) * (1.0 / (tc * tc))


def cfg_combine(pred_cond, pred_uncond, w: float):
    if _as_np(pred_cond).shape != _as_np(pred_uncond).shape:
        raise ContractError("cond/uncond shape mismatch")
    return pred_uncond + w * (pred_cond - pred_uncond)


def guidance_active(t: float, cfg: GuidanceConfig) -> bool:
    return float(t) <= cfg.alpha


def guided_real_prediction(t: float, cfg: GuidanceConfig, pred_cond, pred_uncond):
    """CFG for t <= alpha, the conditional prediction verbatim above it.

    ``pred_uncond`` may be a zero-argument callable so the unconditional
    branch is only evaluated when guidance is active.
    """
    if not guidance_active(t, cfg):
        return pred_cond
    if callable(pred_uncond):
        pred_uncond = pred_uncond()
    return cfg_combine(pred_cond, pred_uncond, cfg.w)


@dataclass
class SampleResult:
    x0: np.ndarray
    trajectory: list[np.ndarray] = field(default_factory=list)
    taps: list = field(default_factory=list)


VelocityFn = Callable[..., object]


def euler_sample(
    model: VelocityFn,
    schedule: Schedule | Sequence[float],
    condition=None,
    *,
    x_init: np.ndarray | None = None,
    seed: int | np.random.Generator | None = None,
    n: int | None = None,
    dim: int | None = None,
    cfg: GuidanceConfig | None = None,
    record_taps: bool = False,
) -> SampleResult:
    """Integrate the velocity field along ``schedule``; the last step lands on x0.

    ``model(x, t, c)`` returns a velocity; ``c=None`` requests the
    unconditional prediction. With ``record_taps`` the conditional call is
    made as ``model(x, t, c, taps=True)`` and must return ``(v, record)``.
    """
    schedule = schedule if isinstance(schedule, Schedule) else Schedule(tuple(schedule))
    if x_init is None:
        if n is None or dim is None:
            raise ContractError("need x_init or (n, dim)")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        x_init = rng.standard_normal((n, dim))
    x = np.array(x_init, copy=True)
    res = SampleResult(x0=x, trajectory=[x.copy()])
    steps = schedule.steps
    with no_grad():
        for i, t in enumerate(steps):
            if record_taps:
                out, rec = model(x, t, condition, taps=True)
                res.taps.append(rec)
            else:
                out = model(x, t, condition)
            v = _as_np(out)
            if cfg is not None and condition is not None and guidance_active(t, cfg):
                v = cfg_combine(v, _as_np(model(x, t, None)), cfg.w)
            if v.shape != x.shape:
                raise ContractError(f"model output {v.shape} != state {x.shape}")
            if i + 1 < len(steps):
                x = (x + (steps[i + 1] - t) * v).astype(x.dtype, copy=False)
                res.trajectory.append(x.copy())
            else:
                x = v_to_x0(x, v, t).astype(x.dtype, copy=False)
    res.x0 = x
    return res
