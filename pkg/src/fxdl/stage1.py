"""Teacher training and structure-focused distribution matching (Stage I)."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import truncnorm

from . import autograd as ag
from .autograd import ContractError, NumericError, Tensor, no_grad
from .denoiser import BlockStackModel
from .diffusion import (GuidanceConfig, Schedule, add_noise, cfg_combine, guidance_active,
                        shift_time, v_to_x0)
from .optim import OptState, adamw_step
from .rng import Streams
from .worlds import MixtureSpec, posterior_mean, sample_world

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- timesteps


@dataclass(frozen=True)
class ImportanceSampler:
    """Truncated Normal(mu_u, sigma_u) on (0, 1] in unshifted time, then shifted.

    ``sigma_u = inf`` gives uniform unshifted time.
    """

    mu_u: float = 0.48
    sigma_u: float = 0.17
    shift: float = 3.0

    def __post_init__(self):
        if not self.sigma_u > 0:
            raise ContractError("sigma_u must be positive")

    def sample_u(self, n: int, rng: np.random.Generator) -> np.ndarray:
        q = rng.random(n)
        if math.isinf(self.sigma_u):
            u = 1.0 - q  # (0, 1]
        else:
            a = (0.0 - self.mu_u) / self.sigma_u
            b = (1.0 - self.mu_u) / self.sigma_u
            u = truncnorm.ppf(1.0 - q, a, b, loc=self.mu_u, scale=self.sigma_u)
        return np.clip(u, np.finfo(np.float64).tiny, 1.0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return shift_time(self.sample_u(n, rng), self.shift)


UNIFORM = ImportanceSampler(0.5, math.inf)

# Curve variants for the timestep-sampling ablation; "c" is the default.
CURVES = {
    "a": ImportanceSampler(0.6, 0.25),
    "b": ImportanceSampler(0.5, 0.3),
    "c": ImportanceSampler(),
    "d": ImportanceSampler(0.3, 0.2),
    "uniform": UNIFORM,
}


def importance_sample_t(sampler: ImportanceSampler, seed, n: int = 1) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return sampler.sample(n, rng)


def histogram_mode(t: np.ndarray, bins: int = 50) -> float:
    counts, edges = np.histogram(t, bins=bins, range=(0.0, 1.0))
    i = int(np.argmax(counts))
    return 0.5 * (edges[i] + edges[i + 1])


# ---------------------------------------------------------------- helpers


def predict_x0(model: BlockStackModel, x_t, t, c) -> Tensor:
    """x0 prediction from the velocity head: x_t - t v."""
    v, _ = model.forward(x_t, t, c)
    tc = np.asarray(t, dtype=model.dtype).reshape(-1, 1) if np.ndim(t) else float(t)
    xt = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=model.dtype))
    return ag.sub(xt, ag.mul(v, tc))


def flow_matching_loss(model: BlockStackModel, x0: np.ndarray, c, eps: np.ndarray, t: np.ndarray) -> Tensor:
    x_t = add_noise(x0, eps, t).astype(model.dtype)
    v, _ = model.forward(x_t, t, c)
    target = (eps - x0).astype(model.dtype)
    return ag.mean(ag.square(ag.sub(v, target)))


def _check_finite(value: float, what: str, params=None):
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")


def cosine_lr(base: float, it: int, total: int, floor: float = 0.1) -> float:
    frac = min(it / max(total, 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------- teacher


@dataclass
class TeacherConfig:
    iters: int = 4000
    batch: int = 256
    lr: float = 2e-3
    cond_dropout: float = 0.1
    shift: float = 3.0
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4


def train_teacher(world: MixtureSpec, model: BlockStackModel, cfg: TeacherConfig | None = None,
                  seed: int = 0, callback: Callable[[int, float], None] | None = None) -> BlockStackModel:
    """Conditional flow-matching regression with null-condition dropout."""
    cfg = cfg or TeacherConfig()
    if not 0.0 <= cfg.cond_dropout < 1.0:
        raise ContractError("cond_dropout must be in [0, 1)")
    if cfg.cond_dropout == 0.0:
        log.warning("cond_dropout=0: unconditional branch is untrained, CFG should stay disabled")
    model.uncond_trained = cfg.cond_dropout > 0.0
    rs = Streams(seed).child("teacher")
    opt = OptState.init(model.params, cfg.lr, cfg.betas, cfg.weight_decay)
    for it in range(cfg.iters):
        rng = rs.get(f"iter{it}")
        data = sample_world(world, None, cfg.batch, rng)
        c = data.c.copy()
        c[rng.random(cfg.batch) < cfg.cond_dropout] = model.null_class
        eps = rng.standard_normal(data.x.shape)
        t = shift_time(rng.random(cfg.batch), cfg.shift)
        loss = flow_matching_loss(model, data.x, c, eps, t)
        _check_finite(float(loss.data), "teacher loss")
        grads = ag.grad_eval(model.params, lambda: loss)
        opt.lr = cosine_lr(cfg.lr, it, cfg.iters)
        adamw_step(model.params, grads, opt)
        if callback is not None:
            callback(it, float(loss.data))
    return model


def flow_excess_loss(model: BlockStackModel, world: MixtureSpec, n: int = 4096, seed: int = 123,
                     shift: float = 3.0, c: int | None = 0, x0_fixed: np.ndarray | None = None) -> float:
    """Mean squared distance between the model velocity and the Bayes-optimal one.

    Equals (flow-matching loss - Bayes floor) per dimension. With
    ``x0_fixed`` the data is the point mass at that location.
    """
    rng = np.random.default_rng(seed)
    if x0_fixed is None:
        x0 = sample_world(world, c, n, rng).x
    else:
        x0 = np.broadcast_to(np.asarray(x0_fixed, dtype=np.float64), (n, world.dim)).copy()
    eps = rng.standard_normal(x0.shape)
    t = shift_time(rng.uniform(0.02, 1.0, n), shift)
    x_t = add_noise(x0, eps, t)
    if x0_fixed is None:
        ex0 = np.empty_like(x0)
        for i in range(n):
            ex0[i] = posterior_mean(world, c, x_t[i], t[i])
    else:
        ex0 = x0
    v_star = (x_t - ex0) / t[:, None]
    with no_grad():
        v = model(x_t, t, c if c is not None else None)
    return float(((v - v_star) ** 2).mean())


# ---------------------------------------------------------------- DMD pieces


def backward_simulate(G: BlockStackModel, x_start: np.ndarray, schedule: Schedule, i: int, c) -> np.ndarray:
    """Run i generator Euler steps along the schedule; result carries no gradient."""
    if not 0 <= i < len(schedule):
        raise ContractError(f"target index {i} outside schedule of length {len(schedule)}")
    x = np.array(x_start, copy=True)
    with no_grad():
        for k in range(i):
            t, t_next = schedule[k], schedule[k + 1]
            v = G(x, t, c)
            x = (x + (t_next - t) * v).astype(x.dtype, copy=False)
    return x


@dataclass
class CallCounter:
    """Counts conditional/unconditional teacher evaluations."""

    cond: int = 0
    uncond: int = 0


def teacher_x0(teacher: BlockStackModel, x_t, t, c, guidance: GuidanceConfig | None,
               counter: CallCounter | None = None) -> np.ndarray:
    """Guided teacher x0 prediction; the unconditional branch only runs where t <= alpha."""
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x_t),))
    with no_grad():
        v = teacher(x_t, t_arr, c).astype(np.float64)
        if counter is not None:
            counter.cond += 1
        if guidance is not None:
            active = np.array([guidance_active(tt, guidance) for tt in t_arr])
            if active.any():
                idx = np.flatnonzero(active)
                vu = teacher(x_t[idx], t_arr[idx], None).astype(np.float64)
                if counter is not None:
                    counter.uncond += 1
                v[idx] = cfg_combine(v[idx], vu, guidance.w)
    return v_to_x0(np.asarray(x_t, dtype=np.float64), v, t_arr)


def dmd_grad_signal(x0_hat: np.ndarray, t, teacher: BlockStackModel, fake: BlockStackModel,
                    guidance: GuidanceConfig | None, c, eps: np.ndarray,
                    counter: CallCounter | None = None, return_parts: bool = False):
    """Per-element DMD gradient d = (x0_fake - x0_real) / C, C = mean |x0_hat - x0_real| per sample."""
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x0_hat),))
    x_t = add_noise(x0_hat, eps, t_arr)
    real = teacher_x0(teacher, x_t, t_arr, c, guidance, counter)
    with no_grad():
        vf = fake(x_t, t_arr, c).astype(np.float64)
    fake_x0 = v_to_x0(x_t, vf, t_arr)
    return dmd_signal_from_predictions(x0_hat, real, fake_x0, return_parts)


def dmd_signal_from_predictions(x0_hat, x0_real, x0_fake, return_parts: bool = False):
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    axes = tuple(range(1, x0_hat.ndim))
    C = np.abs(x0_hat - x0_real).mean(axis=axes, keepdims=True)
    C = np.maximum(C, 1e-8)
    d = (np.asarray(x0_fake) - np.asarray(x0_real)) / C
    return (d, C) if return_parts else d


def fake_score_update(fake: BlockStackModel, opt: OptState, x0_detached: np.ndarray, c,
                      rng: np.random.Generator, shift: float = 3.0) -> float:
    """One flow-matching step of the fake estimator on detached generator samples."""
    x0 = np.asarray(x0_detached, dtype=np.float64)
    eps = rng.standard_normal(x0.shape)
    t = shift_time(rng.random(len(x0)), shift)
    loss = flow_matching_loss(fake, x0, c, eps, t)
    value = float(loss.data)
    _check_finite(value, "fake loss")
    adamw_step(fake.params, ag.grad_eval(fake.params, lambda: loss), opt)
    return value


# ---------------------------------------------------------------- loop


@dataclass
class Stage1Config:
    schedule: tuple[float, ...] = (1.0, 0.75)
    w: float = 7.0
    alpha: float = 0.94
    ttur: int = 1
    lr_gen: float = 1e-4
    lr_fake: float = 8e-4
    max_iters: int = 1000
    curve: str = "c"
    batch: int = 256
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 1e-4
    shift: float = 3.0
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.ttur < 1:
            raise ContractError("TTUR_1 must be >= 1")
        if self.lr_gen <= 0 or self.lr_fake <= 0:
            raise ContractError("learning rates must be positive")
        if self.curve not in CURVES:
            raise ContractError(f"unknown timestep curve {self.curve!r}")

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.w, self.alpha)

    @property
    def sampler(self) -> ImportanceSampler:
        base = CURVES[self.curve]
        return ImportanceSampler(base.mu_u, base.sigma_u, self.shift)


@dataclass
class Stage1Result:
    generator: BlockStackModel
    fake: BlockStackModel
    log: list[dict] = field(default_factory=list)


def stage1_loop(cfg: Stage1Config, teacher: BlockStackModel, world: MixtureSpec,
                G: BlockStackModel | None = None, fake: BlockStackModel | None = None,
                evaluator: Callable[[BlockStackModel, int], dict] | None = None) -> Stage1Result:
    G = G or teacher.copy_weights()
    fake = fake or teacher.copy_weights()
    schedule = Schedule(cfg.schedule)
    sampler = cfg.sampler
    guidance = cfg.guidance
    rs = Streams(cfg.seed).child("stage1")
    opt_g = OptState.init(G.params, cfg.lr_gen, cfg.betas, cfg.weight_decay)
    opt_f = OptState.init(fake.params, cfg.lr_fake, cfg.betas, cfg.weight_decay)
    rows: list[dict] = []
    for it in range(1, cfg.max_iters + 1):
        rng = rs.get(f"iter{it}")
        c = rng.integers(0, world.n_classes, size=cfg.batch)
        x_start = rng.standard_normal((cfg.batch, world.dim)).astype(G.dtype)
        i = int(rng.integers(0, len(schedule)))
        t_i = schedule[i]
        x_ti = backward_simulate(G, x_start, schedule, i, c)
        row = {"iter": it, "dmd_loss_surrogate": float("nan")}
        if it % cfg.ttur == 0:
            x0_hat = predict_x0(G, x_ti, t_i, c)
            t = sampler.sample(cfg.batch, rng)
            eps = rng.standard_normal(x0_hat.shape)
            d = dmd_grad_signal(x0_hat.data, t, teacher, fake, guidance, c, eps)
            _check_finite(float(np.abs(d).mean()), "DMD signal")
            surrogate = ag.mean(ag.tsum(ag.mul(x0_hat, Tensor(d.astype(G.dtype))), axis=1))
            adamw_step(G.params, ag.grad_eval(G.params, lambda: surrogate), opt_g)
            row["dmd_loss_surrogate"] = float(np.abs(d).mean())
            x0_det = x0_hat.data
        else:
            with no_grad():
                x0_det = predict_x0(G, x_ti, t_i, c).data
        row["fake_loss"] = fake_score_update(fake, opt_f, x0_det, c, rng, cfg.shift)
        if evaluator is not None and cfg.eval_every and it % cfg.eval_every == 0:
            row.update(evaluator(G, it))
        rows.append(row)
    return Stage1Result(G, fake, rows)
