"""Detail-focused adversarial refinement along the inference path (Stage II).

Optionally trains a cache compensator jointly with the generator so that
the cache-accelerated two-step path is what the discriminator supervises.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import ContractError, NumericError, ParamSet, Tensor, no_grad
from .cache import CompensatorBank
from .denoiser import BlockStackModel, SegmentSpec, normalize_segments
from .diffusion import GuidanceConfig, Schedule, euler_sample
from .optim import OptState, adamw_step
from .rng import Streams
from .worlds import MixtureSpec

log = logging.getLogger(__name__)


class Discriminator:
    """Frozen random two-level feature stack with trainable per-level heads.

    The realism probability is sigmoid(sum of level scores).
    """

    def __init__(self, data_dim: int, width: int = 128, seed: int | np.random.Generator = 0,
                 feature_scale: float = 3.0, dtype=None):
        dtype = dtype or ag.default_dtype()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.data_dim = data_dim
        self.frozen = {
            "w1": (rng.standard_normal((data_dim, width)) * feature_scale / np.sqrt(data_dim)).astype(dtype),
            "b1": rng.uniform(-np.pi, np.pi, width).astype(dtype),
            "w2": (rng.standard_normal((width, width)) * 2.0 / np.sqrt(width)).astype(dtype),
            "b2": (rng.standard_normal(width) * 0.5).astype(dtype),
        }
        for a in self.frozen.values():
            a.setflags(write=False)
        heads = {
            "disc.head1.w": np.zeros((width, 1), dtype),
            "disc.head1.b": np.zeros(1, dtype),
            "disc.head2.w": np.zeros((width, 1), dtype),
            "disc.head2.b": np.zeros(1, dtype),
        }
        self.params = ParamSet((k, Tensor(v, requires_grad=True, name=k)) for k, v in heads.items())

    def features(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=self.frozen["w1"].dtype).reshape(len(x), -1)
        f1 = np.tanh(x @ self.frozen["w1"] + self.frozen["b1"])
        f2 = np.tanh(f1 @ self.frozen["w2"] + self.frozen["b2"])
        return f1, f2

    def logits(self, x) -> Tensor:
        """Summed level scores. Gradient flows to the heads and, if ``x`` is a Tensor, to ``x``."""
        if isinstance(x, Tensor):
            return self._logits_tensor(x)
        f1, f2 = self.features(x)
        P = self.params
        s1 = ag.affine(Tensor(f1), P["disc.head1.w"], P["disc.head1.b"])
        s2 = ag.affine(Tensor(f2), P["disc.head2.w"], P["disc.head2.b"])
        return ag.tsum(ag.add(s1, s2), axis=1)

    def _logits_tensor(self, x: Tensor) -> Tensor:
        W = {k: Tensor(v) for k, v in self.frozen.items()}
        f1 = _tanh(ag.affine(x, W["w1"], W["b1"]))
        f2 = _tanh(ag.affine(f1, W["w2"], W["b2"]))
        P = self.params
        s1 = ag.affine(f1, P["disc.head1.w"], P["disc.head1.b"])
        s2 = ag.affine(f2, P["disc.head2.w"], P["disc.head2.b"])
        return ag.tsum(ag.add(s1, s2), axis=1)

    def prob(self, x) -> np.ndarray:
        with no_grad():
            z = self.logits(x if not isinstance(x, Tensor) else x.data).data
        return 1.0 / (1.0 + np.exp(-z.astype(np.float64)))

    def frozen_digest(self) -> bytes:
        return b"".join(self.frozen[k].tobytes() for k in sorted(self.frozen))


def _tanh(x: Tensor) -> Tensor:
    # tanh(z) = 2 sigmoid(2z) - 1
    return ag.sub(ag.mul(ag.sigmoid(ag.mul(x, 2.0)), 2.0), 1.0)


# ---------------------------------------------------------------- losses


def adv_losses_from_probs(p_fake, p_real) -> tuple[float, float]:
    """(L_G, L_D) from discriminator probabilities; both must lie in (0, 1)."""
    p_fake = np.asarray(p_fake, dtype=np.float64)
    p_real = np.asarray(p_real, dtype=np.float64)
    for name, p in (("fake", p_fake), ("real", p_real)):
        if not np.all((p > 0.0) & (p < 1.0)):
            raise ContractError(f"discriminator output for {name} outside (0, 1)")
    l_g = float(np.mean(-np.log(p_fake)))
    l_d = float(np.mean(-np.log(p_real)) + np.mean(np.log(p_fake)))
    return l_g, l_d


def adv_losses(D: Discriminator, fake, real) -> tuple[Tensor, Tensor]:
    """L_G = mean(-log D(fake)); L_D = mean(-log D(real)) + mean(log D(fake)).

    ``fake`` may be a Tensor carrying generator gradients; L_D always sees it
    detached.
    """
    fake_arr = fake.data if isinstance(fake, Tensor) else np.asarray(fake)
    real = np.asarray(real)
    if fake_arr.shape != real.shape:
        raise ContractError(f"fake {fake_arr.shape} and real {real.shape} batches differ")
    z_fake = D.logits(fake) if isinstance(fake, Tensor) else D.logits(fake_arr)
    l_g = ag.neg(ag.mean(ag.log_sigmoid(z_fake)))
    z_fake_det = D.logits(fake_arr)
    z_real = D.logits(real)
    l_d = ag.add(ag.neg(ag.mean(ag.log_sigmoid(z_real))), ag.mean(ag.log_sigmoid(z_fake_det)))
    return l_g, l_d


def _mse(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return ag.mean(ag.square(ag.sub(a, b)))


def kd_losses(delta1, predicted, v_full, v_cache) -> tuple[Tensor, Tensor]:
    """(feature MSE between true and predicted contribution, output MSE full vs cached)."""
    return _mse(delta1, predicted), _mse(v_full, v_cache)


# ---------------------------------------------------------------- paths


@dataclass
class PathOutput:
    x0: Tensor
    record: object               # TapRecord, list of them, or None
    v_last: Tensor
    x_prev: np.ndarray           # detached state entering the last step
    block_deltas: list | None = None


def _record_first_step(G: BlockStackModel, x, t, c, segments, per_block: bool):
    """Full forward that also returns the segment record(s) and, if asked, per-block deltas."""
    v, rec = G.forward(x, t, c, mode="record", segment=segments)
    block_deltas = None
    if per_block:
        _, taps = G.forward(x, t, c, mode="taps")
        d = taps.deltas()
        segs = normalize_segments(segments)
        block_deltas = [[d[b] for b in range(sg.n, sg.m + 1)] for sg in segs]
        if isinstance(segments, SegmentSpec):
            block_deltas = block_deltas[0]
    return v, rec, block_deltas


def generate_inference_path(G: BlockStackModel, bank: CompensatorBank | None, x_t0, c,
                            cache_on: bool, schedule: Schedule | None = None,
                            segment=None) -> PathOutput:
    """Few-step sample with gradients only through the last step (and the compensator)."""
    schedule = schedule or Schedule((1.0, 0.75))
    steps = schedule.steps
    if cache_on:
        if bank is None and segment is None:
            raise ContractError("cache_on needs a configured segment")
        if len(steps) != 2:
            raise ContractError("the cached path is defined for two-step schedules")
    if segment is not None:
        segments = segment
    elif bank is not None:
        segments = bank.segments[0] if bank.single else bank.segments
    else:
        segments = None
    x = np.array(x_t0, dtype=G.dtype, copy=True)
    rec, block_deltas = None, None
    with no_grad():
        for k in range(len(steps) - 1):
            t, t_next = steps[k], steps[k + 1]
            if k == 0 and segments is not None:
                per_block = cache_on and bank is not None and bank.needs_block_deltas
                v, rec, block_deltas = _record_first_step(G, x, t, c, segments, per_block)
            else:
                v, _ = G.forward(x, t, c)
            x = (x + (t_next - t) * v.data).astype(G.dtype, copy=False)
    t_last = steps[-1]
    if cache_on:
        cached = [r.delta for r in rec] if isinstance(rec, list) else rec.delta
        pred = bank.predict(cached, block_deltas) if bank is not None else cached
        v_last, _ = G.forward(x, t_last, c, mode="skip", segment=segments, delta=pred)
    else:
        v_last, _ = G.forward(x, t_last, c)
    x0 = ag.sub(Tensor(x), ag.mul(v_last, float(t_last)))
    return PathOutput(x0=x0, record=rec, v_last=v_last, x_prev=x, block_deltas=block_deltas)


def reference_sample(teacher: BlockStackModel, x_t0, c, steps: int = 8, shift: float = 3.0,
                     guidance: GuidanceConfig | None = None) -> np.ndarray:
    """Multi-step teacher sample from the same starting noise."""
    if steps < 2:
        raise ContractError("reference sampler needs at least two steps")
    res = euler_sample(teacher, Schedule.uniform(steps, shift), c, x_init=np.asarray(x_t0), cfg=guidance)
    return res.x0


# ---------------------------------------------------------------- loop


@dataclass
class Stage2Config:
    schedule: tuple[float, ...] = (1.0, 0.75)
    ttur: int = 3
    lr_gen: float = 2e-5
    lr_comp: float = 1e-3
    lr_disc: float = 2e-4
    warmup: int = 500
    max_iters: int = 2000
    cache: bool = False
    segment: tuple[int, int] | tuple[tuple[int, int], ...] | None = None
    compensator: str = "segment"
    reference_steps: int = 8
    reference_w: float = 1.0
    reference_alpha: float = 1.0
    kd_feat: float = 0.0
    kd_out: float = 0.0
    batch: int = 256
    betas: tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 1e-4
    disc_width: int = 128
    gap_batch: int = 256
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.ttur < 1:
            raise ContractError("TTUR_2 must be >= 1")
        if self.warmup < 0:
            raise ContractError("warmup must be >= 0")
        if min(self.lr_gen, self.lr_comp, self.lr_disc) <= 0:
            raise ContractError("learning rates must be positive")
        if self.reference_steps < 2:
            raise ContractError("reference_steps must be >= 2")
        if self.cache and self.segment is None:
            raise ContractError("cache enabled without a segment")
        if self.cache and len(self.schedule) != 2:
            raise ContractError("caching is defined for the two-step schedule")
        if min(self.kd_feat, self.kd_out) < 0:
            raise ContractError("KD weights must be >= 0")

    @property
    def segments(self):
        """SegmentSpec, list of them, or None."""
        if self.segment is None:
            return None
        seg = self.segment
        if isinstance(seg[0], (tuple, list)):
            return [SegmentSpec(int(a), int(b)) for a, b in seg]
        return SegmentSpec(int(seg[0]), int(seg[1]))

    @property
    def guidance(self) -> GuidanceConfig | None:
        """Reference-sampler guidance; w == 1 means conditional only."""
        if self.reference_w == 1.0:
            return None
        return GuidanceConfig(self.reference_w, self.reference_alpha)


@dataclass
class Stage2Result:
    generator: BlockStackModel
    bank: CompensatorBank | None
    disc: Discriminator
    log: list[dict] = field(default_factory=list)


def _cache_gap(G: BlockStackModel, bank: CompensatorBank, x_t0, c, schedule) -> float:
    with no_grad():
        full = generate_inference_path(G, bank, x_t0, c, False, schedule).x0.data
        cached = generate_inference_path(G, bank, x_t0, c, True, schedule).x0.data
    return float(np.linalg.norm((cached - full).astype(np.float64), axis=1).mean())


def _finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what}")
    return value


class _Stage2State:
    def __init__(self, cfg: Stage2Config, G, bank, D):
        self.G, self.bank, self.D = G, bank, D
        self.opt_g = OptState.init(G.params, cfg.lr_gen, cfg.betas, cfg.weight_decay)
        self.opt_c = OptState.init(bank.params, cfg.lr_comp, cfg.betas, cfg.weight_decay) if bank else None
        self.opt_d = OptState.init(D.params, cfg.lr_disc, cfg.betas, cfg.weight_decay)


def _iteration(cfg: Stage2Config, st: _Stage2State, teacher, world, rng, update_gen: bool,
               train_theta: bool, schedule: Schedule) -> dict:
    G, bank, D = st.G, st.bank, st.D
    c = rng.integers(0, world.n_classes, size=cfg.batch)
    x_t0 = rng.standard_normal((cfg.batch, world.dim)).astype(G.dtype)
    path = generate_inference_path(G, bank, x_t0, c, cfg.cache, schedule)
    x_star = reference_sample(teacher, x_t0, c, cfg.reference_steps, guidance=cfg.guidance)
    l_g, l_d = adv_losses(D, path.x0, x_star.astype(G.dtype))
    row = {"L_G": _finite(float(l_g.data), "L_G"), "L_D": _finite(float(l_d.data), "L_D")}
    if update_gen:
        loss = l_g
        if cfg.kd_feat > 0 or cfg.kd_out > 0:
            loss = ag.add(loss, _kd_term(cfg, G, bank, path, c, schedule))
        wrt = ParamSet()
        if train_theta:
            wrt.update(G.params)
        if cfg.cache and bank is not None:
            wrt.update(bank.params)
        if wrt:
            grads = ag.grad_eval(wrt, lambda: loss)
            if train_theta:
                adamw_step(G.params, {k: grads[k] for k in G.params}, st.opt_g)
            if cfg.cache and bank is not None and bank.params:
                adamw_step(bank.params, {k: grads[k] for k in bank.params}, st.opt_c)
    adamw_step(D.params, ag.grad_eval(D.params, lambda: l_d), st.opt_d)
    return row


def _kd_term(cfg, G, bank, path: PathOutput, c, schedule) -> Tensor:
    # extra record-mode forward of the last step gives the true contribution
    with no_grad():
        v_full, rec1 = G.forward(path.x_prev, schedule.steps[-1], c, mode="record", segment=cfg.segments)
    if not cfg.cache:
        return Tensor(np.zeros((), dtype=G.dtype))
    recs0 = path.record if isinstance(path.record, list) else [path.record]
    recs1 = rec1 if isinstance(rec1, list) else [rec1]
    preds = bank.predict([r.delta for r in recs0] if not bank.single else recs0[0].delta, path.block_deltas)
    preds = preds if isinstance(preds, list) else [preds]
    feat = None
    for r1, p in zip(recs1, preds):
        term = _mse(r1.delta.data, p)
        feat = term if feat is None else ag.add(feat, term)
    out = _mse(v_full.data, path.v_last)
    return ag.add(ag.mul(feat, cfg.kd_feat), ag.mul(out, cfg.kd_out))


def _make_bank(cfg: Stage2Config, G: BlockStackModel, seed_stream) -> CompensatorBank | None:
    if not cfg.cache:
        return None
    segs = cfg.segments
    normalize_segments(segs, G.n_blocks)
    return CompensatorBank(cfg.compensator, G.hidden, segs, seed=seed_stream, dtype=G.dtype)


def warmup_compensator(cfg: Stage2Config, G: BlockStackModel, bank: CompensatorBank, D: Discriminator,
                       teacher: BlockStackModel, world: MixtureSpec, state: _Stage2State | None = None) -> list[dict]:
    """``cfg.warmup`` Stage II iterations with the generator frozen."""
    if not cfg.cache or bank is None:
        raise ContractError("compensator warmup needs caching enabled")
    st = state or _Stage2State(cfg, G, bank, D)
    rs = Streams(cfg.seed).child("stage2/warmup")
    schedule = Schedule(cfg.schedule)
    rows = []
    for it in range(1, cfg.warmup + 1):
        row = _iteration(cfg, st, teacher, world, rs.get(f"iter{it}"), it % cfg.ttur == 0, False, schedule)
        row["iter"] = it - cfg.warmup
        rows.append(row)
    return rows


def stage2_loop(cfg: Stage2Config, G: BlockStackModel, teacher: BlockStackModel, world: MixtureSpec,
                bank: CompensatorBank | None = None, D: Discriminator | None = None,
                evaluator: Callable[[BlockStackModel, CompensatorBank | None, int], dict] | None = None,
                ) -> Stage2Result:
    """Warm up the compensator (if caching), then joint adversarial refinement.

    Log rows carry ``iter`` (warmup rows are numbered <= 0), ``L_G``, ``L_D``
    and ``cache_gap`` (nan without caching).
    """
    rs = Streams(cfg.seed)
    if bank is None:
        bank = _make_bank(cfg, G, rs.get("stage2/comp_init"))
    D = D or Discriminator(world.dim, cfg.disc_width, rs.get("stage2/disc_init"), dtype=G.dtype)
    st = _Stage2State(cfg, G, bank, D)
    schedule = Schedule(cfg.schedule)
    gap_rng = rs.get("stage2/heldout")
    gap_c = gap_rng.integers(0, world.n_classes, size=cfg.gap_batch)
    gap_x = gap_rng.standard_normal((cfg.gap_batch, world.dim)).astype(G.dtype)

    def gap() -> float:
        return _cache_gap(G, bank, gap_x, gap_c, schedule) if cfg.cache else float("nan")

    rows: list[dict] = []
    if cfg.cache and cfg.warmup:
        rows = warmup_compensator(cfg, G, bank, D, teacher, world, st)
        rows[-1]["cache_gap"] = gap()
    loop_rs = rs.child("stage2/main")
    for it in range(1, cfg.max_iters + 1):
        row = {"iter": it}
        row.update(_iteration(cfg, st, teacher, world, loop_rs.get(f"iter{it}"), it % cfg.ttur == 0,
                              True, schedule))
        if cfg.eval_every and it % cfg.eval_every == 0:
            row["cache_gap"] = gap()
            if evaluator is not None:
                row.update(evaluator(G, bank, it))
        rows.append(row)
    for row in rows:
        row.setdefault("cache_gap", float("nan"))
    return Stage2Result(G, bank, D, rows)
