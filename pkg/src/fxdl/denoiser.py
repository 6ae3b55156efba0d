"""Residual block-stack velocity model with segment taps.

Stream layout::

    h = embed(x) + e            e = time_embed(t) + cond_embed(c)
    for each block b:  h = h + fc2(silu(fc1(norm(h) + mod_b(silu(e)))))
    v = head(h)

A segment [n, m] can be recorded (Delta = O_m - I_n) or skipped, in which
case the stream after block m is I_n + injected Delta and blocks n..m are
never evaluated.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ParamSet, Tensor

N_TIME_FREQS = 8


@dataclass(frozen=True)
class SegmentSpec:
    n: int
    m: int

    def __post_init__(self):
        if not 0 <= self.n <= self.m:
            raise ContractError(f"bad segment [{self.n}, {self.m}]")

    def __len__(self) -> int:
        return self.m - self.n + 1

    def check(self, n_blocks: int) -> None:
        if self.m >= n_blocks:
            raise ContractError(f"segment [{self.n}, {self.m}] outside {n_blocks} blocks")


def normalize_segments(segment, n_blocks: int | None = None) -> list[SegmentSpec]:
    """One segment or an ordered, non-overlapping sequence of them."""
    segs = [segment] if isinstance(segment, SegmentSpec) else list(segment)
    if not segs:
        raise ContractError("empty segment list")
    for a, b in zip(segs, segs[1:]):
        if b.n <= a.m:
            raise ContractError("segments must be ordered and non-overlapping")
    if n_blocks is not None:
        for sg in segs:
            sg.check(n_blocks)
    return segs


@dataclass
class TapRecord:
    I_n: Tensor
    O_m: Tensor

    @property
    def delta(self) -> Tensor:
        return ag.sub(self.O_m, self.I_n)


@dataclass
class BlockTaps:
    """Per-block stream inputs and outputs for one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)

    def deltas(self) -> list[np.ndarray]:
        return [o - i for i, o in zip(self.inputs, self.outputs)]


def time_features(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
    freqs = 0.5 * np.pi * np.arange(1, N_TIME_FREQS + 1)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _init_linear(rng, fan_in, fan_out, dtype, scale=1.0):
    return (rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in)).astype(dtype)


class BlockStackModel:
    def __init__(self, data_dim: int, n_classes: int, n_blocks: int = 8, hidden: int = 32,
                 mlp_ratio: int = 4, seed: int | np.random.Generator = 0, dtype=None,
                 use_time: bool = True, min_blocks: int = 4):
        if n_blocks < min_blocks:
            raise ContractError(f"need at least {min_blocks} blocks")
        if hidden < 8:
            raise ContractError("hidden width must be >= 8")
        dtype = dtype or ag.default_dtype()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.data_dim = data_dim
        self.n_classes = n_classes
        self.n_blocks = n_blocks
        self.hidden = hidden
        self.mlp_ratio = mlp_ratio
        self.use_time = use_time
        self.block_ids = list(range(n_blocks))
        d, h = hidden, hidden * mlp_ratio
        p: dict[str, np.ndarray] = {
            "embed.w": _init_linear(rng, data_dim, d, dtype),
            "embed.b": np.zeros(d, dtype),
            "time.w": _init_linear(rng, 2 * N_TIME_FREQS, d, dtype),
            "time.b": np.zeros(d, dtype),
            "cond.table": (rng.standard_normal((n_classes + 1, d)) * 0.5).astype(dtype),
        }
        for b in range(n_blocks):
            p[f"block{b}.mod.w"] = _init_linear(rng, d, d, dtype, 0.5)
            p[f"block{b}.mod.b"] = np.zeros(d, dtype)
            p[f"block{b}.fc1.w"] = _init_linear(rng, d, h, dtype)
            p[f"block{b}.fc1.b"] = np.zeros(h, dtype)
            p[f"block{b}.fc2.w"] = _init_linear(rng, h, d, dtype, 0.5)
            p[f"block{b}.fc2.b"] = np.zeros(d, dtype)
        p["head.w"] = _init_linear(rng, d, data_dim, dtype)
        p["head.b"] = np.zeros(data_dim, dtype)
        self.params = ParamSet((k, Tensor(v, requires_grad=True, name=k)) for k, v in p.items())

    # ------------------------------------------------------------ plumbing

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    @property
    def null_class(self) -> int:
        return self.n_classes

    def block_params(self, b: int) -> ParamSet:
        return ParamSet((k, v) for k, v in self.params.items() if k.startswith(f"block{b}."))

    def param_count(self, prefix: str = "") -> int:
        return int(sum(v.data.size for k, v in self.params.items() if k.startswith(prefix)))

    def copy_weights(self) -> "BlockStackModel":
        new = copy.copy(self)
        new.block_ids = list(self.block_ids)
        new.params = self.params.clone()
        return new

    def without_blocks(self, n: int, m: int) -> "BlockStackModel":
        """A view sharing parameters with blocks n..m removed."""
        new = copy.copy(self)
        new.block_ids = [b for b in self.block_ids if not n <= b <= m]
        return new

    def _labels(self, c, n: int) -> np.ndarray:
        if c is None:
            return np.full(n, self.null_class)
        c = np.asarray(c)
        if c.ndim == 0:
            c = np.full(n, int(c))
        if c.shape != (n,):
            raise ContractError(f"condition shape {c.shape} for batch {n}")
        if np.any((c < 0) | (c > self.null_class)):
            raise ContractError("condition label out of range")
        return c

    def embedding(self, t, c, n: int) -> Tensor:
        P = self.params
        feats = time_features(t, n).astype(self.dtype)
        if not self.use_time:
            feats = np.zeros_like(feats)
        onehot = np.zeros((n, self.n_classes + 1), dtype=self.dtype)
        onehot[np.arange(n), self._labels(c, n)] = 1.0
        return ag.add(ag.affine(feats, P["time.w"], P["time.b"]), ag.matmul(onehot, P["cond.table"]))

    def block(self, b: int, h: Tensor, se: Tensor) -> Tensor:
        P = self.params
        z = ag.add(ag.layer_norm(h), ag.affine(se, P[f"block{b}.mod.w"], P[f"block{b}.mod.b"]))
        a = ag.silu(ag.affine(z, P[f"block{b}.fc1.w"], P[f"block{b}.fc1.b"]))
        return ag.add(h, ag.affine(a, P[f"block{b}.fc2.w"], P[f"block{b}.fc2.b"]))

    # ------------------------------------------------------------ forward

    def forward(self, x, t, c=None, mode: str = "full", segment: SegmentSpec | None = None,
                delta=None):
        """Velocity prediction.

        mode: "full" | "record" | "skip" | "taps". Returns ``(v, extra)`` where
        extra is a TapRecord (record), BlockTaps (taps) or None.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype and not x.requires_grad:
            x = Tensor(x.data.astype(self.dtype))
        if x.data.ndim != 2 or x.shape[1] != self.data_dim:
            raise ContractError(f"input shape {x.shape}, expected (n, {self.data_dim})")
        n = x.shape[0]
        if mode not in ("full", "record", "skip", "taps"):
            raise ContractError(f"unknown mode {mode!r}")
        segs: list[SegmentSpec] = []
        if mode in ("record", "skip"):
            if segment is None:
                raise ContractError(f"{mode} mode needs a segment")
            segs = normalize_segments(segment, self.n_blocks)
        deltas = None
        if mode == "skip":
            deltas = [delta] if len(segs) == 1 and not isinstance(delta, (list, tuple)) else list(delta)
            if len(deltas) != len(segs):
                raise ContractError("need one injected delta per segment")
        starts = {s.n: i for i, s in enumerate(segs)}
        ends = {s.m: i for i, s in enumerate(segs)}
        P = self.params
        e = self.embedding(t, c, n)
        se = ag.silu(e)
        h = ag.add(ag.affine(x, P["embed.w"], P["embed.b"]), e)
        records: list[TapRecord] = []
        taps = BlockTaps() if mode == "taps" else None
        i_n = None
        skipping = False
        for b in self.block_ids:
            if mode == "skip" and b in starts:
                d = deltas[starts[b]]
                d = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=self.dtype))
                if d.shape != h.shape:
                    raise ContractError(f"injected delta {d.shape} != stream {h.shape}")
                h = ag.add(h, d)
                skipping = True
            if skipping:
                if b in ends:
                    skipping = False
                continue
            if mode == "record" and b in starts:
                i_n = h
            if taps is not None:
                taps.inputs.append(h.data)
            h = self.block(b, h, se)
            if taps is not None:
                taps.outputs.append(h.data)
            if mode == "record" and b in ends:
                records.append(TapRecord(I_n=i_n, O_m=h))
        extra = None
        if mode == "record":
            extra = records[0] if isinstance(segment, SegmentSpec) else records
        v = ag.affine(h, P["head.w"], P["head.b"])
        if taps is not None:
            extra = taps
        return v, extra

    def __call__(self, x, t, c=None, taps: bool = False):
        v, extra = self.forward(x, t, c, mode="taps" if taps else "full")
        return (v.data, extra) if taps else v.data

    def stream_in(self, x, t, c=None) -> Tensor:
        """Stream entering block 0 (embed(x) + e)."""
        x = Tensor(np.asarray(x, dtype=self.dtype))
        e = self.embedding(t, c, x.shape[0])
        return ag.add(ag.affine(x, self.params["embed.w"], self.params["embed.b"]), e)


def copy_weights(src: BlockStackModel) -> BlockStackModel:
    return src.copy_weights()
