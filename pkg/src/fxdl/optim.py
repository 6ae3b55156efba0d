"""AdamW with decoupled weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, ParamSet

EPS = 1e-8


@dataclass
class OptState:
    lr: float
    betas: tuple[float, float] = (0.0, 0.999)
    weight_decay: float = 1e-4
    eps: float = EPS
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: ParamSet, lr: float, betas=(0.0, 0.999), weight_decay: float = 1e-4) -> "OptState":
        st = cls(lr=lr, betas=tuple(betas), weight_decay=weight_decay)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p.data)
            st.v[k] = np.zeros_like(p.data)
        return st


def adamw_step(params: ParamSet, grads: dict[str, np.ndarray], state: OptState) -> ParamSet:
    """One AdamW update, in place on ``params`` (also returned).

    Decay is applied multiplicatively, p <- p * (1 - lr * wd), before the
    bias-corrected adaptive step.
    """
    if set(grads) != set(params):
        raise ContractError("gradient names do not match parameters")
    for k, p in params.items():
        if grads[k].shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"{k}: gradient shape {grads[k].shape} != parameter shape {p.shape}")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    lr = state.lr
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w = p.data
        if state.weight_decay:
            w *= 1.0 - lr * state.weight_decay
        w -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(w.dtype, copy=False)
    return params
