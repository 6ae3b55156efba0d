"""Conditional Gaussian-mixture worlds with exact noised scores.

Noising follows the rectified-flow path x_t = (1 - t) x0 + t eps, so mode k
of the mixture becomes Normal((1 - t) mu_k, ((1 - t)^2 sigma^2 + t^2) I).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .autograd import ContractError


@dataclass(frozen=True)
class MixtureSpec:
    centers: np.ndarray          # (K, D)
    sigma: float
    weights: np.ndarray          # (K,), sums to 1
    cond_modes: tuple[tuple[int, ...], ...]
    name: str = "custom"
    image_shape: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=np.float64)
        if centers.ndim != 2:
            raise ContractError("centers must be (K, D)")
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (len(centers),) or np.any(weights <= 0):
            raise ContractError("weights must be positive, one per mode")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "weights", weights / weights.sum())
        if self.sigma < 0:
            raise ContractError("sigma must be >= 0")
        for c, modes in enumerate(self.cond_modes):
            if not modes:
                raise ContractError(f"condition {c} maps to no modes")
            if any(k < 0 or k >= len(centers) for k in modes):
                raise ContractError(f"condition {c} references a missing mode")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def n_modes(self) -> int:
        return self.centers.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.cond_modes)

    def modes_for(self, c: int | None) -> np.ndarray:
        if c is None:
            return np.arange(self.n_modes)
        if not 0 <= int(c) < self.n_classes:
            raise ContractError(f"unknown condition {c}")
        return np.asarray(self.cond_modes[int(c)])

    def mode_weights(self, c: int | None) -> np.ndarray:
        idx = self.modes_for(c)
        w = self.weights[idx]
        return w / w.sum()


@dataclass
class LabeledBatch:
    """A batch of labeled samples: points ``x`` (n, D) and conditions ``c`` (n,)."""

    x: np.ndarray
    c: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def sample_world(spec: MixtureSpec, c: int | None, n: int, seed: int | np.random.Generator) -> LabeledBatch:
    """Draw ``n`` i.i.d. points from the mixture restricted to condition ``c``.

    ``c=None`` draws a uniformly random class per sample.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if c is None:
        cs = rng.integers(0, spec.n_classes, size=n)
    else:
        spec.modes_for(c)
        cs = np.full(n, int(c))
    x = np.empty((n, spec.dim))
    for cls in np.unique(cs):
        sel = np.flatnonzero(cs == cls)
        modes = spec.modes_for(int(cls))
        k = rng.choice(modes, size=len(sel), p=spec.mode_weights(int(cls)))
        x[sel] = spec.centers[k] + spec.sigma * rng.standard_normal((len(sel), spec.dim))
    return LabeledBatch(x=x, c=cs)


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t={t} outside [0, 1]")
    return t


def _noised_params(spec: MixtureSpec, c, t):
    idx = spec.modes_for(c)
    means = (1.0 - t) * spec.centers[idx]
    var = (1.0 - t) ** 2 * spec.sigma ** 2 + t ** 2
    if var <= 0:
        raise ContractError("degenerate noised variance (sigma=0 at t=0)")
    return idx, means, var, np.log(spec.mode_weights(c))


def _responsibilities(spec, c, x, t):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    idx, means, var, logw = _noised_params(spec, c, t)
    sq = ((x[:, None, :] - means[None, :, :]) ** 2).sum(-1)
    logits = logw[None, :] - 0.5 * sq / var
    lse = logsumexp(logits, axis=1, keepdims=True)
    return x, idx, means, var, np.exp(logits - lse), lse[:, 0]


def log_density(spec: MixtureSpec, c: int | None, x, t: float) -> np.ndarray:
    """log p_t(x | c) in closed form; x is (n, D) or (D,)."""
    t = _check_t(t)
    x, idx, means, var, _, lse = _responsibilities(spec, c, x, t)
    return lse - 0.5 * spec.dim * np.log(2.0 * np.pi * var)


def analytic_score(spec: MixtureSpec, c: int | None, x, t: float) -> np.ndarray:
    """grad_x log p_t(x | c). ``c=None`` is the unconditional mixture."""
    t = _check_t(t)
    squeeze = np.ndim(x) == 1
    x, idx, means, var, r, _ = _responsibilities(spec, c, x, t)
    score = -(x - r @ means) / var
    return score[0] if squeeze else score


def posterior_mean(spec: MixtureSpec, c: int | None, x, t: float) -> np.ndarray:
    """E[x0 | x_t = x, c] for the noised mixture."""
    t = _check_t(t)
    squeeze = np.ndim(x) == 1
    x, idx, means, var, r, _ = _responsibilities(spec, c, x, t)
    gain = (1.0 - t) * spec.sigma ** 2 / var
    per_mode = spec.centers[idx][None, :, :] + gain * (x[:, None, :] - means[None, :, :])
    out = (r[:, :, None] * per_mode).sum(1)
    return out[0] if squeeze else out


def per_condition_batch(spec: MixtureSpec, c, x, t: float, fn) -> np.ndarray:
    """Apply ``fn(spec, c_i, x_i, t)`` grouped by condition for a (n,) label array."""
    c = np.asarray(c)
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    for cls in np.unique(c):
        sel = c == cls
        out[sel] = fn(spec, int(cls), x[sel], t)
    return out


# ---------------------------------------------------------------- presets


def ring(n_modes: int = 8, radius: float = 2.0, sigma: float = 0.1, n_classes: int = 2,
         class_weights: dict[int, tuple[float, ...]] | None = None) -> MixtureSpec:
    """Modes evenly spaced on a circle, interleaved across classes.

    ``class_weights`` gives within-class mode weights (uniform if omitted);
    classes are equally likely overall.
    """
    ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    cond = tuple(tuple(range(c, n_modes, n_classes)) for c in range(n_classes))
    weights = np.ones(n_modes)
    if class_weights is not None:
        for c, modes in enumerate(cond):
            w = np.asarray(class_weights[c], dtype=np.float64)
            weights[list(modes)] = w / w.sum() / n_classes
    return MixtureSpec(centers, sigma, weights, cond, name=f"ring{n_modes}")


def ring8(**overrides) -> MixtureSpec:
    return ring(8, **overrides)


def tiny_images(side: int = 8, n_modes: int = 8, sigma: float = 0.1, n_classes: int = 2,
                blob_width: float = 1.5) -> MixtureSpec:
    """Smoothed blob templates on a side x side grid, flattened, values in [-1, 1]."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    mid = (side - 1) / 2.0
    rad = side / 4.0
    templates = []
    for k in range(n_modes):
        a = 2.0 * np.pi * k / n_modes
        cy, cx = mid + rad * np.sin(a), mid + rad * np.cos(a)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * blob_width ** 2))
        templates.append((2.0 * blob - 1.0).reshape(-1))
    cond = tuple(tuple(range(c, n_modes, n_classes)) for c in range(n_classes))
    return MixtureSpec(np.array(templates), sigma, np.ones(n_modes), cond,
                       name=f"img{side}", image_shape=(side, side, 1))


PRESETS = {
    "ring8": ring8,
    "img8": tiny_images,
}


def preset(name: str, **overrides) -> MixtureSpec:
    if name not in PRESETS:
        raise ContractError(f"unknown world preset {name!r}; known: {sorted(PRESETS)}")
    return PRESETS[name](**overrides)
