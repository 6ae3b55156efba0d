"""Reverse-mode differentiation over numpy arrays.

The primitive set is closed: add/sub/mul/neg, matmul, affine, layer norm
(no affine), SiLU, sigmoid, log-sigmoid, square, sum/mean and
stop-gradient. Everything in the package (denoiser, compensator,
discriminator, losses) is composed from these.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_state = threading.local()

DTYPES = {"single": np.float32, "double": np.float64}


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericError(FloatingPointError):
    """A forward pass produced a non-finite value."""


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the dtype new tensors are created with."""
    if mode not in DTYPES:
        raise ContractError(f"unknown precision {mode!r}")
    prev = default_dtype()
    _state.dtype = DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, (np.ndarray, np.generic)) and dtype is None:
            arr = np.asarray(data)  # 0-d results of ndarray ops come back as numpy scalars
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or default_dtype()))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def matmul(a, b) -> Tensor:
    """2-D matrix product (a: (n, k), b: (k, m))."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, w, b=None) -> Tensor:
    """x @ w + b with x: (n, k), w: (k, m), b: (m,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"affine shape mismatch {x.shape} @ {w.shape}")
    out = x.data @ w.data
    if b is None:
        return _make(out, (x, w), lambda g: (g @ w.data.T, x.data.T @ g))
    b = as_tensor(b)
    out += b.data
    return _make(out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over the last axis."""
    x = as_tensor(x)
    y, rstd = kernels.layer_norm_fwd(x.data, eps)
    return _make(y, (x,), lambda g: (kernels.layer_norm_bwd(g, y, rstd),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    y, s = kernels.silu_fwd(x.data)
    return _make(y, (x,), lambda g: (kernels.silu_bwd(g, x.data, s),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)), computed without overflow."""
    x = as_tensor(x)
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    return _make(out.astype(v.dtype, copy=False), (x,), lambda g: (g * _sigmoid(-v),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis))

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), bw)


def stop_gradient(x) -> Tensor:
    """Forward identity; contributes no gradient upstream."""
    x = as_tensor(x)
    return Tensor(x.data)


# ---------------------------------------------------------------- backprop


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Tensors that the loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in forward pass")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = gp
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.dtype).reshape(t.shape)
            for t in wrt]


class ParamSet(dict):
    """Ordered name -> leaf Tensor mapping."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def clone(self) -> "ParamSet":
        return ParamSet((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self) ^ set(arrays)
        if missing:
            raise ContractError(f"parameter name mismatch: {sorted(missing)}")
        for k, t in self.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise ContractError(f"{k}: shape {a.shape} != {t.shape}")
            t.data = a.astype(t.dtype, copy=True)

    def count(self) -> int:
        return int(sum(v.data.size for v in self.values()))


def grad_eval(params: ParamSet, loss_fn: Callable[..., Tensor], *inputs) -> dict[str, np.ndarray]:
    """Evaluate ``loss_fn(*inputs)`` and return d loss / d param for each parameter."""
    loss = loss_fn(*inputs)
    gs = grad(loss, list(params.values()))
    return dict(zip(params.keys(), gs))


@dataclass
class CheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: ParamSet | dict[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> CheckReport:
    """Compare reverse-mode gradients with central differences.

    Relative error per element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor).
    ``max_entries`` subsamples entries per parameter (deterministically).
    Parameter values are restored bitwise afterwards.
    """
    names = list(params)
    analytic = dict(zip(names, grad(loss_fn(), [params[n] for n in names])))
    rng = np.random.default_rng(seed)
    report = CheckReport(tol=tol)
    for name in names:
        t = params[name]
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        ga = analytic[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(loss_fn().data)
                flat[i] = orig - h
                fm = float(loss_fn().data)
            flat[i] = orig
            gf = (fp - fm) / (2.0 * h)
            err = abs(float(ga[i]) - gf) / max(abs(float(ga[i])), abs(gf), floor)
            worst = max(worst, err)
        report.max_rel_error[name] = worst
    return report


def parameters(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
