import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxdl.autograd import ContractError, ParamSet, Tensor
from fxdl.optim import EPS, OptState, adamw_step


def params(*arrs):
    return ParamSet((f"p{i}", Tensor(np.array(a, dtype=np.float64), requires_grad=True)) for i, a in enumerate(arrs))


def zeros_like(p):
    return {k: np.zeros_like(v.data) for k, v in p.items()}


def test_zero_gradient_without_decay_leaves_parameters():
    p = params([1.0, -2.0], [[3.0]])
    before = {k: v.data.copy() for k, v in p.items()}
    adamw_step(p, zeros_like(p), OptState.init(p, lr=0.1, weight_decay=0.0))
    for k in p:
        assert np.array_equal(p[k].data, before[k])


def test_zero_gradient_with_decay_scales_parameters():
    p = params([1.0, -2.0])
    adamw_step(p, zeros_like(p), OptState.init(p, lr=0.1, weight_decay=0.5))
    assert np.allclose(p["p0"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_first_step_with_zero_beta1_is_lr_times_sign():
    g = np.array([0.3, -4.0, 1e-3])
    p = params(np.zeros(3))
    adamw_step(p, {"p0": g}, OptState.init(p, lr=0.01, betas=(0.0, 0.999), weight_decay=0.0))
    expected = -0.01 * g / (np.abs(g) + EPS)
    assert np.allclose(p["p0"].data, expected, rtol=1e-12)
    assert np.allclose(np.abs(p["p0"].data), 0.01, rtol=1e-4)


def test_shape_mismatch_is_rejected():
    p = params(np.zeros(3))
    with pytest.raises(ContractError):
        adamw_step(p, {"p0": np.zeros(4)}, OptState.init(p, lr=0.1))


def test_step_counter_increases_and_moments_match_shapes():
    p = params(np.zeros((2, 3)))
    s = OptState.init(p, lr=0.1)
    for i in range(3):
        adamw_step(p, {"p0": np.ones((2, 3))}, s)
        assert s.step == i + 1
    assert s.m["p0"].shape == s.v["p0"].shape == (2, 3)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-10, 10)), arrays(np.float64, (5,), elements=st.floats(-10, 10)))
def test_adamw_is_deterministic(w, g):
    outs = []
    for _ in range(2):
        p = params(w)
        s = OptState.init(p, lr=1e-2, betas=(0.9, 0.95), weight_decay=1e-2)
        for _ in range(3):
            adamw_step(p, {"p0": g}, s)
        outs.append(p["p0"].data.tobytes())
    assert outs[0] == outs[1]
