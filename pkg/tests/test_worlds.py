import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fxdl.autograd import ContractError
from fxdl.worlds import MixtureSpec, analytic_score, log_density, posterior_mean, preset, ring, sample_world


def single(mu=(0.0, 0.0), sigma=1e-9):
    return MixtureSpec(np.array([mu]), sigma, np.ones(1), ((0,),))


def test_tiny_sigma_collapses_on_the_center():
    b = sample_world(single(), 0, 500, seed=0)
    assert np.abs(b.x).max() < 1e-6


def test_ring_sample_mean_within_clt_bound(world):
    n = 10_000
    x = sample_world(world, None, n, seed=1).x
    spread = np.sqrt(2.0 ** 2 / 2 + world.sigma ** 2)  # per-coordinate std of the ring
    assert np.all(np.abs(x.mean(0)) <= 3 * spread / np.sqrt(n))


def test_condition_subset_is_respected():
    spec = MixtureSpec(ring(8).centers, 0.05, np.ones(8), ((0, 1, 2, 3), (4, 5, 6, 7)))
    x = sample_world(spec, 0, 2000, seed=2).x
    d = np.linalg.norm(x[:, None, :] - spec.centers[None, :4], axis=-1).min(1)
    assert d.max() < 0.5


def test_unknown_condition_rejected(world):
    with pytest.raises(ContractError):
        sample_world(world, 5, 10, seed=0)


def test_t_outside_unit_interval_rejected(world):
    with pytest.raises(ContractError):
        analytic_score(world, 0, np.zeros((1, 2)), 1.5)


def test_score_zero_at_single_gaussian_center():
    spec = single((1.0, 2.0), 0.3)
    t = 0.4
    assert np.allclose(analytic_score(spec, 0, (1 - t) * np.array([1.0, 2.0]), t), 0.0, atol=1e-14)


@pytest.mark.parametrize("t", [0.0, 0.3, 0.9])
def test_symmetric_pair_has_zero_score_at_origin(t):
    spec = MixtureSpec(np.array([[1.5, 0.0], [-1.5, 0.0]]), 0.2, np.ones(2), ((0, 1),))
    assert np.allclose(analytic_score(spec, 0, np.zeros(2), t), 0.0, atol=1e-14)


def test_single_mode_condition_matches_gaussian_closed_form(world):
    spec = MixtureSpec(world.centers, world.sigma, world.weights, ((2,), (0, 1)))
    x = np.random.default_rng(0).standard_normal((20, 2))
    t = 0.35
    var = (1 - t) ** 2 * spec.sigma ** 2 + t ** 2
    expected = -(x - (1 - t) * spec.centers[2]) / var
    assert np.allclose(analytic_score(spec, 0, x, t), expected, rtol=1e-14, atol=0)


def test_score_at_zero_is_clean_mixture_score(world):
    x = np.random.default_rng(1).standard_normal((10, 2)) * 2
    d = x[:, None, :] - world.centers[None]
    logits = np.log(world.weights) - 0.5 * (d ** 2).sum(-1) / world.sigma ** 2
    r = np.exp(logits - logits.max(1, keepdims=True))
    r /= r.sum(1, keepdims=True)
    clean = -(r[:, :, None] * d).sum(1) / world.sigma ** 2
    assert np.allclose(analytic_score(world, None, x, 0.0), clean, rtol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 1.0), st.integers(0, 1), st.floats(-2.5, 2.5), st.floats(-2.5, 2.5))
def test_score_is_gradient_of_log_density(t, c, a, b):
    spec = ring(8, sigma=0.3)
    x = np.array([[a, b]])
    h = 1e-5
    fd = np.array([(log_density(spec, c, x + h * e, t) - log_density(spec, c, x - h * e, t))[0] / (2 * h)
                   for e in np.eye(2)])
    s = analytic_score(spec, c, x, t)[0]
    assert np.allclose(s, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(s).max()))


def test_posterior_mean_is_tweedie(world):
    x = np.random.default_rng(3).standard_normal((8, 2))
    t = 0.6
    pm = posterior_mean(world, 1, x, t)
    tweedie = (x + t ** 2 * analytic_score(world, 1, x, t)) / (1 - t)
    assert np.allclose(pm, tweedie, rtol=1e-10)


def test_presets_by_name():
    r = preset("ring8")
    assert (r.dim, r.n_modes, r.n_classes) == (2, 8, 2)
    img = preset("img8")
    assert img.dim == 64 and img.image_shape == (8, 8, 1)
    assert img.centers.min() >= -1 and img.centers.max() <= 1
    with pytest.raises(ContractError):
        preset("mnist")


def test_class_weights_are_within_class():
    spec = ring(8, class_weights={0: (4, 1, 1, 1), 1: (1, 1, 1, 1)})
    assert spec.mode_weights(0)[0] == pytest.approx(4 / 7)
    assert spec.weights[list(spec.cond_modes[0])].sum() == pytest.approx(0.5)
