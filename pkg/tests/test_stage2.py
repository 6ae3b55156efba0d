import hashlib

import numpy as np
import pytest

from fxdl import autograd as ag
from fxdl.autograd import ContractError, NumericError
from fxdl.cache import CompensatorBank
from fxdl.diffusion import Schedule, euler_sample
from fxdl.metrics import median_bandwidth, mmd2
from fxdl.stage1 import TeacherConfig, train_teacher
from fxdl.stage2 import (Discriminator, Stage2Config, _Stage2State, adv_losses, adv_losses_from_probs,
                         generate_inference_path, kd_losses, reference_sample, stage2_loop, warmup_compensator)
from fxdl.denoiser import BlockStackModel
from fxdl.worlds import sample_world


def digest(params) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(params[k].data.tobytes())
    return h.hexdigest()


def quick(**kw):
    base = dict(max_iters=0, warmup=0, batch=16, gap_batch=16, reference_steps=4)
    base.update(kw)
    return Stage2Config(**base)


# ---------------------------------------------------------------- discriminator and losses


def test_discriminator_frozen_features_never_change(small_model, world):
    D = Discriminator(2, 32, seed=0)
    before = D.frozen_digest()
    stage2_loop(quick(max_iters=3, ttur=1), small_model.copy_weights(), small_model, world, D=D)
    assert D.frozen_digest() == before
    p = D.prob(np.random.default_rng(0).standard_normal((64, 2)) * 5)
    assert np.all((p > 0) & (p < 1))
    with pytest.raises(ValueError):
        D.frozen["w1"][0, 0] = 1.0


def test_adversarial_loss_examples():
    l_g, l_d = adv_losses_from_probs([0.5], [0.5])
    assert l_g == pytest.approx(0.6931, abs=1e-4) and l_d == pytest.approx(0.0, abs=1e-12)
    _, l_d = adv_losses_from_probs([np.exp(-1.0)], [1 - 1e-12])
    assert l_d == pytest.approx(-1.0, abs=1e-9)
    l_g, _ = adv_losses_from_probs([1 - 1e-12], [0.5])
    assert l_g == pytest.approx(0.0, abs=1e-9)
    for bad in ([0.0], [1.0], [1.5]):
        with pytest.raises(ContractError):
            adv_losses_from_probs(bad, [0.5])


def test_tensor_losses_match_probability_form():
    D = Discriminator(2, 16, seed=1)
    for k in ("disc.head1.w", "disc.head2.w"):
        D.params[k].data[:] = np.random.default_rng(2).standard_normal(D.params[k].shape) * 0.3
    rng = np.random.default_rng(3)
    fake, real = rng.standard_normal((32, 2)), rng.standard_normal((32, 2)) + 1
    l_g, l_d = adv_losses(D, fake, real)
    ref = adv_losses_from_probs(D.prob(fake), D.prob(real))
    assert float(l_g.data) == pytest.approx(ref[0], rel=1e-5)
    assert float(l_d.data) == pytest.approx(ref[1], rel=1e-5, abs=1e-6)
    with pytest.raises(ContractError):
        adv_losses(D, fake, real[:5])


def test_kd_loss_example():
    feat, out = kd_losses(np.array([[1.0, 0.0]]), np.zeros((1, 2)), np.ones((2, 2)), np.ones((2, 2)))
    assert float(feat.data) == 0.5 and float(out.data) == 0.0


# ---------------------------------------------------------------- inference path


def test_uncached_path_equals_two_step_euler(small_model):
    rng = np.random.default_rng(0)
    x, c = rng.standard_normal((16, 2)).astype(np.float32), rng.integers(0, 2, 16)
    a = generate_inference_path(small_model, None, x, c, False).x0.data
    b = euler_sample(small_model, Schedule((1.0, 0.75)), c, x_init=x).x0
    assert np.allclose(a, b, atol=1e-6)


def test_gradient_flows_only_through_last_step(small_model):
    rng = np.random.default_rng(1)
    x, c = rng.standard_normal((16, 2)).astype(np.float32), rng.integers(0, 2, 16)
    path = generate_inference_path(small_model, None, x, c, False)
    g_path = ag.grad_eval(small_model.params, lambda: ag.tsum(path.x0))

    def last_only():
        v, _ = small_model.forward(path.x_prev, 0.75, c)
        return ag.tsum(ag.sub(ag.Tensor(path.x_prev), ag.mul(v, 0.75)))

    g_last = ag.grad_eval(small_model.params, last_only)
    for k in g_path:
        assert np.allclose(g_path[k], g_last[k], atol=1e-5)


def test_cached_path_needs_a_segment(small_model):
    with pytest.raises(ContractError):
        generate_inference_path(small_model, None, np.zeros((2, 2), np.float32), np.zeros(2, int), True)


@pytest.fixture(scope="module")
def ring_teacher():
    from fxdl.worlds import ring8
    w = ring8()
    m = BlockStackModel(2, 2, n_blocks=4, hidden=32, mlp_ratio=2, seed=0)
    train_teacher(w, m, TeacherConfig(iters=1500, batch=256), seed=0)
    return w, m


def test_reference_sampler_is_deterministic_and_close_to_data(ring_teacher):
    w, teacher = ring_teacher
    rng = np.random.default_rng(4)
    n = 400
    c = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 2)).astype(np.float32)
    ref = reference_sample(teacher, x, c)
    assert np.array_equal(ref, reference_sample(teacher, x, c))
    data_a = np.vstack([sample_world(w, k, int((c == k).sum()), 10 + k).x for k in (0, 1)])
    data_b = np.vstack([sample_world(w, k, int((c == k).sum()), 20 + k).x for k in (0, 1)])
    ref_sorted = np.vstack([ref[c == k] for k in (0, 1)])
    bw = median_bandwidth(data_a)
    baseline = abs(mmd2(data_a, data_b, bw))
    assert mmd2(ref_sorted, data_a, bw) <= 3 * max(baseline, 1e-3)


# ---------------------------------------------------------------- loop


def test_warmup_freezes_generator(small_model, world):
    G = small_model.copy_weights()
    cfg = quick(cache=True, segment=(1, 2), warmup=4, ttur=1)
    bank = CompensatorBank("segment", G.hidden, cfg.segments, seed=0)
    D = Discriminator(2, 32, seed=0)
    g0, b0 = digest(G.params), digest(bank.params)
    rows = warmup_compensator(cfg, G, bank, D, small_model, world)
    assert digest(G.params) == g0 and digest(bank.params) != b0
    assert [r["iter"] for r in rows] == [-3, -2, -1, 0]


def test_generator_updates_every_ttur_iterations(small_model, world):
    seen = []
    for n in (2, 3):
        G = small_model.copy_weights()
        before = digest(G.params)
        stage2_loop(quick(max_iters=n, ttur=3), G, small_model, world)
        seen.append(digest(G.params) != before)
    assert seen == [False, True]


def test_optimizers_are_separate(small_model, world):
    G = small_model.copy_weights()
    cfg = quick(cache=True, segment=(1, 2))
    bank = CompensatorBank("segment", G.hidden, cfg.segments, seed=0)
    st = _Stage2State(cfg, G, bank, Discriminator(2, 16))
    keys = [set(st.opt_g.m), set(st.opt_c.m), set(st.opt_d.m)]
    assert all(k for k in keys)
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])
    assert (st.opt_g.lr, st.opt_c.lr, st.opt_d.lr) == (cfg.lr_gen, cfg.lr_comp, cfg.lr_disc)


def test_first_loss_with_zero_init_compensator_equals_naive_reuse(small_model, world):
    losses = []
    for variant in ("segment", "none"):
        cfg = quick(max_iters=1, cache=True, segment=(1, 2), compensator=variant)
        res = stage2_loop(cfg, small_model.copy_weights(), small_model, world)
        losses.append((res.log[0]["L_G"], res.log[0]["L_D"]))
    assert losses[0] == losses[1]


def test_zero_heads_give_chance_level_first_losses(small_model, world):
    res = stage2_loop(quick(max_iters=1), small_model.copy_weights(), small_model, world)
    assert res.log[0]["L_G"] == pytest.approx(np.log(2), abs=1e-6)
    assert res.log[0]["L_D"] == pytest.approx(0.0, abs=1e-6)


def test_gap_logged_with_cache(small_model, world):
    cfg = quick(max_iters=2, cache=True, segment=(1, 2), eval_every=1, warmup=1)
    res = stage2_loop(cfg, small_model.copy_weights(), small_model, world)
    assert all(np.isfinite(r["cache_gap"]) for r in res.log)
    res = stage2_loop(quick(max_iters=1), small_model.copy_weights(), small_model, world)
    assert np.isnan(res.log[0]["cache_gap"])


def test_nan_reference_raises_numeric_error(small_model, world):
    bad = small_model.copy_weights()
    bad.params["head.b"].data[:] = np.nan
    with pytest.raises(NumericError):
        stage2_loop(quick(max_iters=1), small_model.copy_weights(), bad, world)


def test_config_validation():
    with pytest.raises(ContractError):
        Stage2Config(cache=True)
    with pytest.raises(ContractError):
        Stage2Config(ttur=0)
    with pytest.raises(ContractError):
        Stage2Config(cache=True, segment=(1, 2), schedule=(1.0, 0.9, 0.75))
    assert Stage2Config(reference_w=1.0).guidance is None
