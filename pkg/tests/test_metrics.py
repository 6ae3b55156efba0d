import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxdl.autograd import ContractError
from fxdl.metrics import (EvalReport, condition_accuracy, evaluate, median_bandwidth, mmd2, mode_coverage,
                          pairwise_diversity)


def test_coverage_examples(world):
    all_c = world.centers[list(world.cond_modes[0])]
    assert mode_coverage(all_c, world, 0, 0.3) == (1.0, 1.0)
    assert mode_coverage(all_c[:2], world, 0, 0.3) == (0.5, 1.0)
    cov, hq = mode_coverage(np.repeat(all_c[:1], 10, 0), world, 0, 0.3)
    assert cov == 0.25 and hq == 1.0
    with pytest.raises(ContractError):
        mode_coverage(np.zeros((0, 2)), world, 0, 0.3)
    with pytest.raises(ContractError):
        mode_coverage(all_c, world, 0, 0.0)


def test_unconditional_coverage_counts_all_modes(world):
    assert mode_coverage(world.centers[:4], world, None, 0.3)[0] == 0.5


def test_condition_accuracy_examples(world):
    own = world.centers[list(world.cond_modes[1])]
    other = world.centers[list(world.cond_modes[0])]
    assert condition_accuracy(own, 1, world) == 1.0
    assert condition_accuracy(other, 1, world) == 0.0
    assert condition_accuracy(np.vstack([own, other]), 1, world) == 0.5


def test_diversity_examples():
    assert pairwise_diversity([np.ones((4, 2))]) == 0.0
    assert pairwise_diversity([np.array([[0.0, 0.0], [3.0, 4.0]])]) == 5.0
    sq = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert pairwise_diversity([sq]) == pytest.approx((4 + 2 * np.sqrt(2)) / 6, abs=1e-12)
    assert (4 + 2 * np.sqrt(2)) / 6 == pytest.approx(1.1381, abs=1e-4)
    with pytest.raises(ContractError):
        pairwise_diversity([np.ones((1, 2))])


groups = arrays(np.float64, (3, 4, 2), elements=st.floats(-5, 5))


@settings(max_examples=30, deadline=None)
@given(groups, arrays(np.float64, (2,), elements=st.floats(-5, 5)), st.permutations(range(4)))
def test_diversity_translation_and_permutation_invariant(g, shift, perm):
    base = pairwise_diversity(list(g))
    assert pairwise_diversity(list(g + shift)) == pytest.approx(base, abs=1e-9)
    assert pairwise_diversity([x[list(perm)] for x in g]) == pytest.approx(base, abs=1e-12)
    assert pairwise_diversity(list(g) + list(g)) == pytest.approx(base, abs=1e-12)


def test_mmd_identical_sets_is_zero():
    x = np.random.default_rng(0).standard_normal((200, 2))
    assert abs(mmd2(x, x, 1.0)) <= 1e-6


def test_mmd_far_point_masses():
    x = np.zeros((50, 2))
    y = np.full((50, 2), 100.0)
    assert mmd2(x, y, 0.5) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (12, 2), elements=st.floats(-3, 3)), arrays(np.float64, (9, 2), elements=st.floats(-3, 3)),
       st.floats(0.2, 3.0), st.randoms(use_true_random=False))
def test_mmd_symmetric_and_permutation_invariant(x, y, bw, rnd):
    assert mmd2(x, y, bw) == pytest.approx(mmd2(y, x, bw), abs=1e-12)
    idx = list(range(len(x)))
    rnd.shuffle(idx)
    assert mmd2(x[idx], y, bw) == pytest.approx(mmd2(x, y, bw), abs=1e-12)


def test_mmd_needs_two_points():
    with pytest.raises(ContractError):
        mmd2(np.zeros((1, 2)), np.zeros((3, 2)), 1.0)


def test_mmd_separates_distributions():
    rng = np.random.default_rng(1)
    x, y, z = rng.standard_normal((300, 2)), rng.standard_normal((300, 2)), rng.standard_normal((300, 2)) + 1
    bw = median_bandwidth(x)
    assert mmd2(x, z, bw) > 10 * abs(mmd2(x, y, bw))


def test_report_row_and_csv(tmp_path, world):
    s = {c: world.centers[list(world.cond_modes[c])] for c in (0, 1)}
    r = evaluate(s, s, world, [s[0], s[1]])
    assert r.mode_coverage == 1.0 and r.condition_accuracy == 1.0 and abs(r.mmd2) < 1e-12
    r.append_csv(tmp_path / "e.csv", "run", 3)
    r.append_csv(tmp_path / "e.csv", "run", 4)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == ",".join(EvalReport.HEADER) and len(lines) == 3
    with pytest.raises(ContractError):
        EvalReport(1.0, 1.0, float("nan"), 0.0, 1.0)
