import numpy as np
import pytest

from fxdl import harness
from fxdl.autograd import precision
from fxdl.denoiser import BlockStackModel
from fxdl.worlds import MixtureSpec, ring8


@pytest.fixture
def world():
    return ring8()


@pytest.fixture
def point_world():
    """One mode at (1, -1) with tiny spread, two classes sharing it."""
    return MixtureSpec(np.array([[1.0, -1.0]]), 1e-3, np.ones(1), ((0,), (0,)), name="point")


@pytest.fixture
def small_model():
    return BlockStackModel(2, 2, n_blocks=4, hidden=16, mlp_ratio=2, seed=3)


@pytest.fixture
def double_model():
    with precision("double"):
        return BlockStackModel(2, 2, n_blocks=4, hidden=16, mlp_ratio=2, seed=3)


@pytest.fixture
def fresh_memo():
    harness.clear_memo()
    yield
    harness.clear_memo()


TINY = {
    "model": {"blocks": 4, "hidden": 16, "mlp_ratio": 2},
    "teacher": {"iters": 40, "batch": 64},
    "stage1": {"max_iters": 6, "batch": 32},
    "stage2": {"max_iters": 4, "warmup": 2, "batch": 32, "reference_steps": 4},
    "cache": {"k": 1, "profile_batch": 32},
    "eval": {"n": 40, "groups": 4, "ref_steps": 4},
}


@pytest.fixture
def tiny_dict():
    import copy
    return copy.deepcopy(TINY)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then assert it."""
    lines = request.config.acceptance_lines

    def _verdict(number: int, ok: bool, detail: str):
        lines.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _verdict


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
