"""Compiled and pure-Python kernels agree; the fallback can be forced."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fxdl import _kernels_py as ref
from fxdl import kernels

compiled = pytest.importorskip("fxdl._kernels")

elems = st.floats(-5, 5, allow_nan=False, width=64)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@settings(max_examples=20, deadline=None)
@given(a=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 9)), elements=elems))
def test_layer_norm_backends_agree(dtype, a):
    x = a.astype(dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-10
    y1, r1 = compiled.layer_norm_fwd(np.ascontiguousarray(x), 1e-5)
    y2, r2 = ref.layer_norm_fwd(x, 1e-5)
    assert np.allclose(y1, y2, atol=tol) and np.allclose(r1, r2, rtol=tol)
    gy = np.cos(x).astype(dtype)
    assert np.allclose(compiled.layer_norm_bwd(gy, y1, r1), ref.layer_norm_bwd(gy, y2, r2), atol=tol * 10)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@settings(max_examples=20, deadline=None)
@given(a=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=elems))
def test_silu_backends_agree(dtype, a):
    x = np.ascontiguousarray(a.astype(dtype))
    tol = 1e-5 if dtype == np.float32 else 1e-12
    y1, s1 = compiled.silu_fwd(x)
    y2, s2 = ref.silu_fwd(x)
    assert np.allclose(y1, y2, atol=tol) and np.allclose(s1, s2, atol=tol)
    gy = np.ascontiguousarray(np.sin(x))
    assert np.allclose(compiled.silu_bwd(gy, x, s1), ref.silu_bwd(gy, x, s2), atol=tol)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 20), st.just(3)), elements=elems),
       arrays(np.float64, st.tuples(st.integers(2, 20), st.just(3)), elements=elems),
       st.floats(0.1, 5.0))
def test_kernel_sums_backends_agree(x, y, bw):
    a = compiled.gaussian_kernel_sums(x, y, bw)
    b = ref.gaussian_kernel_sums(x, y, bw)
    assert np.allclose(a, b, rtol=1e-9, atol=1e-9)
    assert compiled.mean_pairwise_distance(x) == pytest.approx(ref.mean_pairwise_distance(x), rel=1e-9)


def test_dispatch_reports_compiled_backend():
    assert kernels.BACKEND == "compiled"


def test_env_var_forces_python_fallback():
    env = dict(os.environ, FXDL_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fxdl.kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_dispatch_wrappers_handle_higher_rank():
    x = np.random.default_rng(0).standard_normal((2, 3, 5))
    y, r = kernels.layer_norm_fwd(x)
    assert y.shape == x.shape and r.shape == (2, 3)
    assert np.allclose(y.mean(-1), 0, atol=1e-12)
