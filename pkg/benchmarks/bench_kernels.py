"""Compiled vs pure-Python kernel timings, plus one end-to-end training iteration per backend.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fxdl import _kernels_py

try:
    from fxdl import _kernels as _compiled
except ImportError:
    _compiled = None

E2E = r"""
import time, numpy as np
from fxdl.kernels import BACKEND
from fxdl.worlds import ring8
from fxdl.denoiser import BlockStackModel
from fxdl.stage1 import Stage1Config, stage1_loop
m = BlockStackModel(2, 2, n_blocks=8, hidden=32, seed=0)
stage1_loop(Stage1Config(max_iters=2, batch=256), m, ring8())
t0 = time.perf_counter()
stage1_loop(Stage1Config(max_iters=20, batch=256), m, ring8())
print(BACKEND, (time.perf_counter() - t0) / 20)
"""


def cases(rng):
    act = rng.standard_normal((256, 128)).astype(np.float32)
    hid = rng.standard_normal((256, 32)).astype(np.float32)
    y, r = _kernels_py.layer_norm_fwd(hid, 1e-5)
    s = 1.0 / (1.0 + np.exp(-act))
    pts = rng.standard_normal((1000, 2))
    return {
        "layer_norm_fwd 256x32": ("layer_norm_fwd", (hid, 1e-5)),
        "layer_norm_bwd 256x32": ("layer_norm_bwd", (hid, y, r)),
        "silu_fwd 256x128": ("silu_fwd", (act,)),
        "silu_bwd 256x128": ("silu_bwd", (act, act, s)),
        "gaussian_kernel_sums 1000x1000": ("gaussian_kernel_sums", (pts, pts[::-1].copy(), 1.0)),
        "mean_pairwise_distance 1000": ("mean_pairwise_distance", (pts,)),
    }


def best(fn, args, repeat):
    n = max(1, int(0.05 / max(timeit.timeit(lambda: fn(*args), number=1), 1e-7)))
    return min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _compiled is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':34s} {'python us':>10s} {'compiled us':>12s} {'speedup':>8s}")
    for label, (name, a) in cases(rng).items():
        tp = best(getattr(_kernels_py, name), a, args.repeat)
        tc = best(getattr(_compiled, name), a, args.repeat)
        print(f"{label:34s} {tp * 1e6:10.1f} {tc * 1e6:12.1f} {tp / tc:8.2f}")
    print("\nend-to-end Stage I iteration (batch 256, 8 blocks, hidden 32):")
    for pure in ("0", "1"):
        env = dict(os.environ, FXDL_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        backend, sec = out.stdout.split()
        print(f"  {backend:9s} {float(sec) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
