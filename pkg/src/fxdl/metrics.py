"""Sample-quality probes: mode coverage, condition accuracy, diversity, MMD^2."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import kernels
from .autograd import ContractError
from .worlds import MixtureSpec


@dataclass
class EvalReport:
    mode_coverage: float
    hq_fraction: float
    diversity: float
    mmd2: float
    condition_accuracy: float

    def __post_init__(self):
        for f in fields(self):
            if not np.isfinite(getattr(self, f.name)):
                raise ContractError(f"non-finite metric {f.name}")

    HEADER = ("run_id", "iter", "mode_coverage", "hq_fraction", "diversity", "mmd2", "condition_accuracy")

    def row(self, run_id: str, it: int) -> list:
        return [run_id, it] + [repr(float(v)) for v in asdict(self).values()]

    def append_csv(self, path: str | Path, run_id: str, it: int) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(self.HEADER)
            w.writerow(self.row(run_id, it))


def mode_coverage(samples, spec: MixtureSpec, condition: int | None, radius: float) -> tuple[float, float]:
    """(fraction of the condition's modes hit by >= 1 sample, fraction of samples near a valid mode)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ContractError("no samples")
    if radius <= 0:
        raise ContractError("radius must be positive")
    modes = spec.modes_for(condition)
    d = cdist(samples.reshape(len(samples), -1), spec.centers[modes])
    near = d <= radius
    return float(near.any(axis=0).mean()), float(near.any(axis=1).mean())


def condition_accuracy(samples, condition: int, spec: MixtureSpec) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ContractError("no samples")
    nearest = cdist(samples.reshape(len(samples), -1), spec.centers).argmin(axis=1)
    return float(np.isin(nearest, spec.modes_for(condition)).mean())


def pairwise_diversity(groups) -> float:
    """Mean Euclidean distance over unordered pairs within each group, averaged over groups."""
    vals = []
    for g in groups:
        g = np.asarray(g, dtype=np.float64)
        if len(g) < 2:
            raise ContractError("each diversity group needs at least two samples")
        vals.append(kernels.mean_pairwise_distance(g.reshape(len(g), -1)))
    if not vals:
        raise ContractError("no groups")
    return float(np.mean(vals))


def median_bandwidth(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.median(pdist(x.reshape(len(x), -1))))


def mmd2(x, y, bandwidth: float) -> float:
    """Unbiased Gaussian-kernel MMD^2.

    Equal-size inputs use the paired U-statistic (cross-term diagonal
    excluded), which is exactly zero for identical sets.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ContractError("mmd2 needs at least two samples per set")
    sxx, syy, sxy, txy = kernels.gaussian_kernel_sums(x, y, bandwidth)
    if m == n:
        return (sxx + syy - 2.0 * (sxy - txy)) / (m * (m - 1))
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def evaluate(samples_by_condition: dict[int, np.ndarray], reference_by_condition: dict[int, np.ndarray],
             spec: MixtureSpec, diversity_groups: list[np.ndarray], radius: float | None = None,
             bandwidth: float | None = None) -> EvalReport:
    """Aggregate report averaged over conditions."""
    radius = 3.0 * spec.sigma if radius is None else radius
    cov, hq, acc, mm = [], [], [], []
    for c, s in samples_by_condition.items():
        a, b = mode_coverage(s, spec, c, radius)
        cov.append(a)
        hq.append(b)
        acc.append(condition_accuracy(s, c, spec))
        ref = reference_by_condition[c]
        bw = median_bandwidth(ref) if bandwidth is None else bandwidth
        mm.append(mmd2(s, ref, bw))
    return EvalReport(
        mode_coverage=float(np.mean(cov)),
        hq_fraction=float(np.mean(hq)),
        diversity=pairwise_diversity(diversity_groups),
        mmd2=float(np.mean(mm)),
        condition_accuracy=float(np.mean(acc)),
    )
