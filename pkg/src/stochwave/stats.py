"""Small statistical helpers shared by the verification suites."""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from scipy.stats import norm as _norm


def mean_se(samples: np.ndarray, axis: int = 0):
    """Sample mean and standard error along an axis."""
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    m = samples.mean(axis=axis)
    se = samples.std(axis=axis, ddof=1) / math.sqrt(n)
    return m, se


def familywise_threshold(n_tests: int, alpha: float = 0.01, floor: float = 3.0) -> float:
    """z threshold with a Bonferroni correction, never below the 3-SE floor.

    A fixed per-comparison 3-SE rule is self-defeating across hundreds of
    comparisons (false alarms are then expected); the threshold grows with
    the family so that the whole battery has familywise level alpha.
    """
    if n_tests < 1:
        raise ValueError("need at least one test")
    return max(floor, float(_norm.ppf(1.0 - alpha / (2.0 * n_tests))))


@dataclasses.dataclass
class StationarityReport:
    """Outcome of translation-invariance z-tests over positions."""

    max_abs_z: float
    threshold: float
    n_tests: int
    replicas: int
    passed: bool
    worst_case: tuple = ()

    def __bool__(self):
        return self.passed


def stationarity_zscores(samples: np.ndarray) -> np.ndarray:
    """z-scores of per-position means against the position average.

    samples has shape (replicas, ..., n_positions); the statistic for each
    trailing cell compares its replica mean against the mean over positions
    of the same replica, which removes the common per-replica fluctuation.
    """
    samples = np.asarray(samples, dtype=float)
    r = samples.shape[0]
    d = samples - samples.mean(axis=-1, keepdims=True)
    m = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / math.sqrt(r)
    tiny = np.finfo(float).tiny
    scale = np.abs(samples).mean() + tiny
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 1e-14 * scale, m / np.maximum(se, tiny), 0.0)
    return z


def stationarity_report(samples: np.ndarray, alpha: float = 0.01) -> StationarityReport:
    z = stationarity_zscores(samples)
    n_tests = z.size
    thr = familywise_threshold(n_tests, alpha)
    worst = np.unravel_index(np.argmax(np.abs(z)), z.shape)
    return StationarityReport(float(np.max(np.abs(z))), thr, n_tests,
                              samples.shape[0], bool(np.max(np.abs(z)) <= thr),
                              tuple(int(i) for i in worst))


def pair_products(fields: np.ndarray, d: int, shifts) -> np.ndarray:
    """Replica-wise products f(x) f(x+y) for lattice shifts y.

    fields: (replicas, ...) + lattice shape (last d axes); returns an array
    (replicas, n_shifts, n_positions) with any middle axes summed out --
    callers pass either scalar fields or stacks to be aggregated.
    """
    fields = np.asarray(fields, dtype=float)
    axes = tuple(range(-d, 0))
    out = []
    for y in shifts:
        rolled = np.roll(fields, shift=tuple(-s for s in y), axis=axes)
        prod = fields * rolled
        # sum out everything between the replica axis and the lattice
        extra = tuple(range(1, prod.ndim - d))
        if extra:
            prod = prod.sum(axis=extra)
        out.append(prod.reshape(prod.shape[0], -1))
    return np.stack(out, axis=1)


def all_lattice_shifts(grid) -> list:
    """Every lattice offset of the torus grid, as integer tuples."""
    ranges = [range(grid.n)] * grid.d
    import itertools
    return [tuple(s) for s in itertools.product(*ranges)]


def fit_loglog_slope(eps: np.ndarray, err: np.ndarray,
                     floor: Optional[float] = None):
    """Least-squares slope of log err against log eps.

    Points at or below the rounding floor are dropped; when at least four
    points remain the extremes are trimmed so the fit sits on the middle of
    the schedule, away from both the nonlinear and the cancellation regime.
    Returns (slope, n_points_used) with slope = nan when fewer than two
    usable points remain (the all-exact case).
    """
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(err, dtype=float)
    if floor is None:
        floor = 1e-12 * max(1.0, float(np.max(err)))
    keep = err > floor
    e, v = eps[keep], err[keep]
    if len(e) >= 4:
        order = np.argsort(e)
        e, v = e[order][1:-1], v[order][1:-1]
    if len(e) < 2:
        return math.nan, int(len(e))
    slope = np.polyfit(np.log(e), np.log(v), 1)[0]
    return float(slope), int(len(e))
