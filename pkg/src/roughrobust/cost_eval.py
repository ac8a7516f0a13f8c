"""Monte-Carlo evaluation of discounted and finite-horizon costs.

Paths are simulated in chunks; path ``k`` always uses the noise substream
``k`` of the seed, so two runs with the same seed and ``n_paths`` see the
same underlying Brownian sample (common random numbers) and per-path
results do not depend on the chunk size.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from .hjb_solver import ModelSpec
from .noise_models import NoiseSpec, driver, reference_driver
from .rde_solver import solve_rde
from .rough_core import TimeGrid

DEFAULT_STEPS_PER_UNIT = 1024
DEFAULT_CHUNK = 1000
MAX_EXCLUDED_FRACTION = 1e-3


class CostEvaluationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CostEstimate:
    """Sample mean of per-path costs with its standard error."""

    mean: float
    std_error: float
    n_paths: int
    truncation_bound: float
    seed: int
    fingerprints: Dict[str, str]
    criterion: str
    n_excluded: int = 0
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "criterion": self.criterion,
            "mean": self.mean,
            "std_error": self.std_error,
            "n_paths": self.n_paths,
            "n_excluded": self.n_excluded,
            "truncation_bound": self.truncation_bound,
            "seed": self.seed,
            "fingerprints": dict(self.fingerprints),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), indent=1, sort_keys=True)


@dataclass(frozen=True)
class CostGap:
    gap: float
    combined_se: float
    paired_se: Optional[float]

    @property
    def significant(self) -> bool:
        """Gap exceeds three combined standard errors."""
        return self.gap > 3.0 * self.combined_se


def truncation_horizon(bound: float, discount: float, tol: float) -> float:
    """Smallest ``T`` with ``M exp(-alpha T) / alpha <= tol``."""
    if not (bound >= 0 and discount > 0 and tol > 0):
        raise ValueError("need bound >= 0, discount > 0, tol > 0")
    if bound == 0:
        return 0.0
    return max(0.0, math.log(bound / (discount * tol)) / discount)


def truncation_bound(bound: float, discount: float, horizon: float) -> float:
    return bound * math.exp(-discount * horizon) / discount


def trapezoid_weights(grid: TimeGrid, discount: float = 0.0) -> np.ndarray:
    """Weights ``w_k`` with ``sum_k w_k f(t_k) ~ int exp(-discount t) f(t) dt``."""
    dt = grid.steps
    w = np.zeros(grid.points.size)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w * np.exp(-discount * grid.points)


def _grid(horizon: float, steps_per_unit: int) -> TimeGrid:
    return TimeGrid.uniform(max(1, int(math.ceil(horizon * steps_per_unit - 1e-9))), t_end=horizon)


def _simulate(ms: ModelSpec, noise: NoiseSpec, policy, x0, grid: TimeGrid, n_paths: int,
              chunk: int, mirror: bool, reference: bool) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    make = reference_driver if reference else driver
    for start in range(0, n_paths, chunk):
        idx = range(start, min(n_paths, start + chunk))
        drv = make(noise, grid, paths=idx)
        if mirror:
            drv = drv.dilate(-1.0)
        y, costs = solve_rde(ms.vf, policy, drv, x0, on_divergence="mask", record=False,
                             running_cost=ms.running_cost)
        yield y[..., 0], costs


def _estimate(samples: np.ndarray, ms: ModelSpec, noise: NoiseSpec, policy, criterion: str,
              trunc: float, reference: bool) -> CostEstimate:
    bad = ~np.isfinite(samples)
    n_bad = int(bad.sum())
    if n_bad > MAX_EXCLUDED_FRACTION * samples.size:
        raise CostEvaluationError(f"{n_bad} of {samples.size} paths diverged")
    good = samples[~bad]
    if good.size == 0:
        raise CostEvaluationError("no paths to average")
    std = float(good.std(ddof=1)) if good.size > 1 else 0.0
    prints = {"model": ms.fingerprint(),
              "noise": ("reference:" if reference else "") + noise.fingerprint(),
              "policy": "none" if policy is None else policy.fingerprint()}
    return CostEstimate(float(good.mean()), std / math.sqrt(good.size), int(good.size), trunc,
                        noise.seed, prints, criterion, n_bad, samples)


def discounted_cost(ms: ModelSpec, noise: NoiseSpec, policy, x0: float, n_paths: int,
                    T_trunc: Optional[float] = None, tol: float = 1e-6, quad: str = "trapezoid",
                    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT, chunk: int = DEFAULT_CHUNK,
                    mirror: bool = False, reference: bool = False) -> CostEstimate:
    """``E int_0^T exp(-alpha s) c(X_s, h(X_s)) ds`` with ``T`` truncating at ``tol``.

    Without ``T_trunc`` the horizon is the smallest whole number of time units
    whose truncation bound is at most ``tol``.  ``mirror`` negates the noise
    (used for symmetry checks).  ``reference`` drives the model with the
    Stratonovich Brownian lift coupled to ``noise`` instead of ``noise`` itself.
    """
    if quad != "trapezoid":
        raise ValueError("only the trapezoid rule is supported")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    bound = ms.bound()
    if T_trunc is None:
        T_trunc = float(max(1, math.ceil(truncation_horizon(bound, ms.discount, tol))))
    grid = _grid(T_trunc, steps_per_unit)
    w = trapezoid_weights(grid, ms.discount)
    runs = _simulate(ms, noise, policy, x0, grid, n_paths, chunk, mirror, reference)
    # row sums, not a BLAS product, so results do not depend on the chunk size
    parts = [(costs * w).sum(axis=-1) for _, costs in runs]
    return _estimate(np.concatenate(parts), ms, noise, policy, "discounted",
                     truncation_bound(bound, ms.discount, T_trunc), reference)


def finite_horizon_cost(ms: ModelSpec, noise: NoiseSpec, policy, x0: float, n_paths: int,
                        T: float = 1.0, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT,
                        chunk: int = DEFAULT_CHUNK, mirror: bool = False,
                        reference: bool = False) -> CostEstimate:
    """``E [int_0^T c(X_s, h(s, X_s)) ds + H(X_T)]``; options as in :func:`discounted_cost`."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    grid = _grid(T, steps_per_unit)
    w = trapezoid_weights(grid)
    parts = []
    for y, costs in _simulate(ms, noise, policy, x0, grid, n_paths, chunk, mirror, reference):
        parts.append((costs * w).sum(axis=-1) + np.asarray(ms.terminal_cost(y), dtype=float))
    return _estimate(np.concatenate(parts), ms, noise, policy, "finite_horizon", 0.0, reference)


def cost_gap(a: CostEstimate, b: CostEstimate) -> CostGap:
    """``|mean_a - mean_b|`` with standard errors combined in quadrature.

    When both estimates carry per-path samples from the same seed and path
    count, the paired standard error (which benefits from common random
    numbers) is reported as well.
    """
    gap = abs(a.mean - b.mean)
    combined = math.hypot(a.std_error, b.std_error)
    paired = None
    if (a.samples is not None and b.samples is not None and a.seed == b.seed
            and a.samples.shape == b.samples.shape):
        d = a.samples - b.samples
        d = d[np.isfinite(d)]
        if d.size > 1:
            paired = float(d.std(ddof=1) / math.sqrt(d.size))
    return CostGap(gap, combined, paired)
