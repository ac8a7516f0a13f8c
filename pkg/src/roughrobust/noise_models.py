"""Brownian motion and four near-Brownian approximations, with rough lifts.

Every sampler is a pure function of ``(seed, path index)``: each path draws
from its own counter-based Philox stream, so batches can be generated in any
order (or split across workers) with identical results.

Coupling
--------
Approximations and their Brownian reference are built from one draw:

* Wong-Zakai and mollified paths reuse the fine Brownian sample produced by
  :func:`bridge_refine`, which is also what :func:`brownian_lift` uses for
  the Stratonovich second level when ``d > 1``.
* Karhunen-Loeve paths use the first ``n`` coefficients of a coefficient
  stream whose full length defines the reference Brownian path.
* fractional Brownian paths for different Hurst indices share the same
  spectral Gaussian stream; ``H = 1/2`` in that stream is the reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import fft as sfft
from scipy import integrate, signal

from .rough_core import (DEFAULT_HOELDER, RoughPath, RoughPathError, TimeGrid,
                         lift_piecewise_linear, lift_smooth_quadrature, restrict,
                         stratonovich_to_ito)

FAMILIES = ("brownian_ito", "brownian_strat", "wong_zakai", "karhunen_loeve", "mollified", "fbm")

# substream tags
_INCREMENTS, _BRIDGE, _KL, _MOLLIFIER_EXT, _FBM = 1, 2, 3, 4, 5

Paths = Optional[Union[int, Sequence[int], range]]


class NoiseError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Which noise to drive a model with.

    ``level`` is the family parameter: the number of cells per unit time
    (``wong_zakai``) or of modes (``karhunen_loeve``), the bandwidth
    (``mollified``) or the Hurst index (``fbm``).  Brownian families take no
    level.
    """

    family: str
    level: Optional[float] = None
    dim: int = 1
    seed: int = 0
    fine_factor: int = 32
    quad_order: int = 4
    hoelder_exponent: float = DEFAULT_HOELDER

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise NoiseError(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.dim < 1:
            raise NoiseError("dim must be >= 1")
        if self.fine_factor < 1:
            raise NoiseError("fine_factor must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise NoiseError("seed must be a 64-bit unsigned integer")
        fam, lvl = self.family, self.level
        if fam.startswith("brownian"):
            if lvl is not None:
                raise NoiseError(f"{fam} takes no level")
        elif lvl is None:
            raise NoiseError(f"{fam} needs a level")
        elif fam in ("wong_zakai", "karhunen_loeve"):
            if int(lvl) != lvl or lvl < 1:
                raise NoiseError(f"{fam} level must be an integer >= 1")
            object.__setattr__(self, "level", int(lvl))
        elif fam == "mollified" and not lvl > 0:
            raise NoiseError("mollifier bandwidth must be > 0")
        elif fam == "fbm" and not 1.0 / 3.0 < lvl < 1.0:
            raise NoiseError("Hurst index must lie in (1/3, 1)")

    def fingerprint(self) -> str:
        return (f"{self.family}:{self.level}:d{self.dim}:s{self.seed}:m{self.fine_factor}"
                f":q{self.quad_order}:a{self.hoelder_exponent}")


def substream(seed: int, path_index: int, tag: int) -> np.random.Generator:
    """Independent generator for one (seed, path, purpose) triple."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index), int(tag)))
    return np.random.Generator(np.random.Philox(ss))


def _path_indices(paths: Paths) -> Optional[np.ndarray]:
    if paths is None:
        return None
    if isinstance(paths, (int, np.integer)):
        return np.arange(int(paths))
    return np.asarray(list(paths), dtype=int)


def _per_path(paths: Paths, draw) -> np.ndarray:
    idx = _path_indices(paths)
    if idx is None:
        return draw(0)
    return np.stack([draw(int(p)) for p in idx])


# Brownian ---------------------------------------------------------------------

def sample_brownian(grid: TimeGrid, d: int = 1, seed: int = 0, paths: Paths = None) -> np.ndarray:
    """Brownian values on ``grid`` (starting at 0), shape ``(N+1, d)``.

    With ``paths`` (a count or a sequence of path indices) the result has a
    leading batch axis.
    """
    sd = np.sqrt(grid.steps)[:, None]

    def draw(p):
        z = substream(seed, p, _INCREMENTS).standard_normal((grid.n_cells, d))
        out = np.zeros((grid.n_cells + 1, d))
        np.cumsum(z * sd, axis=0, out=out[1:])
        return out

    return _per_path(paths, draw)


def refine_grid(grid: TimeGrid, m: int) -> TimeGrid:
    """Split every cell into ``m`` equal sub-cells."""
    if m < 1:
        raise NoiseError("fine_factor must be >= 1")
    t = grid.points
    frac = np.arange(m) / m
    pts = (t[:-1, None] + grid.steps[:, None] * frac[None, :]).ravel()
    return TimeGrid(np.append(pts, t[-1]))


def bridge_refine(values: np.ndarray, grid: TimeGrid, fine_factor: int, seed: int = 0,
                  paths: Paths = None) -> np.ndarray:
    """Fill each cell with an independent Brownian bridge on ``fine_factor`` sub-steps.

    The refined sample agrees bit-for-bit with ``values`` at the original grid
    points (every ``fine_factor``-th fine point).
    """
    m = int(fine_factor)
    if m < 1:
        raise NoiseError("fine_factor must be >= 1")
    values = np.asarray(values, dtype=float)
    if m == 1:
        return values.copy()
    n, d = grid.n_cells, values.shape[-1]
    sd = np.sqrt(grid.steps / m)[:, None, None]
    frac = (np.arange(1, m) / m)[None, :, None]

    def draw(p):
        z = substream(seed, p, _BRIDGE).standard_normal((n, m, d)) * sd
        s = np.cumsum(z, axis=1)
        return s[:, :-1, :] - frac * s[:, -1:, :]

    idx = _path_indices(paths)
    bridges = draw(0) if idx is None else np.stack([draw(int(p)) for p in idx])
    left = values[..., :-1, :]
    inc = np.diff(values, axis=-2)
    interior = left[..., :, None, :] + frac * inc[..., :, None, :] + bridges
    fine = np.concatenate([left[..., :, None, :], interior], axis=-2)
    fine = fine.reshape(values.shape[:-2] + (n * m, d))
    return np.concatenate([fine, values[..., -1:, :]], axis=-2)


def brownian_lift(values: np.ndarray, grid: TimeGrid, interpretation: str = "stratonovich",
                  fine_factor: int = 32, seed: int = 0, paths: Paths = None,
                  hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Ito or Stratonovich lift of a Brownian sample.

    In one dimension the cell values are exact: ``XX = X^2/2`` (Stratonovich)
    and ``XX = (X^2 - dt)/2`` (Ito).  For ``d > 1`` the Stratonovich value is
    the canonical lift of a bridge refinement with ``fine_factor`` sub-steps
    (same ``seed``/``paths`` as used to draw ``values``); Ito subtracts
    ``dt I / 2``.
    """
    if interpretation not in ("ito", "stratonovich"):
        raise NoiseError("interpretation must be 'ito' or 'stratonovich'")
    if fine_factor < 1:
        raise NoiseError("fine_factor must be >= 1")
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    d = values.shape[-1]
    if d == 1:
        strat = lift_piecewise_linear(values, grid, hoelder_exponent)
    else:
        fine = bridge_refine(values, grid, fine_factor, seed, paths)
        fgrid = refine_grid(grid, fine_factor)
        strat = restrict(lift_piecewise_linear(fine, fgrid, hoelder_exponent),
                         np.arange(0, fgrid.n_cells + 1, fine_factor))
        # level one exactly as sampled
        strat = RoughPath(grid, np.diff(values, axis=-2), strat.second_level, hoelder_exponent)
    return strat if interpretation == "stratonovich" else stratonovich_to_ito(strat)


# Wong-Zakai ------------------------------------------------------------------------

def _interp_batched(t_src: np.ndarray, v_src: np.ndarray, t_out: np.ndarray) -> np.ndarray:
    c = np.clip(np.searchsorted(t_src, t_out, side="right") - 1, 0, t_src.size - 2)
    w = (t_out - t_src[c]) / (t_src[c + 1] - t_src[c])
    w = w[:, None]
    return (1.0 - w) * v_src[..., c, :] + w * v_src[..., c + 1, :]


def wong_zakai_lift(coarse_values: np.ndarray, coarse_grid: TimeGrid, output_grid: TimeGrid,
                    hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Canonical lift of the linear interpolant of ``coarse_values``, on ``output_grid``.

    Exact for any output grid: the lift is taken on the union of both grids
    and then Chen-compressed onto ``output_grid``.
    """
    cv = np.asarray(coarse_values, dtype=float)
    if cv.ndim == 1:
        cv = cv[:, None]
    if (coarse_grid.t_start, coarse_grid.t_end) != (output_grid.t_start, output_grid.t_end):
        raise NoiseError("coarse and output grids must span the same interval")
    union = np.union1d(coarse_grid.points, output_grid.points)
    vals = _interp_batched(coarse_grid.points, cv, union)
    lifted = lift_piecewise_linear(vals, TimeGrid(union), hoelder_exponent)
    if union.size == output_grid.points.size:
        return RoughPath(output_grid, lifted.increments, lifted.second_level, hoelder_exponent)
    return restrict(lifted, np.searchsorted(union, output_grid.points))


def wong_zakai_coarse_indices(grid: TimeGrid, n: int) -> np.ndarray:
    """Grid indices of the points ``k/n`` (step ``1/n`` in time) in ``grid``."""
    count = int(round((grid.t_end - grid.t_start) * n))
    times = grid.t_start + np.arange(count + 1) / n
    if count < 1 or abs(times[-1] - grid.t_end) > 1e-9 * max(1.0, grid.t_end):
        raise NoiseError(f"horizon {grid.t_end - grid.t_start} is not a multiple of 1/{n}")
    return grid.index_of(times, atol=1e-9)


def wong_zakai_from_brownian(values: np.ndarray, grid: TimeGrid, n: int,
                             hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Wong-Zakai lift with step ``1/n`` from a Brownian sample on ``grid``."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    idx = wong_zakai_coarse_indices(grid, n)
    return wong_zakai_lift(values[..., idx, :], TimeGrid(grid.points[idx]), grid, hoelder_exponent)


# Karhunen-Loeve --------------------------------------------------------------------

def kl_coefficients(seed: int, n_modes: int, d: int, paths: Paths = None) -> np.ndarray:
    """Standard normal coefficients ``Z_k^i``, shape ``(n_modes, d)``.

    Draws fill in mode order, so the first ``n`` rows are the same for any
    ``n_modes >= n``.
    """
    return _per_path(paths, lambda p: substream(seed, p, _KL).standard_normal((n_modes, d)))


def _kl_horizon(grid: TimeGrid, rescale: bool) -> float:
    if grid.t_start < 0:
        raise NoiseError("Karhunen-Loeve paths start at t = 0")
    if grid.t_end > 1.0 + 1e-12:
        if not rescale:
            raise NoiseError("Karhunen-Loeve basis is on [0, 1]; pass rescale=True for longer horizons")
        return grid.t_end
    return 1.0


def _kl_eval(z: np.ndarray, t: np.ndarray, horizon: float) -> Tuple[np.ndarray, np.ndarray]:
    n = z.shape[-2]
    freq = (np.arange(1, n + 1) - 0.5) * np.pi
    phase = np.outer(t / horizon, freq)
    scale = np.sqrt(2.0 * horizon)
    vals = scale * np.einsum("mk,...kd->...md", np.sin(phase) / freq, z)
    ders = (scale / horizon) * np.einsum("mk,...kd->...md", np.cos(phase), z)
    return vals, ders


def karhunen_loeve_path(n: int, grid: TimeGrid, d: int = 1, seed: int = 0, paths: Paths = None,
                        rescale: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Truncated sine-series Brownian path and its exact derivative on ``grid``.

    ``W^n(t) = sqrt(2) sum_{k<=n} sin((k-1/2) pi t) / ((k-1/2) pi) Z_k``.
    With ``rescale`` a horizon ``T > 1`` uses ``W(t) = sqrt(T) W~(t/T)``.
    """
    horizon = _kl_horizon(grid, rescale)
    z = kl_coefficients(seed, n, d, paths)
    return _kl_eval(z, grid.points, horizon)


def karhunen_loeve_lift(n: int, grid: TimeGrid, d: int = 1, seed: int = 0, quad_order: int = 4,
                        paths: Paths = None, rescale: bool = False,
                        hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Canonical lift of the ``n``-mode path by Gauss-Legendre quadrature."""
    horizon = _kl_horizon(grid, rescale)
    z = kl_coefficients(seed, n, d, paths)
    return lift_smooth_quadrature(lambda t: _kl_eval(z, t, horizon)[0],
                                  lambda t: _kl_eval(z, t, horizon)[1],
                                  grid, quad_order, hoelder_exponent)


def karhunen_loeve_reference(grid: TimeGrid, d: int = 1, seed: int = 0, fine_factor: int = 32,
                             paths: Paths = None, rescale: bool = False) -> Tuple[TimeGrid, np.ndarray]:
    """The Brownian path coupled to the KL approximations, on a refined grid.

    Uses as many modes as fine grid cells, summed with a type-II discrete sine
    transform.  Needs a uniform grid starting at 0.
    """
    if not grid.is_uniform() or grid.t_start != 0.0:
        raise NoiseError("the Karhunen-Loeve reference needs a uniform grid starting at 0")
    horizon = _kl_horizon(grid, rescale)
    fgrid = refine_grid(grid, fine_factor)
    nf = fgrid.n_cells
    if abs(grid.t_end - horizon) > 1e-12:
        raise NoiseError("the Karhunen-Loeve reference grid must end at the horizon")
    z = kl_coefficients(seed, nf, d, paths)
    k = np.arange(nf) + 0.5
    coef = np.sqrt(2.0 * horizon) * z / (k * np.pi)[:, None]
    vals = 0.5 * sfft.dst(coef, type=2, axis=-2)
    out = np.zeros(z.shape[:-2] + (nf + 1, d))
    out[..., 1:, :] = vals
    return fgrid, out


# mollified ---------------------------------------------------------------------------

def bump(x) -> np.ndarray:
    """Unnormalised bump ``exp(-1/(1-x^2))`` on (-1, 1), zero elsewhere."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    inside = np.abs(x) < 1
    out[inside] = np.exp(-1.0 / (1.0 - x[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def bump_mass() -> float:
    return integrate.quad(lambda s: float(bump(s)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-14)[0]


def mollifier(x, bandwidth: float) -> np.ndarray:
    """Unit-mass mollifier supported on ``(-bandwidth, bandwidth)``."""
    return bump(np.asarray(x) / bandwidth) / (bandwidth * bump_mass())


def mollifier_weights(bandwidth: float, h: float, min_widths: float = 2.0) -> np.ndarray:
    """Quadrature weights of the mollifier on offsets ``j h``, ``|j h| < bandwidth``.

    Composite trapezoid weights, renormalised to sum to one.
    """
    if bandwidth < min_widths * h * (1 - 1e-12):
        raise NoiseError(f"bandwidth {bandwidth} is below {min_widths} mesh widths ({min_widths * h})")
    half = int(np.ceil(bandwidth / h))
    w = mollifier(np.arange(-half, half + 1) * h, bandwidth) * h
    return w / w.sum()


def mollify_samples(fine_values: np.ndarray, fine_grid: TimeGrid, bandwidth: float,
                    seed: int = 0, paths: Paths = None) -> np.ndarray:
    """Convolve a uniformly sampled Brownian path with the mollifier.

    The path is continued past both ends with independent Brownian increments
    (its own substream), so the convolution needs no boundary special case.
    """
    if not fine_grid.is_uniform():
        raise NoiseError("mollification needs a uniform fine grid")
    v = np.asarray(fine_values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    h = fine_grid.steps[0]
    w = mollifier_weights(bandwidth, h)
    half = (w.size - 1) // 2
    d = v.shape[-1]

    def ext(p):
        z = substream(seed, p, _MOLLIFIER_EXT).standard_normal((2, half, d)) * np.sqrt(h)
        return np.cumsum(z, axis=1)

    idx = _path_indices(paths)
    e = ext(0) if idx is None else np.stack([ext(int(p)) for p in idx])
    before = v[..., :1, :] + e[..., 0, ::-1, :]
    after = v[..., -1:, :] + e[..., 1, :, :]
    padded = np.concatenate([before, v, after], axis=-2)
    kernel = w.reshape((1,) * (padded.ndim - 2) + (w.size, 1))
    return signal.fftconvolve(padded, kernel, mode="valid", axes=-2)


def mollified_lift(fine_values: np.ndarray, fine_grid: TimeGrid, bandwidth: float,
                   output_grid: TimeGrid, seed: int = 0, paths: Paths = None,
                   hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Lift of the mollified path, resolved on the fine grid and compressed to ``output_grid``."""
    smooth = mollify_samples(fine_values, fine_grid, bandwidth, seed, paths)
    lifted = lift_piecewise_linear(smooth, fine_grid, hoelder_exponent)
    return restrict(lifted, fine_grid.index_of(output_grid.points, atol=1e-9))


# fractional Brownian ----------------------------------------------------------------------

def fgn_autocovariance(hurst: float, n: int) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise at lags 0..n."""
    k = np.arange(n + 1, dtype=float)
    two_h = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** two_h - 2 * k ** two_h + np.abs(k - 1) ** two_h)


def circulant_eigenvalues(hurst: float, n: int) -> np.ndarray:
    """Eigenvalues of the size-2n circulant embedding of the fGn covariance."""
    g = fgn_autocovariance(hurst, n)
    row = np.concatenate([g, g[-2:0:-1]])
    lam = np.real(sfft.fft(row))
    if lam.min() < -1e-8 * lam.max():
        raise NoiseError(f"circulant embedding is not positive semi-definite for H={hurst}, "
                         f"n={n}: min eigenvalue {lam.min():.3e}")
    return np.clip(lam, 0.0, None)


def fbm_covariance(hurst: float, s, t) -> np.ndarray:
    s, t = np.asarray(s, dtype=float), np.asarray(t, dtype=float)
    two_h = 2.0 * hurst
    return 0.5 * (s ** two_h + t ** two_h - np.abs(t - s) ** two_h)


def sample_fbm(hurst: float, grid: TimeGrid, d: int = 1, seed: int = 0,
               paths: Paths = None) -> np.ndarray:
    """Fractional Brownian motion on a uniform grid by circulant embedding.

    Exact in law; ``E[B_H(1)^2] = 1``.  The spectral Gaussian stream depends
    only on ``(seed, path, grid size)``, so samples for different ``hurst``
    are coupled.
    """
    if not 0.0 < hurst < 1.0:
        raise NoiseError("Hurst index must lie in (0, 1)")
    if not grid.is_uniform():
        raise NoiseError("the circulant-embedding sampler needs a uniform grid")
    if grid.t_start != 0.0:
        raise NoiseError("fractional Brownian paths start at t = 0")
    n = grid.n_cells
    lam = circulant_eigenvalues(hurst, n)
    size = lam.size
    amp = np.sqrt(lam / size)
    scale = grid.steps[0] ** hurst

    def draw(p):
        rng = substream(seed, p, _FBM)
        z = rng.standard_normal((d, size)) + 1j * rng.standard_normal((d, size))
        fgn = np.real(sfft.fft(amp * z, axis=-1))[:, :n] * scale
        out = np.zeros((n + 1, d))
        np.cumsum(fgn.T, axis=0, out=out[1:])
        return out

    return _per_path(paths, draw)


def fbm_lift(path: np.ndarray, grid: TimeGrid, hurst: float,
             hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Canonical piecewise-linear lift of a sampled fBm path (``H > 1/3``)."""
    if not 1.0 / 3.0 < hurst < 1.0:
        raise NoiseError("a level-2 lift needs Hurst index in (1/3, 1)")
    return lift_piecewise_linear(path, grid, hoelder_exponent)


# coupled drivers ------------------------------------------------------------------

def _require_uniform(grid: TimeGrid, what: str) -> None:
    if not grid.is_uniform():
        raise NoiseError(f"{what} needs a uniform output grid")


def reference_driver(spec: NoiseSpec, grid: TimeGrid, paths: Paths = None) -> RoughPath:
    """The Stratonovich Brownian lift coupled to ``spec``'s family.

    It does not depend on ``spec.level``: every level of a family shares it.
    """
    fam, m, d, seed, a = spec.family, spec.fine_factor, spec.dim, spec.seed, spec.hoelder_exponent
    if fam == "karhunen_loeve":
        fgrid, fine = karhunen_loeve_reference(grid, d, seed, m, paths, grid.t_end > 1.0)
        return restrict(lift_piecewise_linear(fine, fgrid, a), np.arange(0, fgrid.n_cells + 1, m))
    if fam == "fbm":
        _require_uniform(grid, "fractional noise")
        fgrid = refine_grid(grid, m)
        return restrict(lift_piecewise_linear(sample_fbm(0.5, fgrid, d, seed, paths), fgrid, a),
                        np.arange(0, fgrid.n_cells + 1, m))
    w = sample_brownian(grid, d, seed, paths)
    return brownian_lift(w, grid, "stratonovich", m, seed, paths, a)


def coupled_lifts(spec: NoiseSpec, grid: TimeGrid, paths: Paths = None,
                  with_reference: bool = True) -> Tuple[RoughPath, Optional[RoughPath]]:
    """The family's lift and its coupled Stratonovich Brownian lift on ``grid``.

    Returns ``(approximation, reference)``; ``reference`` is ``None`` when
    ``with_reference`` is false.  Brownian families return the requested lift
    as the approximation.
    """
    fam, m, d, seed, a = spec.family, spec.fine_factor, spec.dim, spec.seed, spec.hoelder_exponent
    ref = reference_driver(spec, grid, paths) if with_reference else None
    if fam == "brownian_strat":
        return (ref if ref is not None else reference_driver(spec, grid, paths)), ref
    if fam in ("brownian_ito", "wong_zakai", "mollified"):
        w = sample_brownian(grid, d, seed, paths)
        if fam == "brownian_ito":
            approx = brownian_lift(w, grid, "ito", m, seed, paths, a)
        elif fam == "wong_zakai":
            approx = wong_zakai_from_brownian(w, grid, spec.level, a)
        else:
            _require_uniform(grid, "mollified noise")
            fgrid = refine_grid(grid, m)
            fine = bridge_refine(w, grid, m, seed, paths)
            approx = mollified_lift(fine, fgrid, spec.level, grid, seed, paths, a)
        return approx, ref
    if fam == "karhunen_loeve":
        rescale = grid.t_end > 1.0
        return karhunen_loeve_lift(spec.level, grid, d, seed, spec.quad_order, paths, rescale, a), ref
    # fbm: both paths on the refined grid from one spectral stream
    _require_uniform(grid, "fractional noise")
    fgrid = refine_grid(grid, m)
    keep = np.arange(0, fgrid.n_cells + 1, m)
    return restrict(fbm_lift(sample_fbm(spec.level, fgrid, d, seed, paths), fgrid, spec.level, a), keep), ref


def driver(spec: NoiseSpec, grid: TimeGrid, paths: Paths = None) -> RoughPath:
    """The rough path that drives a model under ``spec``."""
    return coupled_lifts(spec, grid, paths, with_reference=False)[0]
