"""Level-2 rough paths sampled on a time grid.

A :class:`RoughPath` stores, for every grid cell ``[t_k, t_{k+1}]``, the
increment ``X_k`` and the second-level iterated integral ``XX_k``.  Levels
over any other pair of grid points are obtained through Chen's relation

    XX_{s,t} = XX_{s,u} + XX_{u,t} + X_{s,u} (x) X_{u,t}

so only O(N) numbers are stored and Chen holds by construction.

Conventions: ``XX[..., l, j]`` approximates ``int (X^l(r) - X^l(s)) dX^j(r)``;
vector norms are Euclidean and matrix norms are Frobenius.

Arrays may carry leading batch axes (``(*batch, N, d)`` increments) so that
Monte-Carlo code can lift and solve many paths at once.  Metric and
diagnostic functions operate on a single path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, TextIO, Tuple, Union

import numpy as np

DEFAULT_HOELDER = 0.4
#: above this many cells the seminorm switches to dyadic pairs
ALL_PAIRS_LIMIT = 4096


class RoughPathError(ValueError):
    """Invalid rough-path data or arguments."""


class NonFiniteError(RoughPathError):
    def __init__(self, what: str, index: Tuple[int, ...]):
        super().__init__(f"non-finite value in {what} at index {index}")
        self.index = index


class GridMismatchError(RoughPathError):
    """Two objects that must share a grid do not."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        raise NonFiniteError(what, tuple(int(i) for i in np.argwhere(bad)[0]))


def _readonly(arr) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing times ``t_0 < ... < t_N`` with ``N >= 1``."""

    points: np.ndarray

    def __post_init__(self):
        pts = _readonly(np.ravel(self.points))
        if pts.size < 2:
            raise RoughPathError("a time grid needs at least two points")
        _check_finite(pts, "grid points")
        if np.any(np.diff(pts) <= 0):
            raise RoughPathError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, n_cells: int, t_end: float = 1.0, t_start: float = 0.0) -> "TimeGrid":
        if n_cells < 1:
            raise RoughPathError("n_cells must be >= 1")
        return cls(np.linspace(t_start, t_end, n_cells + 1))

    @property
    def n_cells(self) -> int:
        return self.points.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def t_start(self) -> float:
        return float(self.points[0])

    @property
    def t_end(self) -> float:
        return float(self.points[-1])

    def mesh(self) -> float:
        return float(self.steps.max())

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        h = self.steps
        return bool(np.all(np.abs(h - h[0]) <= rtol * h[0]))

    def same_as(self, other: "TimeGrid") -> bool:
        return self.points.shape == other.points.shape and bool(
            np.array_equal(self.points, other.points))

    def index_of(self, times, atol: float = 1e-12) -> np.ndarray:
        """Indices of ``times`` among the grid points (each must be present)."""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        idx = np.clip(np.searchsorted(self.points, times), 0, self.n_cells)
        lower = np.clip(idx - 1, 0, self.n_cells)
        pick = np.where(np.abs(self.points[lower] - times) < np.abs(self.points[idx] - times),
                        lower, idx)
        scale = atol * max(1.0, abs(self.t_end))
        if np.any(np.abs(self.points[pick] - times) > scale):
            raise GridMismatchError("requested times are not grid points")
        return pick


@dataclass(frozen=True, eq=False)
class RoughPath:
    """Cell increments and second-level integrals on a :class:`TimeGrid`.

    ``increments`` has shape ``(*batch, N, d)`` and ``second_level`` shape
    ``(*batch, N, d, d)``.  Instances are immutable.
    """

    grid: TimeGrid
    increments: np.ndarray
    second_level: np.ndarray
    hoelder_exponent: float = DEFAULT_HOELDER

    def __post_init__(self):
        inc = _readonly(self.increments)
        sec = _readonly(self.second_level)
        if inc.ndim < 2:
            raise RoughPathError("increments must have shape (*batch, N, d)")
        n, d = inc.shape[-2:]
        if n != self.grid.n_cells:
            raise GridMismatchError(f"{n} increment rows for {self.grid.n_cells} grid cells")
        if sec.shape != inc.shape + (d,):
            raise RoughPathError(f"second level has shape {sec.shape}, expected {inc.shape + (d,)}")
        if not (1.0 / 3.0 < self.hoelder_exponent <= 0.5):
            raise RoughPathError("hoelder_exponent must lie in (1/3, 1/2]")
        _check_finite(inc, "increments")
        _check_finite(sec, "second level")
        object.__setattr__(self, "increments", inc)
        object.__setattr__(self, "second_level", sec)

    @property
    def dim(self) -> int:
        return self.increments.shape[-1]

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.increments.shape[:-2]

    def __getitem__(self, idx) -> "RoughPath":
        if not self.batch_shape:
            raise RoughPathError("indexing is only defined for batched rough paths")
        return RoughPath(self.grid, self.increments[idx], self.second_level[idx],
                         self.hoelder_exponent)

    def values(self, x0=None) -> np.ndarray:
        """Path values on the grid, starting at ``x0`` (default zero)."""
        shape = self.batch_shape + (self.n_cells + 1, self.dim)
        out = np.zeros(shape)
        np.cumsum(self.increments, axis=-2, out=out[..., 1:, :])
        if x0 is not None:
            out += np.asarray(x0, dtype=float)[..., None, :]
        return out

    def dilate(self, lam: float) -> "RoughPath":
        """Scale level one by ``lam`` and level two by ``lam**2``."""
        return RoughPath(self.grid, lam * self.increments, lam * lam * self.second_level,
                         self.hoelder_exponent)

    def with_exponent(self, alpha: float) -> "RoughPath":
        return RoughPath(self.grid, self.increments, self.second_level, alpha)

    def _single(self, what: str) -> None:
        if self.batch_shape:
            raise RoughPathError(f"{what} needs an unbatched rough path")


def _as_samples(samples, n_points: int) -> np.ndarray:
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.shape[-2] != n_points:
        raise GridMismatchError(f"{arr.shape[-2]} samples for a grid of {n_points} points")
    return arr


def lift_piecewise_linear(samples, grid: TimeGrid, hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Canonical lift of the linear interpolant of ``samples``.

    On a linear segment the iterated integral is ``XX_k = X_k (x) X_k / 2``.
    ``samples`` has shape ``(*batch, N+1, d)``; a 1-d array is read as ``d = 1``.
    """
    x = _as_samples(samples, grid.n_cells + 1)
    _check_finite(x, "samples")
    inc = np.diff(x, axis=-2)
    sec = 0.5 * inc[..., :, None] * inc[..., None, :]
    return RoughPath(grid, inc, sec, hoelder_exponent)


def lift_smooth_quadrature(path_fn: Callable, derivative_fn: Callable, grid: TimeGrid,
                           quad_order: int = 4,
                           hoelder_exponent: float = DEFAULT_HOELDER) -> RoughPath:
    """Lift a C^1 path using Gauss-Legendre quadrature on each cell.

    ``path_fn`` and ``derivative_fn`` map an array of ``M`` times to values of
    shape ``(*batch, M, d)`` (or ``(M,)`` when ``d = 1``).  Per cell,
    ``XX_k = int_{t_k}^{t_{k+1}} (x(r) - x(t_k)) (x) x'(r) dr``.
    """
    if quad_order < 2:
        raise RoughPathError("quad_order must be >= 2")
    nodes, weights = np.polynomial.legendre.leggauss(quad_order)
    t = grid.points
    h = grid.steps
    mid = 0.5 * (t[:-1] + t[1:])
    r = (mid[:, None] + 0.5 * h[:, None] * nodes[None, :]).ravel()

    def _eval(fn, times, what):
        out = np.asarray(fn(times), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        _check_finite(out, what)
        return out

    x_grid = _eval(path_fn, t, "path values")
    x_nodes = _eval(path_fn, r, "path values")
    dx_nodes = _eval(derivative_fn, r, "derivative values")
    batch = x_nodes.shape[:-2]
    d = x_nodes.shape[-1]
    n, q = grid.n_cells, quad_order
    x_nodes = x_nodes.reshape(batch + (n, q, d))
    dx_nodes = dx_nodes.reshape(batch + (n, q, d))
    rel = x_nodes - x_grid[..., :-1, None, :]
    w = (0.5 * h)[:, None] * weights[None, :]
    sec = np.einsum("...kql,...kqj,kq->...klj", rel, dx_nodes, w)
    inc = np.diff(x_grid, axis=-2)
    return RoughPath(grid, inc, sec, hoelder_exponent)


def _prefix(rp: RoughPath):
    """Path values ``x_j`` and anchored levels ``Z_j = XX_{0,j}``."""
    x = rp.values()
    contrib = rp.second_level + x[..., :-1, :, None] * rp.increments[..., None, :]
    z = np.zeros(x.shape + (rp.dim,))
    np.cumsum(contrib, axis=-3, out=z[..., 1:, :, :])
    return x, z


def chen_extend(rp: RoughPath, i: int, j: int) -> Tuple[np.ndarray, np.ndarray]:
    """Levels ``(X_{t_i,t_j}, XX_{t_i,t_j})`` by sequential Chen composition."""
    rp._single("chen_extend")
    if not (0 <= i < j <= rp.n_cells):
        raise RoughPathError(f"need 0 <= i < j <= N, got i={i}, j={j}")
    inc = rp.increments[i:j]
    offs = np.cumsum(inc, axis=0) - inc          # x_k - x_i for k in [i, j)
    big_x = inc.sum(axis=0)
    big_xx = rp.second_level[i:j].sum(axis=0) + np.einsum("kl,kj->lj", offs, inc)
    return big_x, big_xx


def restrict(rp: RoughPath, indices) -> RoughPath:
    """Chen-compress a rough path onto the sub-grid ``grid.points[indices]``.

    ``indices`` must be increasing and include both endpoints.
    """
    idx = np.asarray(indices, dtype=int)
    if idx[0] != 0 or idx[-1] != rp.n_cells or np.any(np.diff(idx) <= 0):
        raise RoughPathError("indices must increase from 0 to N")
    x = rp.values()
    seg_start = np.repeat(idx[:-1], np.diff(idx))
    offs = x[..., :-1, :] - x[..., seg_start, :]
    contrib = rp.second_level + offs[..., :, None] * rp.increments[..., None, :]
    sec = np.add.reduceat(contrib, idx[:-1], axis=-3)
    inc = np.add.reduceat(rp.increments, idx[:-1], axis=-2)
    return RoughPath(TimeGrid(rp.grid.points[idx]), inc, sec, rp.hoelder_exponent)


def concat_cells(rp: RoughPath, other: RoughPath) -> RoughPath:
    """Join two paths whose grids meet end to start."""
    if rp.grid.t_end != other.grid.t_start:
        raise GridMismatchError("grids do not meet")
    grid = TimeGrid(np.concatenate([rp.grid.points, other.grid.points[1:]]))
    return RoughPath(grid, np.concatenate([rp.increments, other.increments], axis=-2),
                     np.concatenate([rp.second_level, other.second_level], axis=-3),
                     rp.hoelder_exponent)


class SeminormTerms(NamedTuple):
    first: float
    second: float
    pairs: str

    @property
    def total(self) -> float:
        return self.first + self.second


def _resolve_pairs(pairs: str, n: int) -> str:
    if pairs == "auto":
        return "all" if n <= ALL_PAIRS_LIMIT else "dyadic"
    if pairs not in ("all", "dyadic"):
        raise RoughPathError(f"unknown pair set {pairs!r}")
    return pairs


def _pair_sup(t, xa, za, xb, zb, alpha, pairs, block=128):
    """Sup of the two Hoelder ratios of level differences over grid pairs."""
    n = t.size - 1
    dx = xa - xb
    dz = za - zb
    first = second = 0.0

    def _update(ii, jj, span):
        nonlocal first, second
        lvl1 = dx[jj] - dx[ii]
        cross = (xa[ii][..., :, None] * (xa[jj] - xa[ii])[..., None, :]
                 - xb[ii][..., :, None] * (xb[jj] - xb[ii])[..., None, :])
        lvl2 = dz[jj] - dz[ii] - cross
        n1 = np.sqrt(np.sum(lvl1 ** 2, axis=-1))
        n2 = np.sqrt(np.sum(lvl2 ** 2, axis=(-2, -1)))
        first = max(first, float(np.max(n1 / span ** alpha)))
        second = max(second, float(np.max(n2 / span ** (2 * alpha))))

    if pairs == "dyadic":
        p = 1
        while p <= n:
            ii = np.arange(0, n - p + 1)
            _update(ii, ii + p, t[ii + p] - t[ii])
            p *= 2
        return first, second
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        ii, jj = np.nonzero(np.arange(i0, i1)[:, None] < np.arange(n + 1)[None, :])
        ii = ii + i0
        _update(ii, jj, t[jj] - t[ii])
    return first, second


def seminorm_terms(rp: RoughPath, pairs: str = "auto") -> SeminormTerms:
    """Both terms of the ``(alpha, 2 alpha)`` Hoelder seminorm over grid pairs.

    ``pairs="all"`` scans every pair (O(N^2)); ``"dyadic"`` only pairs whose
    index gap is a power of two, which gives a lower bound.
    """
    rp._single("seminorm_terms")
    pairs = _resolve_pairs(pairs, rp.n_cells)
    x, z = _prefix(rp)
    zero_x, zero_z = np.zeros_like(x), np.zeros_like(z)
    f, s = _pair_sup(rp.grid.points, x, z, zero_x, zero_z, rp.hoelder_exponent, pairs)
    return SeminormTerms(f, s, pairs)


def rough_seminorm(rp: RoughPath, pairs: str = "auto") -> float:
    return seminorm_terms(rp, pairs).total


def distance_terms(a: RoughPath, b: RoughPath, pairs: str = "auto") -> SeminormTerms:
    a._single("rough_distance")
    b._single("rough_distance")
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("rough_distance needs identical grids")
    if a.dim != b.dim:
        raise GridMismatchError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.hoelder_exponent != b.hoelder_exponent:
        raise GridMismatchError("rough paths use different Hoelder exponents")
    pairs = _resolve_pairs(pairs, a.n_cells)
    xa, za = _prefix(a)
    xb, zb = _prefix(b)
    f, s = _pair_sup(a.grid.points, xa, za, xb, zb, a.hoelder_exponent, pairs)
    return SeminormTerms(f, s, pairs)


def rough_distance(a: RoughPath, b: RoughPath, pairs: str = "auto") -> float:
    """Inhomogeneous rough-path distance: seminorm of ``(X_a - X_b, XX_a - XX_b)``."""
    return distance_terms(a, b, pairs).total


def sup_distance(a: RoughPath, b: RoughPath) -> float:
    """Uniform distance between the two signals started at zero."""
    if not a.grid.same_as(b.grid):
        raise GridMismatchError("sup_distance needs identical grids")
    diff = a.values() - b.values()
    return float(np.sqrt(np.sum(diff ** 2, axis=-1)).max())


class CheckResult(NamedTuple):
    name: str
    residual: float
    scale: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tol * self.scale


LevelFn = Callable[[int, int], Tuple[np.ndarray, np.ndarray]]


def _sample_triples(n: int, n_triples: int, seed: int) -> np.ndarray:
    if n < 2:
        return np.zeros((0, 3), dtype=int)
    rng = np.random.default_rng(seed)
    consecutive = np.stack([np.arange(n - 1), np.arange(1, n), np.arange(2, n + 1)], axis=1)
    picks = np.sort(np.stack([rng.choice(n + 1, 3, replace=False) for _ in range(n_triples)]), axis=1)
    return np.concatenate([consecutive, picks])


def anchored_levels(rp: RoughPath) -> LevelFn:
    """Pair levels from prefix sums; independent of :func:`chen_extend`'s loop."""
    rp._single("anchored_levels")
    x, z = _prefix(rp)

    def levels(i: int, j: int):
        if j == i + 1:
            return rp.increments[i], rp.second_level[i]
        inc = x[j] - x[i]
        return inc, z[j] - z[i] - np.outer(x[i], inc)

    return levels


def check_chen(rp: RoughPath, tol: float = 1e-10, n_triples: int = 1000, seed: int = 0,
               levels: Optional[LevelFn] = None) -> CheckResult:
    """Max Chen residual ``|XX_ij - XX_iu - XX_uj - X_iu (x) X_uj|``.

    Triples cover every consecutive-cell triple plus ``n_triples`` random
    ones.  ``levels`` supplies pair levels to audit (default: the path's own
    anchored levels).  Passes iff residual <= tol * (1 + max |XX|).
    """
    rp._single("check_chen")
    lv = levels or anchored_levels(rp)
    resid = 0.0
    scale = 0.0
    for i, u, j in _sample_triples(rp.n_cells, n_triples, seed):
        x_iu, xx_iu = lv(i, u)
        x_uj, xx_uj = lv(u, j)
        _, xx_ij = lv(i, j)
        r = xx_ij - xx_iu - xx_uj - np.outer(x_iu, x_uj)
        resid = max(resid, float(np.abs(r).max()))
        scale = max(scale, float(np.abs(xx_ij).max()), float(np.abs(xx_iu).max()))
    if rp.n_cells >= 1:
        scale = max(scale, float(np.abs(rp.second_level).max()))
    return CheckResult("chen", resid, 1.0 + scale, tol)


def check_geometric(rp: RoughPath, tol: float = 1e-10, n_pairs: int = 1000,
                    seed: int = 0) -> CheckResult:
    """Max of ``|sym(XX) - X (x) X / 2|`` over all cells and sampled pairs.

    Passes iff residual <= tol * (1 + max |X|^2).
    """
    rp._single("check_geometric")
    inc = rp.increments
    sec = rp.second_level
    x, z = _prefix(rp)
    n = rp.n_cells
    rng = np.random.default_rng(seed)
    ii = rng.integers(0, n, n_pairs)
    jj = ii + 1 + (rng.random(n_pairs) * (n - ii)).astype(int)
    jj = np.minimum(jj, n)
    pair_x = x[jj] - x[ii]
    pair_xx = z[jj] - z[ii] - x[ii][:, :, None] * pair_x[:, None, :]
    all_x = np.concatenate([inc, pair_x])
    all_xx = np.concatenate([sec, pair_xx])
    sym = 0.5 * (all_xx + np.swapaxes(all_xx, -1, -2))
    target = 0.5 * all_x[:, :, None] * all_x[:, None, :]
    resid = float(np.abs(sym - target).max())
    scale = 1.0 + float(np.max(np.sum(all_x ** 2, axis=-1)))
    return CheckResult("geometric", resid, scale, tol)


def ito_to_stratonovich(rp: RoughPath) -> RoughPath:
    """Add ``(t_{k+1} - t_k) I / 2`` to every cell's second level."""
    corr = 0.5 * rp.grid.steps[:, None, None] * np.eye(rp.dim)
    return RoughPath(rp.grid, rp.increments, rp.second_level + corr, rp.hoelder_exponent)


def stratonovich_to_ito(rp: RoughPath) -> RoughPath:
    corr = 0.5 * rp.grid.steps[:, None, None] * np.eye(rp.dim)
    return RoughPath(rp.grid, rp.increments, rp.second_level - corr, rp.hoelder_exponent)


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """Values ``y(t_k)`` in R^m with Gubinelli derivative ``y'(t_k)`` in R^{m x d}."""

    grid: TimeGrid
    values: np.ndarray
    gubinelli_derivative: np.ndarray

    def __post_init__(self):
        y = _readonly(self.values)
        dy = _readonly(self.gubinelli_derivative)
        if y.ndim == 1:
            y = _readonly(y[:, None])
        if y.shape[-2] != self.grid.n_cells + 1:
            raise GridMismatchError("controlled path values do not match the grid")
        if dy.shape[:-1] != y.shape:
            raise RoughPathError(f"Gubinelli derivative shape {dy.shape} does not fit values {y.shape}")
        object.__setattr__(self, "values", y)
        object.__setattr__(self, "gubinelli_derivative", dy)

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    def remainder(self, drv: RoughPath, i: int, j: int) -> np.ndarray:
        """``R_Y(t_i, t_j) = y(t_j) - y(t_i) - y'(t_i) X_{t_i, t_j}``."""
        x_ij, _ = chen_extend(drv, i, j)
        return self.values[j] - self.values[i] - self.gubinelli_derivative[i] @ x_ij

    def remainder_seminorm(self, drv: RoughPath) -> float:
        """``sup |R_Y(s,t)| / |t-s|^{2 alpha}`` over all grid pairs."""
        if not self.grid.same_as(drv.grid):
            raise GridMismatchError("controlled path and driver grids differ")
        x = drv.values()
        t = self.grid.points
        y = self.values
        out = 0.0
        for i in range(self.grid.n_cells):
            r = y[i + 1:] - y[i] - (x[i + 1:] - x[i]) @ self.gubinelli_derivative[i].T
            span = t[i + 1:] - t[i]
            out = max(out, float(np.max(np.linalg.norm(r, axis=-1) / span ** (2 * drv.hoelder_exponent))))
        return out


# columnar text format -------------------------------------------------------

_MAGIC = "# roughrobust rough path v1"


def write_columnar(rp: RoughPath, dest: Union[str, TextIO]) -> None:
    """One row per cell: left time, d increments, d*d second-level entries (row-major)."""
    rp._single("write_columnar")
    d = rp.dim
    head = [_MAGIC,
            f"# dim={d} hoelder_exponent={rp.hoelder_exponent!r} n_cells={rp.n_cells} "
            f"t_final={float(rp.grid.t_end)!r}",
            "# t " + " ".join(f"X{i}" for i in range(d)) + " "
            + " ".join(f"XX{i}{j}" for i in range(d) for j in range(d))]
    rows = np.column_stack([rp.grid.points[:-1], rp.increments,
                            rp.second_level.reshape(rp.n_cells, d * d)])
    lines = head + [" ".join(repr(float(v)) for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if isinstance(dest, str):
        with open(dest, "w") as fh:
            fh.write(text)
    else:
        dest.write(text)


def read_columnar(src: Union[str, TextIO]) -> RoughPath:
    if isinstance(src, str):
        with open(src) as fh:
            lines = fh.read().splitlines()
    else:
        lines = src.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise RoughPathError("not a columnar rough-path file")
    meta = dict(tok.split("=") for tok in lines[1][1:].split())
    d = int(meta["dim"])
    n = int(meta["n_cells"])
    data = np.array([[float(v) for v in ln.split()] for ln in lines[3:] if ln.strip()])
    data = data.reshape(n, 1 + d + d * d)
    grid = TimeGrid(np.append(data[:, 0], float(meta["t_final"])))
    return RoughPath(grid, data[:, 1:1 + d], data[:, 1 + d:].reshape(n, d, d),
                     float(meta["hoelder_exponent"]))
