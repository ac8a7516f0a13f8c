"""Pathwise solution of controlled rough differential equations.

    dY = b(Y, u) dt + sigma(Y) dX,      u = h(Y) or h(t, Y)

One explicit second-order (Davie) step per grid cell:

    y_{k+1} = y_k + b(y_k, u_k) dt_k + sigma(y_k) X_k + (Dsigma sigma)(y_k) : XX_k

with ``(Dsigma sigma : XX)^i = sum_{j,l,p} d_p sigma^{ij} sigma^{pl} XX^{lj}``.
The drift (and hence the control) enters at first order, evaluated at the
left endpoint.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rough_core import ControlledPath, GridMismatchError, RoughPath

DEFAULT_BOX = 1e10
FD_STEP = 1e-5


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, n_paths: int = 1):
        super().__init__(f"solution left the state box at step {step} ({n_paths} path(s))")
        self.step = step
        self.n_paths = n_paths


def fd_dsigma(sigma: Callable, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite-difference Jacobian of ``sigma``; shape ``(..., m, d, m)``."""
    x = np.asarray(x, dtype=float)
    m = x.shape[-1]
    cols = []
    for p in range(m):
        e = np.zeros(m)
        e[p] = step
        cols.append((np.asarray(sigma(x + e)) - np.asarray(sigma(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class VectorField:
    """Drift and diffusion coefficients, vectorised over leading axes.

    ``b(x, u)`` maps states ``(..., m)`` and actions ``(...)`` (or ``None``)
    to ``(..., m)``; ``sigma(x)`` returns ``(..., m, d)``; ``dsigma(x)``
    returns ``(..., m, d, m)`` with last index the differentiation variable.
    Without ``dsigma`` a central finite difference is used.
    """

    b: Callable
    sigma: Callable
    dsigma: Optional[Callable] = None
    state_dim: int = 1
    noise_dim: int = 1
    lipschitz_bound_b: float = float("inf")
    bound_b: float = float("inf")

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        if self.dsigma is not None:
            return np.asarray(self.dsigma(x), dtype=float)
        return fd_dsigma(self.sigma, x)

    def check_dsigma(self, points: np.ndarray, rtol: float = 1e-5) -> float:
        """Largest relative gap between ``dsigma`` and a finite difference."""
        exact = self.jacobian(points)
        approx = fd_dsigma(self.sigma, points)
        return float(np.max(np.abs(exact - approx) / (1.0 + np.abs(exact))))

    def ito_stratonovich_shift(self, x: np.ndarray) -> np.ndarray:
        """``(1/2) sum_{j,p} d_p sigma^{ij} sigma^{pj}``: Stratonovich minus Ito drift."""
        return 0.5 * np.einsum("...ijp,...pj->...i", self.jacobian(x), self.sigma(x))


def second_order_term(vf: VectorField, y: np.ndarray, sig: np.ndarray, xx: np.ndarray) -> np.ndarray:
    return np.einsum("...ijp,...pl,...lj->...i", vf.jacobian(y), sig, xx)


def _control(policy, t: float, y: np.ndarray):
    if policy is None:
        return None
    if getattr(policy, "time_varying", False):
        return policy.evaluate(y[..., 0], t=t)
    return policy.evaluate(y[..., 0])


def solve_rde(vf: VectorField, policy, drv: RoughPath, y0, box: float = DEFAULT_BOX,
              on_divergence: str = "raise", record: bool = True,
              running_cost: Optional[Callable] = None):
    """Solve the controlled RDE along ``drv`` (batched or single).

    ``policy`` is ``None`` or has ``evaluate(x[, t])`` acting on the first
    state coordinate.  With ``on_divergence="mask"`` diverged paths are set to
    NaN instead of raising.

    Returns a :class:`ControlledPath` (values ``(*batch, N+1, m)``).  When
    ``record`` is false only the final state is returned, which is what large
    Monte-Carlo batches use; ``running_cost`` (if given) is then evaluated at
    every grid point and returned as a second array ``(*batch, N+1)``.
    """
    if on_divergence not in ("raise", "mask"):
        raise ValueError("on_divergence must be 'raise' or 'mask'")
    if drv.dim != vf.noise_dim:
        raise GridMismatchError(f"driver has dimension {drv.dim}, vector field expects {vf.noise_dim}")
    batch = drv.batch_shape
    y = np.broadcast_to(np.asarray(y0, dtype=float), batch + (vf.state_dim,)).copy()
    n = drv.n_cells
    t = drv.grid.points
    dt = drv.grid.steps
    inc = drv.increments
    sec = drv.second_level
    if record:
        ys = np.empty(batch + (n + 1, vf.state_dim))
        dys = np.empty(batch + (n + 1, vf.state_dim, vf.noise_dim))
    costs = np.empty(batch + (n + 1,)) if running_cost is not None else None
    alive = np.ones(batch, dtype=bool)
    scalar = vf.state_dim == 1 and vf.noise_dim == 1
    # overflow in a diverging path is caught by the box test below
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n + 1):
            sig = np.asarray(vf.sigma(y), dtype=float)
            u = _control(policy, t[k], y)
            if record:
                ys[..., k, :] = y
                dys[..., k, :, :] = sig
            if costs is not None:
                costs[..., k] = running_cost(y[..., 0], u)
            if k == n:
                break
            drift = np.asarray(vf.b(y, u), dtype=float)
            if scalar:
                s = sig[..., 0]
                step = drift * dt[k] + s * inc[..., k, :] + vf.jacobian(y)[..., 0, 0] * s * sec[..., k, 0, :]
            else:
                step = (drift * dt[k] + np.einsum("...ij,...j->...i", sig, inc[..., k, :])
                        + second_order_term(vf, y, sig, sec[..., k, :, :]))
            y = y + step
            bad = ~(np.abs(y) <= box).all(axis=-1)
            if np.any(bad & alive):
                if on_divergence == "raise":
                    raise DivergenceError(k + 1, int(np.sum(bad & alive)))
                alive &= ~bad
                y[bad] = 0.0
    if on_divergence == "mask" and not alive.all():
        if record:
            ys[~alive] = np.nan
            dys[~alive] = np.nan
        else:
            y[~alive] = np.nan
        if costs is not None:
            costs[~alive] = np.nan
    if record:
        out = ControlledPath(drv.grid, ys, dys)
        return out if costs is None else (out, costs)
    return y if costs is None else (y, costs)


def rough_integral(cp: ControlledPath, drv: RoughPath) -> np.ndarray:
    """Compensated Riemann sum ``sum_k y_k (x) X_k + y'_k XX_k``; shape ``(m, d)``.

    Entry ``(i, j)`` approximates ``int y^i dX^j``.
    """
    if not cp.grid.same_as(drv.grid):
        raise GridMismatchError("controlled path and driver live on different grids")
    y = cp.values[..., :-1, :]
    dy = cp.gubinelli_derivative[..., :-1, :, :]
    return (np.einsum("...ki,...kj->...ij", y, drv.increments)
            + np.einsum("...kil,...klj->...ij", dy, drv.second_level))


def strong_error(reference: ControlledPath, test: ControlledPath) -> float:
    """Max over shared grid points of ``|y_ref - y_test|`` (Euclidean in state)."""
    if not reference.grid.same_as(test.grid):
        raise GridMismatchError("paths live on different grids")
    diff = reference.values - test.values
    return float(np.max(np.sqrt(np.sum(diff ** 2, axis=-1))))
