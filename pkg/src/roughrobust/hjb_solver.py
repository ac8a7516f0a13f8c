"""One-dimensional HJB solvers for the Brownian (Stratonovich) model.

The Stratonovich dynamics ``dX = b dt + sigma o dW`` are written in Ito
form with the corrected drift ``b_hat = b + (1/2) sigma' sigma``, giving the
generator ``L_u f = a f'' + b_hat(x, u) f'`` with ``a = sigma^2 / 2``.

Discretisation on ``[-L, L]``: upwind first differences for the drift,
central second differences, and mirror ghost nodes (zero-derivative
Neumann condition) at both ends.  The scheme is monotone, so the discrete
problems have unique solutions bounded by ``max c / alpha``.

Action minimisation is exhaustive over ``nu`` equally spaced actions; ties
(within ``1e-12`` relative) go to the smaller action.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.linalg import solve_banded

from .rde_solver import VectorField

log = logging.getLogger(__name__)

TIE_RTOL = 1e-12
MEMORY_GUARD = 50_000_000


class HJBError(RuntimeError):
    pass


class HJBConvergenceError(HJBError):
    def __init__(self, msg: str, history: List[float]):
        super().__init__(f"{msg}; residual history {history[-5:]}")
        self.history = history


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ModelSpec:
    """Controlled model with one-dimensional state and noise.

    ``running_cost(x, u)`` and ``terminal_cost(x)`` act elementwise on
    arrays of scalar states; ``u`` may be ``None`` for an uncontrolled model.
    """

    vf: VectorField
    running_cost: Callable
    discount: float = 1.0
    u_bounds: Tuple[float, float] = (-1.0, 1.0)
    box: float = 6.0
    terminal_cost: Callable = _zero
    cost_bound: Optional[float] = None
    nondegeneracy_floor: float = 1e-8
    name: str = "model"

    def __post_init__(self):
        if self.vf.state_dim != 1 or self.vf.noise_dim != 1:
            raise HJBError("the HJB solvers handle one-dimensional state and noise only")
        if not self.discount > 0:
            raise HJBError("discount rate must be positive")
        lo, hi = self.u_bounds
        if not lo <= hi:
            raise HJBError("u_bounds must satisfy lo <= hi")
        if not self.box > 0:
            raise HJBError("box half-width must be positive")

    def actions(self, nu: int) -> np.ndarray:
        lo, hi = self.u_bounds
        return np.array([lo]) if nu == 1 or lo == hi else np.linspace(lo, hi, nu)

    def state_grid(self, nx: int) -> np.ndarray:
        if nx < 3:
            raise HJBError("need at least three state nodes")
        return np.linspace(-self.box, self.box, nx)

    def diffusion(self, x: np.ndarray) -> np.ndarray:
        """``a(x) = sigma(x)^2 / 2``."""
        s = np.asarray(self.vf.sigma(np.asarray(x, dtype=float)[..., None]))[..., 0, 0]
        return 0.5 * s * s

    def cost_table(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.running_cost(x[:, None], u[None, :]), dtype=float) + np.zeros((x.size, u.size))

    def drift_table(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return corrected_drift(self.vf)(x[:, None], u[None, :])

    def bound(self, nx: int = 601, nu: int = 41) -> float:
        """``M``: the declared cost bound, or the grid maximum of ``c``."""
        if self.cost_bound is not None:
            return float(self.cost_bound)
        return float(np.abs(self.cost_table(self.state_grid(nx), self.actions(nu))).max())

    def fingerprint(self) -> str:
        lo, hi = self.u_bounds
        return f"{self.name}:a{self.discount}:u[{lo},{hi}]:L{self.box}"

    def check(self, nx: int = 601, nu: int = 41) -> dict:
        """Numerical checks of the standing assumptions on the grid."""
        x = self.state_grid(nx)
        u = self.actions(nu)
        c = self.cost_table(x, u)
        a = self.diffusion(x)
        slopes = np.abs(np.diff(c, axis=0)) / np.diff(x)[:, None]
        report = {
            "cost_nonnegative": bool(c.min() >= 0),
            "cost_bounded": bool(np.abs(c).max() <= self.bound(nx, nu) * (1 + 1e-12)),
            "nondegenerate": bool(a.min() >= self.nondegeneracy_floor),
            "min_diffusion": float(a.min()),
            "cost_max_slope": float(slopes.max()),
            "cost_lipschitz_finite": bool(np.isfinite(slopes).all()),
        }
        report["ok"] = (report["cost_nonnegative"] and report["cost_bounded"]
                        and report["nondegenerate"] and report["cost_lipschitz_finite"])
        return report


def corrected_drift(vf: VectorField) -> Callable:
    """``b_hat(x, u) = b(x, u) + (1/2) (dsigma/dx)(x) sigma(x)`` for scalar states.

    Returned callable acts elementwise on arrays of scalar states.
    """
    def b_hat(x, u=None):
        x = np.asarray(x, dtype=float)
        if u is not None:
            x, u = np.broadcast_arrays(x, np.asarray(u, dtype=float))
        xs = np.ascontiguousarray(x)[..., None]
        drift = np.asarray(vf.b(xs, u), dtype=float)[..., 0]
        return drift + vf.ito_stratonovich_shift(xs)[..., 0]
    return b_hat


@dataclass(frozen=True, eq=False)
class ValueFunction:
    """Value (and minimising selector) on the state grid.

    Discounted: ``values``/``selector`` have shape ``(nx,)``.  Finite
    horizon: shape ``(nt+1, nx)`` on ``time_grid``.
    """

    x: np.ndarray
    values: np.ndarray
    selector: np.ndarray
    actions: np.ndarray
    kind: str
    time_grid: Optional[np.ndarray] = None
    iterations: int = 0
    residual: float = float("nan")
    history: Tuple[float, ...] = ()

    def to_table(self) -> str:
        """Plain-text table ``x value selector`` (discounted) or ``t x value selector``."""
        lines = []
        if self.kind == "discounted":
            lines.append("# x value selector")
            for xi, v, s in zip(self.x, self.values, self.selector):
                lines.append(f"{float(xi)!r} {float(v)!r} {float(s)!r}")
        else:
            lines.append("# t x value selector")
            for j, t in enumerate(self.time_grid):
                for xi, v, s in zip(self.x, self.values[j], self.selector[j]):
                    lines.append(f"{float(t)!r} {float(xi)!r} {float(v)!r} {float(s)!r}")
        return "\n".join(lines) + "\n"


def _differences(v: np.ndarray, h: float):
    """Forward, backward and second differences with mirror ghosts."""
    ext = np.concatenate([v[1:2], v, v[-2:-1]])
    fwd = (ext[2:] - ext[1:-1]) / h
    bwd = (ext[1:-1] - ext[:-2]) / h
    sec = (ext[2:] - 2 * ext[1:-1] + ext[:-2]) / (h * h)
    return fwd, bwd, sec


def _pick(q: np.ndarray) -> np.ndarray:
    """Row-wise argmin with near-ties resolved toward the smallest index."""
    qmin = q.min(axis=1, keepdims=True)
    tol = TIE_RTOL * (1.0 + np.abs(qmin))
    return np.argmax(q <= qmin + tol, axis=1)


def _linear_operator(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """Banded (3, nx) form of the upwind generator for a fixed drift ``b``."""
    bp = np.maximum(b, 0.0)
    bm = np.minimum(b, 0.0)
    lower = a / h ** 2 - bm / h
    upper = a / h ** 2 + bp / h
    diag = -2 * a / h ** 2 - bp / h + bm / h
    upper = upper.copy()
    lower = lower.copy()
    upper[0] += lower[0]
    lower[-1] += upper[-1]
    ab = np.zeros((3, a.size))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return ab


def _banded_matvec(ab: np.ndarray, v: np.ndarray) -> np.ndarray:
    out = ab[1] * v
    out[:-1] += ab[0, 1:] * v[1:]
    out[1:] += ab[2, :-1] * v[:-1]
    return out


def evaluate_policy(ms: ModelSpec, x: np.ndarray, drift: np.ndarray, cost: np.ndarray) -> Tuple[np.ndarray, float]:
    """Solve ``alpha V - L V = c`` for a fixed feedback (drift and cost per node)."""
    h = x[1] - x[0]
    a = ms.diffusion(x)
    ab = -_linear_operator(a, drift, h)
    ab[1] += ms.discount
    v = solve_banded((1, 1), ab, cost)
    resid = float(np.abs(_banded_matvec(ab, v) - cost).max())
    return v, resid


def solve_discounted(ms: ModelSpec, nx: int = 601, nu: int = 41, max_iter: int = 200,
                     policy_tol: float = 1e-9, linear_tol: float = 1e-10) -> ValueFunction:
    """Policy iteration for ``min_u [L_u V + c] = alpha V`` on the truncated box."""
    x = ms.state_grid(nx)
    h = x[1] - x[0]
    u = ms.actions(nu)
    bt = ms.drift_table(x, u)
    ct = ms.cost_table(x, u)
    rows = np.arange(nx)
    idx = _pick(ct)
    history: List[float] = []
    linear_scale = 1.0 + float(np.abs(ct).max())
    for it in range(1, max_iter + 1):
        v, lin_res = evaluate_policy(ms, x, bt[rows, idx], ct[rows, idx])
        fwd, bwd, _ = _differences(v, h)
        q = np.maximum(bt, 0) * fwd[:, None] + np.minimum(bt, 0) * bwd[:, None] + ct
        new = _pick(q)
        change = float(np.abs(u[new] - u[idx]).max())
        history.append(change)
        log.debug("policy iteration %d: policy change %.3e, linear residual %.3e", it, change, lin_res)
        if change < policy_tol:
            if lin_res > linear_tol * linear_scale:
                raise HJBConvergenceError(f"linear solve residual {lin_res:.3e} too large", history)
            vf = ValueFunction(x, v, u[idx], u, "discounted", iterations=it, history=tuple(history))
            return ValueFunction(x, v, u[idx], u, "discounted", iterations=it,
                                 residual=hjb_residual(vf, ms), history=tuple(history))
        idx = new
    raise HJBConvergenceError(f"policy iteration did not converge in {max_iter} iterations", history)


def solve_finite_horizon(ms: ModelSpec, T: float, nt: int = 50, nx: int = 601, nu: int = 41,
                         cfl: float = 0.9) -> ValueFunction:
    """Explicit backward scheme for ``psi_t + min_u [L_u psi + c] = 0``, ``psi(T) = H``.

    The time step must satisfy ``dt <= cfl / (2 max a / h^2 + max |b_hat| / h)``
    for monotonicity.  If ``T / nt`` is larger, ``nt`` is refined to the
    smallest admissible multiple, so the returned time grid may be finer
    than requested.
    """
    if not T > 0:
        raise HJBError("horizon must be positive")
    x = ms.state_grid(nx)
    h = x[1] - x[0]
    u = ms.actions(nu)
    bt = ms.drift_table(x, u)
    ct = ms.cost_table(x, u)
    a = ms.diffusion(x)
    bp, bm = np.maximum(bt, 0), np.minimum(bt, 0)
    dt_max = cfl / float((2 * a / h ** 2).max() + np.abs(bt).max() / h)
    sub = max(1, int(np.ceil(T / nt / dt_max - 1e-12)))
    if sub > 1:
        log.info("refining nt from %d to %d for stability", nt, nt * sub)
    nt *= sub
    if (nt + 1) * nx > MEMORY_GUARD:
        raise HJBError(f"(nt+1)*nx = {(nt + 1) * nx} exceeds the memory guard {MEMORY_GUARD}")
    times = np.linspace(0.0, T, nt + 1)
    dt = T / nt

    values = np.empty((nt + 1, nx))
    selector = np.empty((nt + 1, nx))
    v = np.asarray(ms.terminal_cost(x), dtype=float) + np.zeros(nx)
    for j in range(nt, -1, -1):
        if j < nt:
            v = v + dt * (a * sec + q.min(axis=1))
        values[j] = v
        fwd, bwd, sec = _differences(v, h)
        q = bp * fwd[:, None] + bm * bwd[:, None] + ct
        selector[j] = u[_pick(q)]
    vf = ValueFunction(x, values, selector, u, "finite_horizon", time_grid=times, iterations=nt)
    return ValueFunction(x, values, selector, u, "finite_horizon", time_grid=times,
                         iterations=nt, residual=hjb_residual(vf, ms))


def hjb_residual(v: ValueFunction, ms: ModelSpec, stencil: str = "upwind") -> float:
    """Max interior residual of the discrete HJB, recomputed from scratch.

    ``stencil="upwind"`` re-evaluates the solver's own discretisation (should
    vanish up to round-off); ``"central"`` uses centred first differences, so
    it measures the consistency error of the upwind solution, O(h).

    For finite-horizon functions the time derivative is the backward
    difference quotient between consecutive grid times.
    """
    if stencil not in ("upwind", "central"):
        raise ValueError("stencil must be 'upwind' or 'central'")
    x = v.x
    h = x[1] - x[0]
    u = v.actions
    b_hat = corrected_drift(ms.vf)
    a = ms.diffusion(x)[1:-1]

    def operator_min(w):
        best = np.full(w[..., 1:-1].shape, np.inf)
        for act in u:
            b = b_hat(x[1:-1], np.full(x.size - 2, act))
            c = np.asarray(ms.running_cost(x[1:-1], np.full(x.size - 2, act)), dtype=float)
            up, mid, dn = w[..., 2:], w[..., 1:-1], w[..., :-2]
            if stencil == "upwind":
                drift_term = np.where(b > 0, b * (up - mid) / h, b * (mid - dn) / h)
            else:
                drift_term = b * (up - dn) / (2 * h)
            val = a * (up - 2 * mid + dn) / h ** 2 + drift_term + c
            best = np.minimum(best, val)
        return best

    if v.kind == "discounted":
        return float(np.abs(operator_min(v.values) - ms.discount * v.values[1:-1]).max())
    dpsi = np.diff(v.values[:, 1:-1], axis=0) / np.diff(v.time_grid)[:, None]
    return float(np.abs(dpsi + operator_min(v.values[1:])).max())
