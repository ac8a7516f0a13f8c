"""Reference models used by the experiments and tests.

Vector fields take states of shape ``(..., 1)``; costs act on scalar states.
"""
from __future__ import annotations

import numpy as np

from .hjb_solver import ModelSpec
from .rde_solver import VectorField


def _action(x, u):
    x = np.asarray(x, dtype=float)
    if u is None:
        return np.zeros_like(x)
    return np.asarray(u, dtype=float)[..., None] + np.zeros_like(x)


def _unit_sigma(x):
    return np.ones(np.shape(x) + (1,))


def _zero_dsigma(x):
    return np.zeros(np.shape(x) + (1, 1))


def additive_control_field() -> VectorField:
    """``b(x, u) = u``, ``sigma = 1``."""
    return VectorField(b=_action, sigma=_unit_sigma, dsigma=_zero_dsigma,
                       lipschitz_bound_b=0.0, bound_b=1.0)


def _capped_quadratic(x):
    return np.minimum(np.asarray(x, dtype=float) ** 2, 4.0)


def symmetric_model(discount: float = 1.0, box: float = 6.0) -> ModelSpec:
    """``b = u`` on ``U = [-1, 1]``, ``sigma = 1``, ``c = min(x^2, 4) + 0.1 u^2``.

    The terminal cost for finite-horizon use is ``min(x^2, 4)``.
    """
    def cost(x, u):
        u = 0.0 if u is None else np.asarray(u, dtype=float)
        return _capped_quadratic(x) + 0.1 * u * u

    return ModelSpec(additive_control_field(), cost, discount=discount, u_bounds=(-1.0, 1.0),
                     box=box, terminal_cost=_capped_quadratic, cost_bound=4.1, name="symmetric")


def smooth_model(discount: float = 1.0, box: float = 6.0) -> ModelSpec:
    """Like :func:`symmetric_model` with the smooth cost ``x^2 / (1 + x^2) + 0.1 u^2``."""
    def cost(x, u):
        x = np.asarray(x, dtype=float)
        u = 0.0 if u is None else np.asarray(u, dtype=float)
        return x * x / (1.0 + x * x) + 0.1 * u * u

    return ModelSpec(additive_control_field(), cost, discount=discount, u_bounds=(-1.0, 1.0),
                     box=box, terminal_cost=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                     cost_bound=1.1, name="smooth")


def constant_cost_model(value: float = 1.0, discount: float = 1.0, terminal: float = 0.0,
                        box: float = 6.0) -> ModelSpec:
    """``c = value`` and ``H = terminal`` everywhere; dynamics as in :func:`symmetric_model`."""
    def cost(x, u):
        shape = np.broadcast(np.asarray(x), np.asarray(0.0 if u is None else u)).shape
        return np.full(shape, float(value))

    def term(x):
        return np.full(np.shape(x), float(terminal))

    return ModelSpec(additive_control_field(), cost, discount=discount, u_bounds=(-1.0, 1.0),
                     box=box, terminal_cost=term, cost_bound=abs(float(value)),
                     name=f"constant{value}")


def uncontrolled_model(discount: float = 1.0, box: float = 6.0) -> ModelSpec:
    """``b = -tanh(x)``, ``sigma = 1``, ``c = x^2 / (1 + x^2)``; the action set is ``{0}``."""
    def b(x, u):
        return -np.tanh(np.asarray(x, dtype=float))

    def cost(x, u):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast(x, np.asarray(0.0 if u is None else u)).shape
        return np.broadcast_to(x * x / (1.0 + x * x), shape)

    vf = VectorField(b=b, sigma=_unit_sigma, dsigma=_zero_dsigma, lipschitz_bound_b=1.0, bound_b=1.0)
    return ModelSpec(vf, cost, discount=discount, u_bounds=(0.0, 0.0), box=box,
                     cost_bound=1.0, name="uncontrolled")


def ou_model(discount: float = 1.0, clip: float = 20.0, box: float = 6.0) -> ModelSpec:
    """Ornstein-Uhlenbeck ``b = -x``, ``sigma = 1`` with the signed cost ``c = clip(x, -K, K)``.

    Unbounded drift and a signed cost: only for Monte-Carlo checks against
    ``E[X_t] = x0 exp(-t)``.
    """
    def b(x, u):
        return -np.asarray(x, dtype=float)

    def cost(x, u):
        return np.clip(np.asarray(x, dtype=float), -clip, clip)

    vf = VectorField(b=b, sigma=_unit_sigma, dsigma=_zero_dsigma, lipschitz_bound_b=1.0)
    return ModelSpec(vf, cost, discount=discount, u_bounds=(0.0, 0.0), box=box,
                     cost_bound=clip, name="ou")


def gbm_field() -> VectorField:
    """``dY = Y o dW``: solution ``y0 exp(W)``."""
    return VectorField(b=lambda x, u: np.zeros_like(np.asarray(x, dtype=float)),
                       sigma=lambda x: np.asarray(x, dtype=float)[..., None],
                       dsigma=lambda x: np.ones(np.shape(x) + (1, 1)))


def sine_field() -> VectorField:
    """``b = 0``, ``sigma(y) = sin y + 2``; Ito drift correction ``cos y (sin y + 2) / 2``."""
    return VectorField(b=lambda x, u: np.zeros_like(np.asarray(x, dtype=float)),
                       sigma=lambda x: (np.sin(np.asarray(x, dtype=float)) + 2.0)[..., None],
                       dsigma=lambda x: np.cos(np.asarray(x, dtype=float))[..., None, None])


def corrected_sine_field() -> VectorField:
    """:func:`sine_field` with the corrected drift, to be driven by an Ito lift."""
    base = sine_field()

    def b(x, u):
        return base.ito_stratonovich_shift(np.asarray(x, dtype=float))

    return VectorField(b=b, sigma=base.sigma, dsigma=base.dsigma)


MODELS = {
    "symmetric": symmetric_model,
    "smooth": smooth_model,
    "constant": constant_cost_model,
    "uncontrolled": uncontrolled_model,
    "ou": ou_model,
}
