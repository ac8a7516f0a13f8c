"""Lipschitz Markov feedback policies on a uniform state grid.

A policy is a table of actions at the nodes of a uniform grid on
``[-L, L]`` (and, for time-varying policies, at the nodes of a time grid).
Evaluation interpolates linearly and clamps to the boundary values outside
the box, so the policy is globally Lipschitz with constant equal to its
steepest node-to-node slope.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .noise_models import mollifier_weights

CERTIFICATION_HEADROOM = 1.25


class PolicyError(ValueError):
    pass


class CertificationError(PolicyError):
    """A policy is steeper than the Lipschitz bound it must satisfy."""


def _uniform(points: np.ndarray, what: str) -> float:
    h = np.diff(points)
    if h.size < 1 or np.any(h <= 0) or np.any(np.abs(h - h[0]) > 1e-9 * abs(h[0])):
        raise PolicyError(f"{what} must be uniform and increasing")
    return float(h[0])


@dataclass(frozen=True, eq=False)
class LipschitzPolicy:
    """Clamped piecewise-linear policy ``x -> u`` or ``(t, x) -> u``.

    ``values`` has shape ``(nx,)`` for a stationary policy or ``(nt, nx)``
    for a time-varying one.  ``certified_lipschitz`` is the constant
    ``M_1`` in ``|h(x)-h(y)| <= M_1 |x-y|``, or ``M_1_hat`` in
    ``|h(t1,x)-h(t2,y)| <= M_1_hat (|t1-t2| + |x-y|)``.
    """

    state_grid: np.ndarray
    values: np.ndarray
    u_bounds: Tuple[float, float]
    certified_lipschitz: float
    time_grid: Optional[np.ndarray] = None

    def __post_init__(self):
        xs = np.array(self.state_grid, dtype=float)
        vals = np.array(self.values, dtype=float)
        _uniform(xs, "state grid")
        lo, hi = map(float, self.u_bounds)
        if not lo <= hi:
            raise PolicyError("u_bounds must satisfy lo <= hi")
        if self.time_grid is not None:
            ts = np.array(self.time_grid, dtype=float)
            if ts.size < 2 or np.any(np.diff(ts) <= 0):
                raise PolicyError("time grid must be increasing with at least two nodes")
            if vals.shape != (ts.size, xs.size):
                raise PolicyError(f"values shape {vals.shape} != {(ts.size, xs.size)}")
            ts.flags.writeable = False
            object.__setattr__(self, "time_grid", ts)
        elif vals.shape != xs.shape:
            raise PolicyError(f"values shape {vals.shape} != {xs.shape}")
        if not np.all(np.isfinite(vals)):
            raise PolicyError("policy values must be finite")
        if vals.min() < lo or vals.max() > hi:
            raise PolicyError("policy values leave the action interval")
        xs.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "state_grid", xs)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "u_bounds", (lo, hi))
        if self.certified_lipschitz < self.raw_lipschitz() * (1 - 1e-12):
            raise CertificationError(
                f"certified constant {self.certified_lipschitz} is below the raw slope {self.raw_lipschitz()}")

    @property
    def time_varying(self) -> bool:
        return self.time_grid is not None

    @property
    def box(self) -> Tuple[float, float]:
        return float(self.state_grid[0]), float(self.state_grid[-1])

    def state_slope(self) -> float:
        return float(np.max(np.abs(np.diff(self.values, axis=-1))) / np.diff(self.state_grid)[0])

    def time_slope(self) -> float:
        if not self.time_varying:
            return 0.0
        dv = np.abs(np.diff(self.values, axis=0)) / np.diff(self.time_grid)[:, None]
        return float(dv.max())

    def raw_lipschitz(self) -> float:
        """Steepest node-to-node slope (in x, and in t for time-varying policies)."""
        return max(self.state_slope(), self.time_slope())

    def evaluate(self, x, t: Optional[float] = None) -> np.ndarray:
        """Interpolated, clamped action at states ``x`` (and time ``t``)."""
        x = np.asarray(x, dtype=float)
        xs = self.state_grid
        h = xs[1] - xs[0]
        pos = np.clip((x - xs[0]) / h, 0.0, xs.size - 1)
        i = np.minimum(pos.astype(np.intp), xs.size - 2)
        w = pos - i
        if not self.time_varying:
            v = self.values
            return (1.0 - w) * v[i] + w * v[i + 1]
        if t is None:
            raise PolicyError("time-varying policy needs t")
        ts = self.time_grid
        tc = float(np.clip(t, ts[0], ts[-1]))
        j = int(min(np.searchsorted(ts, tc, side="right") - 1, ts.size - 2))
        s = (tc - ts[j]) / (ts[j + 1] - ts[j])
        row = (1.0 - s) * self.values[j] + s * self.values[j + 1]
        return (1.0 - w) * row[i] + w * row[i + 1]

    __call__ = evaluate

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256(self.values.tobytes())
        h.update(self.state_grid.tobytes())
        if self.time_varying:
            h.update(self.time_grid.tobytes())
        return h.hexdigest()[:16]

    # text format ------------------------------------------------------------

    def to_json(self) -> str:
        rec = {
            "format": "roughrobust-policy-v1",
            "kind": "time_varying" if self.time_varying else "stationary",
            "state_grid": {"lo": self.box[0], "hi": self.box[1], "n": int(self.state_grid.size)},
            "state_nodes": self.state_grid.tolist(),
            "time_nodes": None if not self.time_varying else self.time_grid.tolist(),
            "u_bounds": list(self.u_bounds),
            "certified_lipschitz": self.certified_lipschitz,
            "raw_lipschitz": self.raw_lipschitz(),
            "values": self.values.tolist(),
        }
        return json.dumps(rec, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "LipschitzPolicy":
        rec = json.loads(text)
        if rec.get("format") != "roughrobust-policy-v1":
            raise PolicyError("not a policy file")
        return cls(np.array(rec["state_nodes"]), np.array(rec["values"]), tuple(rec["u_bounds"]),
                   float(rec["certified_lipschitz"]),
                   None if rec["time_nodes"] is None else np.array(rec["time_nodes"]))

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "LipschitzPolicy":
        with open(path) as fh:
            return cls.from_json(fh.read())


def from_selector(state_grid, selector_values, u_bounds, time_grid=None) -> LipschitzPolicy:
    """Wrap (possibly discontinuous) selector values; clamps into ``u_bounds``.

    The certified constant is the raw slope, which can be huge for a
    bang-bang selector; :func:`mollify` is then needed before certification
    against a target class.
    """
    lo, hi = map(float, u_bounds)
    vals = np.clip(np.asarray(selector_values, dtype=float), lo, hi)
    probe = LipschitzPolicy(state_grid, vals, (lo, hi), float("inf"), time_grid)
    return LipschitzPolicy(state_grid, vals, (lo, hi), probe.raw_lipschitz(), time_grid)


def _mollify_rows(values: np.ndarray, h: float, bandwidth: float) -> np.ndarray:
    w = mollifier_weights(bandwidth, h, min_widths=1.0)
    half = (w.size - 1) // 2
    padded = np.concatenate([np.repeat(values[..., :1], half, axis=-1), values,
                             np.repeat(values[..., -1:], half, axis=-1)], axis=-1)
    rows = np.atleast_2d(padded)
    out = np.stack([np.convolve(r, w, mode="valid") for r in rows])
    return out.reshape(values.shape)


def mollify(p: LipschitzPolicy, bandwidth: float,
            headroom: float = CERTIFICATION_HEADROOM) -> LipschitzPolicy:
    """Convolve the policy in ``x`` with the unit-mass bump of half-width ``bandwidth``.

    Values beyond the box are continued by the boundary values, matching
    evaluation.  Certified constant: ``min(headroom * new slope, old slope)``,
    never below the new slope (mollification cannot steepen a table).
    """
    h = float(np.diff(p.state_grid)[0])
    if bandwidth <= h:
        raise PolicyError(f"bandwidth {bandwidth} must exceed the grid spacing {h}")
    lo, hi = p.u_bounds
    vals = np.clip(_mollify_rows(p.values, h, bandwidth), lo, hi)
    probe = LipschitzPolicy(p.state_grid, vals, p.u_bounds, float("inf"), p.time_grid)
    raw = probe.raw_lipschitz()
    cert = max(raw, min(headroom * raw, p.raw_lipschitz()))
    return LipschitzPolicy(p.state_grid, vals, p.u_bounds, cert, p.time_grid)


def certify(p: LipschitzPolicy, bound: float) -> None:
    """Raise :class:`CertificationError` unless ``p`` belongs to the class with constant ``bound``."""
    if p.certified_lipschitz > bound:
        raise CertificationError(f"policy constant {p.certified_lipschitz:.4g} exceeds the class bound {bound:.4g}")


def sampled_lipschitz_check(p: LipschitzPolicy, n_pairs: int = 10_000, seed: int = 0,
                            margin: float = 1.0) -> Tuple[bool, float]:
    """Test the Lipschitz inequality on random pairs.

    Points are drawn from a box ``margin`` wider than the grid on each side so
    the clamped region is exercised.  Returns ``(passed, worst ratio)`` where
    the ratio is ``|h(a) - h(b)| / (M * distance)``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = p.box
    x = rng.uniform(lo - margin, hi + margin, n_pairs)
    # half the pairs are close together, where interpolation slopes bite
    y = np.where(np.arange(n_pairs) % 2 == 0, x + rng.normal(0, 0.05 * (hi - lo), n_pairs),
                 rng.uniform(lo - margin, hi + margin, n_pairs))
    if not p.time_varying:
        diff = np.abs(p.evaluate(x) - p.evaluate(y))
        dist = np.abs(x - y)
    else:
        t0, t1 = p.time_grid[0], p.time_grid[-1]
        ta = rng.uniform(t0, t1, n_pairs)
        tb = np.where(np.arange(n_pairs) % 3 == 0, ta, rng.uniform(t0, t1, n_pairs))
        ha = np.array([p.evaluate(x[k], t=ta[k]) for k in range(n_pairs)])
        hb = np.array([p.evaluate(y[k], t=tb[k]) for k in range(n_pairs)])
        diff = np.abs(ha - hb)
        dist = np.abs(x - y) + np.abs(ta - tb)
    ok = dist > 0
    if p.certified_lipschitz > 0:
        ratio = diff[ok] / (p.certified_lipschitz * dist[ok])
    else:
        ratio = np.where(diff[ok] > 0, np.inf, 0.0)
    worst = float(ratio.max()) if ratio.size else 0.0
    return bool(np.all(diff[ok] <= p.certified_lipschitz * dist[ok] * (1 + 1e-12) + 1e-15)), worst
