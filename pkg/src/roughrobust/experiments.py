"""Experiment pipelines behind the command-line tool.

Each ``run_*`` function takes a resolved :class:`ExperimentConfig` and an
output directory, writes its tables plus a JSON sidecar, and returns the
rows it wrote.  Outputs depend only on the configuration, so repeated runs
are byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import platform
import statistics
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from . import cost_eval, hjb_solver, models, noise_models, policy as pol, rde_solver, rough_core
from .config import ExperimentConfig
from .rough_core import TimeGrid

log = logging.getLogger(__name__)


class AcceptanceFailure(RuntimeError):
    """A self-test or certification did not pass."""


# helpers ------------------------------------------------------------------------

def _map(fn: Callable, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _versions() -> dict:
    try:
        from importlib.metadata import version
        own = version("roughrobust")
    except Exception:
        own = "unknown"
    return {"roughrobust": own, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write(out: str, name: str, text: str) -> str:
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _csv(header: Sequence[str], rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(r[h]) if isinstance(r[h], float) else ("" if r[h] is None else r[h]) for h in header])
    return buf.getvalue()


def _sidecar(out: str, name: str, cfg: ExperimentConfig, payload: dict) -> None:
    rec = {"config": cfg.data, "versions": _versions(), "seeds": cfg["seeds"]}
    rec.update(payload)
    _write(out, name, json.dumps(rec, indent=1, sort_keys=True) + "\n")
    _write(out, "resolved_config.yaml", cfg.to_yaml())


def _cells(cfg: ExperimentConfig) -> List[Tuple[str, Optional[float], int]]:
    return [(fam, lvl, seed) for fam, levels in cfg["noise"]["families"].items()
            for lvl in levels for seed in cfg["seeds"]]


def _spec(cfg: ExperimentConfig, fam: str, level, seed: int) -> noise_models.NoiseSpec:
    n = cfg["noise"]
    return noise_models.NoiseSpec(fam, level, dim=n["dim"], seed=seed, fine_factor=n["fine_factor"],
                                  quad_order=n["quad_order"], hoelder_exponent=n["hoelder_exponent"])


def median_trend(rows: Sequence[dict], key: str, group: Sequence[str]) -> List[dict]:
    """Median of ``key`` over seeds per (group..., level) and whether it strictly decreases."""
    out = []
    groups: Dict[tuple, Dict] = {}
    for r in rows:
        g = tuple(r[k] for k in group)
        groups.setdefault(g, {}).setdefault(r["level"], []).append(r[key])
    for g, by_level in groups.items():
        levels = list(by_level)
        medians = [float(statistics.median(by_level[lv])) for lv in levels]
        dec = all(b < a for a, b in zip(medians, medians[1:]))
        rec = dict(zip(group, g))
        rec.update({"levels": levels, "medians": medians, "strictly_decreasing": dec})
        out.append(rec)
    return out


def build_model(cfg: ExperimentConfig) -> hjb_solver.ModelSpec:
    m = cfg["model"]
    if m["name"] == "constant":
        return models.constant_cost_model(m["cost_value"], m["discount"], m["terminal_value"], m["box"])
    return models.MODELS[m["name"]](discount=m["discount"], box=m["box"])


# policies ------------------------------------------------------------------------

def hjb_policy(ms: hjb_solver.ModelSpec, criterion: str, nx: int, nu: int, nt: int,
               horizon: float, bandwidth: float, time_nodes: int = 51):
    """Solve the HJB and turn its selector into a mollified Lipschitz policy.

    For the finite-horizon criterion the selector is kept on ``time_nodes``
    equally spaced times.
    """
    if criterion == "discounted":
        v = hjb_solver.solve_discounted(ms, nx, nu)
        raw = pol.from_selector(v.x, v.selector, ms.u_bounds)
    else:
        v = hjb_solver.solve_finite_horizon(ms, horizon, nt, nx, nu)
        nt_fine = v.time_grid.size - 1
        keep = np.unique(np.round(np.linspace(0, nt_fine, max(2, time_nodes))).astype(int))
        raw = pol.from_selector(v.x, v.selector[keep], ms.u_bounds, time_grid=v.time_grid[keep])
    return v, pol.mollify(raw, bandwidth)


def certified_policy(cfg: ExperimentConfig, ms: hjb_solver.ModelSpec, criterion: str):
    """Policy for ``criterion`` from the configured source, certified before use."""
    pc = cfg["policy"]
    if pc["source"] == "file":
        p = pol.LipschitzPolicy.load(pc["path"])
        value = None
    else:
        h = cfg["hjb"]
        value, p = hjb_policy(ms, criterion, h["nx"], h["nu"], h["nt"], cfg["evaluation"]["horizon"],
                              pc["bandwidth"], pc["time_nodes"])
    try:
        if pc["lipschitz_bound"] is not None:
            pol.certify(p, pc["lipschitz_bound"])
        ok, worst = pol.sampled_lipschitz_check(p, pc["check_pairs"])
    except pol.CertificationError as exc:
        raise AcceptanceFailure(f"policy certification failed: {exc}") from None
    if not ok:
        raise AcceptanceFailure(f"policy violates its Lipschitz constant (worst ratio {worst:.4g})")
    return value, p, worst


def _evaluate(ms, spec, p, criterion: str, ev: dict, reference: bool = False):
    if criterion == "discounted":
        return cost_eval.discounted_cost(ms, spec, p, ev["x0"], ev["n_paths"], T_trunc=ev["T_trunc"],
                                         tol=ev["tol"], steps_per_unit=ev["steps_per_unit"],
                                         chunk=ev["chunk"], reference=reference)
    return cost_eval.finite_horizon_cost(ms, spec, p, ev["x0"], ev["n_paths"], T=ev["horizon"],
                                         steps_per_unit=ev["steps_per_unit"], chunk=ev["chunk"],
                                         reference=reference)


# runners --------------------------------------------------------------------------

NOISE_HEADER = ("family", "level", "seed", "alpha", "rho", "sup")


def run_noise_convergence(cfg: ExperimentConfig, out: str, threads: int = 1) -> List[dict]:
    """Rough and sup distance of every family level to its coupled Stratonovich lift."""
    g = cfg["grid"]
    grid = TimeGrid.uniform(g["n_cells"], t_end=g["horizon"])
    alpha = cfg["noise"]["hoelder_exponent"]

    def cell(c):
        fam, lvl, seed = c
        approx, ref = noise_models.coupled_lifts(_spec(cfg, fam, lvl, seed), grid)
        return {"family": fam, "level": lvl, "seed": seed, "alpha": alpha,
                "rho": rough_core.rough_distance(approx, ref), "sup": rough_core.sup_distance(approx, ref)}

    rows = _map(cell, _cells(cfg), threads)
    _write(out, "noise_convergence.csv", _csv(NOISE_HEADER, rows))
    _sidecar(out, "noise_convergence.json", cfg, {"trend": median_trend(rows, "rho", ["family"])})
    return rows


ROBUST_HEADER = ("criterion", "family", "level", "seed", "J_true", "SE_true", "J_ideal", "SE_ideal",
                 "gap", "combined_SE", "paired_SE")


def run_robustness_sweep(cfg: ExperimentConfig, out: str, threads: int = 1) -> List[dict]:
    """HJB policy, then cost gaps between each noise level and the idealized model."""
    ms = build_model(cfg)
    ev = cfg["evaluation"]
    rows: List[dict] = []
    policies = {}
    for criterion in ev["criteria"]:
        _, p, worst = certified_policy(cfg, ms, criterion)
        policies[criterion] = {"fingerprint": p.fingerprint(), "certified_lipschitz": p.certified_lipschitz,
                               "raw_lipschitz": p.raw_lipschitz(), "worst_sampled_ratio": worst}
        _write(out, f"policy_{criterion}.json", p.to_json() + "\n")
        ideal_cells = sorted({(fam, seed) for fam, _, seed in _cells(cfg)},
                             key=lambda c: (list(cfg["noise"]["families"]).index(c[0]), c[1]))

        def ideal(c):
            fam, seed = c
            first = cfg["noise"]["families"][fam][0]
            return c, _evaluate(ms, _spec(cfg, fam, first, seed), p, criterion, ev, reference=True)

        ideals = dict(_map(ideal, ideal_cells, threads))

        def cell(c):
            fam, lvl, seed = c
            est = _evaluate(ms, _spec(cfg, fam, lvl, seed), p, criterion, ev)
            ref = ideals[(fam, seed)]
            gap = cost_eval.cost_gap(est, ref)
            return {"criterion": criterion, "family": fam, "level": lvl, "seed": seed,
                    "J_true": est.mean, "SE_true": est.std_error, "J_ideal": ref.mean,
                    "SE_ideal": ref.std_error, "gap": gap.gap, "combined_SE": gap.combined_se,
                    "paired_SE": gap.paired_se}

        rows.extend(_map(cell, _cells(cfg), threads))
    trend = median_trend(rows, "gap", ["criterion", "family"])
    for t in trend:
        last = [r for r in rows if r["criterion"] == t["criterion"] and r["family"] == t["family"]
                and r["level"] == t["levels"][-1]]
        se = float(statistics.median(r["combined_SE"] for r in last))
        t["final_gap_within_tolerance"] = t["medians"][-1] <= max(3.0 * se, 0.01)
    _write(out, "robustness.csv", _csv(ROBUST_HEADER, rows))
    _sidecar(out, "robustness.json", cfg, {"trend": trend, "policies": policies})
    return rows


def run_hjb(cfg: ExperimentConfig, out: str, threads: int = 1) -> dict:
    """Solve the HJB for each configured criterion; write value tables and policies."""
    ms = build_model(cfg)
    h, pc = cfg["hjb"], cfg["policy"]
    report = {"model_check": ms.check(h["nx"], h["nu"])}
    for criterion in cfg["evaluation"]["criteria"]:
        v, p = hjb_policy(ms, criterion, h["nx"], h["nu"], h["nt"], cfg["evaluation"]["horizon"],
                          pc["bandwidth"], pc["time_nodes"])
        _write(out, f"value_{criterion}.txt", v.to_table())
        _write(out, f"policy_{criterion}.json", p.to_json() + "\n")
        report[criterion] = {"iterations": v.iterations, "residual": v.residual,
                             "value_max": float(np.max(v.values)), "value_min": float(np.min(v.values)),
                             "certified_lipschitz": p.certified_lipschitz}
    _sidecar(out, "hjb.json", cfg, {"report": report})
    return report


EVAL_HEADER = ("criterion", "family", "level", "seed", "mean", "std_error", "n_paths", "n_excluded",
               "truncation_bound")


def run_evaluate(cfg: ExperimentConfig, out: str, threads: int = 1) -> List[dict]:
    """Cost of the configured policy under every family, level and seed."""
    ms = build_model(cfg)
    ev = cfg["evaluation"]
    rows = []
    records = []
    for criterion in ev["criteria"]:
        _, p, _ = certified_policy(cfg, ms, criterion)

        def cell(c):
            fam, lvl, seed = c
            return c, _evaluate(ms, _spec(cfg, fam, lvl, seed), p, criterion, ev)

        for (fam, lvl, seed), est in _map(cell, _cells(cfg), threads):
            rows.append({"criterion": criterion, "family": fam, "level": lvl, "seed": seed,
                         "mean": est.mean, "std_error": est.std_error, "n_paths": est.n_paths,
                         "n_excluded": est.n_excluded, "truncation_bound": est.truncation_bound})
            records.append(est.to_record())
    _write(out, "evaluate.csv", _csv(EVAL_HEADER, rows))
    _sidecar(out, "evaluate.json", cfg, {"estimates": records})
    return rows


def run_lift(cfg: ExperimentConfig, out: str, threads: int = 1) -> List[str]:
    """Write one lifted sample path per family, level and seed in the columnar format."""
    g = cfg["grid"]
    grid = TimeGrid.uniform(g["n_cells"], t_end=g["horizon"])
    written = []
    os.makedirs(out, exist_ok=True)
    for fam, lvl, seed in _cells(cfg):
        rp = noise_models.driver(_spec(cfg, fam, lvl, seed), grid)
        name = f"lift_{fam}_{'none' if lvl is None else lvl}_{seed}.txt"
        rough_core.write_columnar(rp, os.path.join(out, name))
        written.append(name)
    _sidecar(out, "lift.json", cfg, {"files": written})
    return written


# self-test ------------------------------------------------------------------------

Check = Tuple[str, Callable[[], Tuple[bool, str]]]


def _suite_rough_core(corrupt_chen: bool) -> List[Check]:
    rng = np.random.default_rng(7)
    grid = TimeGrid.uniform(256)
    samples = np.cumsum(rng.normal(0, 0.0625, (257, 2)), axis=0)
    rp = rough_core.lift_piecewise_linear(samples, grid)

    def chen():
        levels = rough_core.anchored_levels(rp)
        if corrupt_chen:
            good = levels
            k = 100

            def levels(i, j):
                x, xx = good(i, j)
                if (i, j) == (k, k + 1):
                    xx = xx.copy()
                    xx[0, 1] += 1e-3
                return x, xx
        r = rough_core.check_chen(rp, levels=levels)
        return r.passed, f"residual {r.residual:.3e} (tol {r.tol:g} x scale {r.scale:.3g})"

    def geometric():
        r = rough_core.check_geometric(rp)
        return r.passed, f"residual {r.residual:.3e}"

    def ito():
        w = noise_models.sample_brownian(grid, 1, seed=3)
        lift = noise_models.brownian_lift(w, grid, "ito")
        bad = not rough_core.check_geometric(lift).passed
        good = rough_core.check_geometric(rough_core.ito_to_stratonovich(lift)).passed
        return bad and good, f"ito lift rejected: {bad}; corrected lift accepted: {good}"

    def columnar():
        buf = io.StringIO()
        rough_core.write_columnar(rp, buf)
        buf.seek(0)
        back = rough_core.read_columnar(buf)
        same = np.array_equal(back.increments, rp.increments) and np.array_equal(back.second_level, rp.second_level)
        return same, "round trip exact" if same else "round trip changed values"

    return [("chen", chen), ("geometric", geometric), ("ito_stratonovich", ito), ("columnar_round_trip", columnar)]


def _suite_noise_models() -> List[Check]:
    grid = TimeGrid.uniform(256)

    def bridge():
        w = noise_models.sample_brownian(grid, 2, seed=5)
        fine = noise_models.bridge_refine(w, grid, 8, seed=5)
        ok = np.array_equal(fine[::8], w)
        return ok, "coarse samples preserved" if ok else "bridge moved coarse samples"

    def wong_zakai():
        w = noise_models.sample_brownian(grid, 2, seed=5)
        ref = noise_models.brownian_lift(w, grid, "stratonovich", 16, seed=5)
        d = [rough_core.rough_distance(noise_models.wong_zakai_from_brownian(w, grid, n), ref) for n in (8, 128)]
        return d[1] < d[0], f"rho at n=8: {d[0]:.3f}, n=128: {d[1]:.3f}"

    def kl_reference():
        fgrid, fine = noise_models.karhunen_loeve_reference(grid, 1, seed=2, fine_factor=2)
        z = noise_models.kl_coefficients(2, fgrid.n_cells, 1)
        direct, _ = noise_models._kl_eval(z, fgrid.points, 1.0)
        err = float(np.abs(direct - fine).max())
        return err < 1e-10, f"transform vs direct sum: {err:.2e}"

    def fbm_half():
        cov = noise_models.fbm_covariance(0.5, np.array([0.3]), np.array([0.7]))
        err = float(abs(cov[0] - 0.3))
        return err < 1e-14, f"H=1/2 covariance error {err:.1e}"

    return [("bridge_refine", bridge), ("wong_zakai_trend", wong_zakai), ("kl_reference", kl_reference),
            ("fbm_half_covariance", fbm_half)]


def _suite_rde_solver() -> List[Check]:
    def gbm():
        grid = TimeGrid.uniform(1024)
        drv = noise_models.driver(noise_models.NoiseSpec("brownian_strat", seed=11), grid, paths=8)
        cp = rde_solver.solve_rde(models.gbm_field(), None, drv, 1.0)
        exact = np.exp(drv.values()[..., 0])
        err = float(np.median(np.abs(cp.values[..., 0] - exact).max(axis=-1)))
        return err < 0.05, f"median sup error {err:.2e}"

    def dsigma():
        gap = models.sine_field().check_dsigma(np.linspace(-3, 3, 10)[:, None])
        return gap < 1e-6, f"analytic vs finite-difference Jacobian {gap:.1e}"

    return [("gbm_closed_form", gbm), ("jacobian", dsigma)]


def _suite_policy() -> List[Check]:
    xs = np.linspace(-6, 6, 121)
    raw = pol.from_selector(xs, np.where(xs > 0, -1.0, 1.0), (-1, 1))
    smooth = pol.mollify(raw, 0.5)

    def lipschitz():
        ok, worst = pol.sampled_lipschitz_check(smooth)
        return ok, f"worst ratio {worst:.3f}, constant {smooth.certified_lipschitz:.3f}"

    def json_round_trip():
        back = pol.LipschitzPolicy.from_json(smooth.to_json())
        ok = np.array_equal(back.values, smooth.values)
        return ok, "round trip exact" if ok else "round trip changed values"

    return [("sampled_lipschitz", lipschitz), ("json_round_trip", json_round_trip)]


def _suite_hjb_solver() -> List[Check]:
    def constant():
        v = hjb_solver.solve_discounted(models.constant_cost_model(1.0, 0.5), 201, 11)
        err = float(np.abs(v.values - 2.0).max())
        return err < 1e-9, f"max |V - 2| = {err:.1e}"

    def residual():
        ms = models.symmetric_model()
        v = hjb_solver.solve_discounted(ms)
        r = hjb_solver.hjb_residual(v, ms)
        return r < 1e-6, f"residual {r:.2e}"

    return [("constant_cost", constant), ("residual", residual)]


def _suite_cost_eval() -> List[Check]:
    def constant():
        ms = models.constant_cost_model(1.0, 0.5)
        est = cost_eval.finite_horizon_cost(ms, noise_models.NoiseSpec("brownian_strat"), None, 0.0, 20,
                                            T=2.0, steps_per_unit=64)
        ok = abs(est.mean - 2.0) < 1e-12 and est.std_error < 1e-12
        return ok, f"mean {est.mean!r}, standard error {est.std_error:.1e}"

    return [("constant_cost", constant)]


def run_validate(cfg: ExperimentConfig, out: str, threads: int = 1) -> dict:
    """Run the selected self-test suites; the report lists every check by name."""
    vc = cfg["validate"]
    factories = {"rough_core": lambda: _suite_rough_core(vc["corrupt_chen"]),
                 "noise_models": _suite_noise_models, "rde_solver": _suite_rde_solver,
                 "policy": _suite_policy, "hjb_solver": _suite_hjb_solver, "cost_eval": _suite_cost_eval}
    results = []
    for suite in vc["suites"]:
        for name, fn in factories[suite]():
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing check is a failing check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append({"suite": suite, "check": name, "passed": bool(ok), "detail": detail})
    report = {"passed": all(r["passed"] for r in results), "checks": results,
              "failed": [f"{r['suite']}.{r['check']}" for r in results if not r["passed"]]}
    _sidecar(out, "validate.json", cfg, {"report": report})
    return report


RUNNERS = {
    "validate": run_validate,
    "lift": run_lift,
    "hjb-solve": run_hjb,
    "evaluate-cost": run_evaluate,
    "noise-convergence": run_noise_convergence,
    "robustness-sweep": run_robustness_sweep,
}
