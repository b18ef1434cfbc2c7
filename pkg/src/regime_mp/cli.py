"""Command-line entry point: configuration-driven experiments with CSV reports and JSON manifests."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
import yaml

from . import __version__
from .bsde import solve_bsde, solution_rows
from .chain import ChainBatch, export_chain_csv, sample_chains
from .config import ConfigError, ScenarioConfig, build_generator, build_model, build_policy, config_hash, \
    dump_config, load_config
from .forward import TimeGrid, resimulate, simulate_forward, summary_rows
from .hjb import StabilityError, argmin_agreement, default_window, solve_hjb, verify_value_dominance
from .maxprinciple import check_maximum_condition, solve_first_order_adjoint, solve_second_order_adjoint
from .model import ControlPolicy, constant_policy
from .models import example1, example2
from .recursive import ModelInconsistencyError, check_recursive_max_condition, duality_check, \
    estimate_recursive_rates, solve_recursive_adjoints
from .rng import stream
from .spike import SpikePerturbation, estimate_rates

WORKERS_ENV = "REGIME_MP_WORKERS"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2
DEGRADED_SE = 0.15


# ---------------------------------------------------------------- output helpers


def fmt(v) -> str:
    """CSV cell: floats by repr (round-trip exact, '.' decimal), booleans lower case."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def _json_value(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else repr(f)
    if isinstance(v, dict):
        return {k: _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_json_value(x) for x in v]
    return v


@dataclass
class Check:
    name: str
    value: float
    op: str
    threshold: float
    passed: bool
    degraded: bool = False
    se: float | None = None

    def as_dict(self) -> dict:
        return _json_value({"name": self.name, "value": self.value, "op": self.op, "threshold": self.threshold,
                            "passed": self.passed, "degraded": self.degraded, "se": self.se})


@dataclass
class Run:
    """Artifacts, metrics and checks collected by one command."""

    command: str
    cfg: ScenarioConfig
    out: Path
    workers: int
    strict: bool = False
    artifacts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)

    def csv(self, name: str, header, rows):
        write_csv(self.out / name, header, rows)
        self.artifacts.append(name)

    def check(self, name, value, op, threshold, degraded=False, se=None, passed=None):
        if passed is None:
            v = float(value)
            if op == "<=":
                passed = v <= threshold
            elif op == ">=":
                passed = v >= threshold
            else:
                lo, hi = threshold
                passed = lo <= v <= hi
        self.checks.append(Check(name, value, op, threshold, bool(passed), bool(degraded), se))

    @property
    def passed(self) -> bool:
        return all(c.passed and not (self.strict and c.degraded) for c in self.checks)

    def finish(self, wall: float) -> dict:
        self.csv("checks.csv", ["check", "value", "op", "threshold", "passed", "degraded", "se"],
                 [[c.name, c.value, c.op, _threshold_text(c.threshold), c.passed, c.degraded, c.se]
                  for c in self.checks])
        (self.out / "config.yaml").write_text(dump_config(self.cfg), encoding="utf-8")
        manifest = {
            "command": self.command,
            "scenario": self.cfg.scenario,
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.seed,
            "strict": self.strict,
            "versions": versions(),
            "metrics": _json_value(self.metrics),
            "checks": [c.as_dict() for c in self.checks],
            "passed": self.passed,
            "artifacts": sorted(self.artifacts + ["config.yaml"]),
            "wall_time": wall,
        }
        (self.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return manifest


def _threshold_text(t):
    if isinstance(t, tuple):
        return f"[{fmt(t[0])};{fmt(t[1])}]"
    return t


def versions() -> dict:
    return {"artifact": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "pydantic": pydantic.VERSION, "pyyaml": yaml.__version__}


# ---------------------------------------------------------------- shared setup


@dataclass
class Context:
    cfg: ScenarioConfig
    generator: object
    spec: object
    policy: ControlPolicy
    workers: int

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.cfg.horizon, self.cfg.steps)

    def chains(self, n_paths: int | None = None, seed_offset: int = 0) -> ChainBatch:
        c = self.cfg
        return sample_chains(self.generator, c.initial_regime - 1, c.horizon, n_paths or c.paths,
                             c.seed + seed_offset, self.workers)

    def bundle(self, policy: ControlPolicy | None = None, n_paths: int | None = None, running_cost=None):
        rc = self.spec.has_forward_cost if running_cost is None else running_cost
        return simulate_forward(self.spec, policy or self.policy, self.chains(n_paths), self.grid,
                                seed=self.cfg.seed, x0=np.full(self.spec.state_dim, self.cfg.x0), workers=self.workers, running_cost=rc)


def make_context(cfg: ScenarioConfig, workers: int, spec=None, policy=None) -> Context:
    g = build_generator(cfg)
    spec = spec or build_model(cfg, g)
    pol = policy or build_policy(cfg, spec.control_set)
    return Context(cfg, g, spec, pol, workers)


def _need(cond: bool, field_name: str, message: str):
    if not cond:
        raise ConfigError(field_name, message)


def _rms_dev(a: np.ndarray, target: float) -> float:
    """Largest cross-path RMS deviation over grid nodes."""
    a = np.asarray(a, dtype=float)
    sq = (a - target) ** 2
    sq = sq.reshape(sq.shape[0], sq.shape[1], -1).mean(axis=2)
    return float(np.sqrt(sq.mean(axis=1)).max())


def _adjoint_rows(times, comps: dict, D: int):
    header = ["time"]
    for name, a in comps.items():
        if a.ndim == 3:
            header += [f"mean_{name}_{j + 1}" for j in range(D)]
        else:
            header.append(f"mean_{name}")
    header.append("se_mean_p")
    rows = []
    for k, t in enumerate(times):
        row = [float(t)]
        for name, a in comps.items():
            if a.ndim == 3:
                row += [float(v) for v in a[k].mean(axis=0)] if k < a.shape[0] else [0.0] * D
            else:
                row.append(float(a[k].mean()) if k < a.shape[0] else 0.0)
        p = comps["p"][k]
        row.append(float(p.std(ddof=1) / np.sqrt(p.size)))
        rows.append(row)
    return header, rows


def _forward_adjoints(ctx: Context, bundle):
    deg, pic = ctx.cfg.regression.degree, ctx.cfg.regression.picard
    first = solve_first_order_adjoint(ctx.spec, bundle, deg, pic)
    second = solve_second_order_adjoint(ctx.spec, bundle, first, deg, pic)
    return first, second


def _scalar_forward(first, second) -> dict:
    return {"p": first.p[:, :, 0], "q": first.q[:, :, 0, 0], "s": first.s[:, :, 0, :],
            "P": second.P[:, :, 0, 0], "Q": second.Q[:, :, 0, 0, 0], "S": second.S[:, :, 0, 0, :]}


def _scalar_recursive(adj) -> dict:
    return {"p": adj.p, "q": adj.q, "s": adj.s, "P": adj.P, "Q": adj.Q, "S": adj.S}


def _random_constants(ctx: Context, count: int, purpose: str):
    g = stream(ctx.cfg.seed, purpose)
    pts = ctx.spec.control_set.sample(count, g)
    return {f"u_{i + 1}": constant_policy(pts[i], ctx.spec.control_set) for i in range(count)}, pts


def _mp_check(ctx: Context, bundle, recursive: bool, adjoints):
    c = ctx.cfg.checks
    kw = dict(controls=c.control_points, tolerance=c.mp_tolerance, per_time=c.per_time, seed=ctx.cfg.seed,
              threshold=c.mp_threshold)
    if recursive:
        return check_recursive_max_condition(ctx.spec, bundle, adjoints, **kw)
    return check_maximum_condition(ctx.spec, bundle, *adjoints, **kw)


# ---------------------------------------------------------------- commands


def cmd_simulate(run: Run):
    ctx = make_context(run.cfg, run.workers)
    bundle = ctx.bundle()
    run.csv("forward_summary.csv", *summary_rows(bundle))
    (run.out / "chain_path_1.csv").write_text(export_chain_csv(bundle.drivers.chains.path(0)), encoding="utf-8")
    run.artifacts.append("chain_path_1.csv")
    comp = sum(bundle.drivers.dphi_tilde(k) for k in range(bundle.grid.n_steps))
    rows = []
    for j in range(comp.shape[1]):
        m = float(comp[:, j].mean())
        se = float(comp[:, j].std(ddof=1) / np.sqrt(comp.shape[0]))
        ok = abs(m) <= 3 * se + 1e-12
        rows.append([j + 1, m, se, ok])
        run.check(f"compensated_martingale_{j + 1}", abs(m), "<=", 3 * se + 1e-12, se=se, passed=ok)
    run.csv("martingale.csv", ["regime", "mean_compensated_T", "se", "passed"], rows)
    nfail = int(bundle.failed.sum())
    run.metrics["failed_paths"] = nfail
    run.check("failed_paths", nfail, "<=", 0)
    if bundle.running is not None:
        c = bundle.cost_samples()
        J, se = float(c.mean()), float(c.std(ddof=1) / np.sqrt(c.size))
        run.metrics.update(J=J, J_se=se)
        run.csv("cost.csv", ["J", "J_se"], [[J, se]])


def cmd_solve_bsde(run: Run):
    ctx = make_context(run.cfg, run.workers)
    _need(ctx.spec.has_recursive, "model", "model has no recursive generator (f, g)")
    bundle = ctx.bundle(running_cost=False)
    sol = solve_bsde(ctx.spec, bundle, run.cfg.regression.degree, run.cfg.regression.picard)
    run.csv("bsde_solution.csv", *solution_rows(sol))
    y0, se = float(sol.y0[0]), float(sol.y0_se[0])
    run.metrics.update(y0=y0, y0_se=se)
    run.csv("cost.csv", ["J", "J_se"], [[y0, se]])
    finite = bool(np.isfinite(sol.y).all() and np.isfinite(sol.z).all() and np.isfinite(sol.kappa).all())
    run.check("solution_finite", float(finite), ">=", 1.0)


def _adjoints_for(ctx: Context, bundle):
    if ctx.spec.has_forward_cost:
        first, second = _forward_adjoints(ctx, bundle)
        return False, (first, second), _scalar_forward(first, second)
    _need(ctx.spec.has_recursive, "model", "model has neither a forward cost nor a recursive generator")
    _need(ctx.spec.state_dim == 1 and ctx.spec.noise_dim == 1, "model", "recursive adjoints need L = d = 1")
    adj = solve_recursive_adjoints(ctx.spec, bundle, ctx.cfg.regression.degree, ctx.cfg.regression.picard)
    return True, adj, _scalar_recursive(adj)


def cmd_adjoints(run: Run):
    ctx = make_context(run.cfg, run.workers)
    _need(ctx.spec.state_dim == 1, "model", "adjoint export supports scalar state only")
    bundle = ctx.bundle(running_cost=False)
    recursive, _, comps = _adjoints_for(ctx, bundle)
    run.metrics["adjoint_kind"] = "recursive" if recursive else "forward"
    run.csv("adjoints.csv", *_adjoint_rows(bundle.grid.times, comps, ctx.generator.n_regimes))
    finite = all(np.isfinite(a).all() for a in comps.values())
    run.check("adjoints_finite", float(finite), ">=", 1.0)
    for name, target in (run.cfg.checks.adjoint_targets or {}).items():
        dev = _rms_dev(comps[name], target)
        run.metrics[f"{name}_deviation"] = dev
        run.check(f"{name}_deviation", dev, "<=", run.cfg.checks.adjoint_tolerance)


def cmd_check_mp(run: Run):
    ctx = make_context(run.cfg, run.workers)
    bundle = ctx.bundle(running_cost=False)
    recursive, adj, _ = _adjoints_for(ctx, bundle)
    rep = _mp_check(ctx, bundle, recursive, adj)
    run.csv("mp_check.csv", rep.header, rep.rows)
    run.metrics["mp_fraction"] = rep.fraction
    run.check("mp_fraction", rep.fraction, ">=", run.cfg.checks.mp_threshold)


def _rate_rows(rows, i, probe):
    return [[i + 1, probe.tau, probe.v[0], *r] for r in rows]


def _rate_checks(run: Run, rep, label: str):
    for q, (lo, hi) in rep.windows.items():
        if q not in rep.slopes:
            continue
        s, se = rep.slopes[q], rep.slope_se[q]
        run.metrics[f"{label}{q}_slope"] = s
        op = ">=" if not math.isfinite(hi) else "in"
        thr = lo if op == ">=" else (lo, hi)
        run.check(f"{label}{q}_slope", s, op, thr, degraded=se > DEGRADED_SE, se=se,
                  passed=bool(math.isfinite(s) and lo <= s <= hi))


def cmd_rates(run: Run):
    ctx = make_context(run.cfg, run.workers)
    _need(ctx.spec.has_forward_cost, "model", "expansion rates need a model with running and terminal cost")
    bundle = ctx.bundle(running_cost=False)
    sc = run.cfg.spike
    rows = []
    first = second = None
    for i, probe in enumerate(sc.probes):
        SpikePerturbation(probe.tau, min(sc.eps), probe.v).validate(run.cfg.horizon, ctx.spec.control_set)
        rep = estimate_rates(ctx.spec, bundle, probe.tau, probe.v, sc.eps, vi=True)
        rows += _rate_rows(rep.rows(), i, probe)
        _rate_checks(run, rep, f"probe{i + 1}_")
        if run.cfg.checks.variational_inequality and rep.vi is not None:
            worst = float(np.min(rep.vi + 3 * rep.vi_se))
            run.check(f"probe{i + 1}_vi", worst, ">=", -run.cfg.checks.vi_tolerance)
    run.csv("rates.csv", ["probe", "tau", "v"] + list(rep.header), rows)


def cmd_recursive(run: Run):
    ctx = make_context(run.cfg, run.workers)
    _need(ctx.spec.has_recursive, "model", "model has no recursive generator (f, g)")
    _need(ctx.spec.state_dim == 1 and ctx.spec.noise_dim == 1, "model", "recursive adjoints need L = d = 1")
    bundle = ctx.bundle(running_cost=False)
    deg = run.cfg.regression.degree
    adj = solve_recursive_adjoints(ctx.spec, bundle, deg, run.cfg.regression.picard)
    run.csv("adjoints.csv", *_adjoint_rows(bundle.grid.times, _scalar_recursive(adj), ctx.generator.n_regimes))
    rep = _mp_check(ctx, bundle, True, adj)
    run.csv("mp_check.csv", rep.header, rep.rows)
    run.metrics["mp_fraction"] = rep.fraction
    run.check("mp_fraction", rep.fraction, ">=", run.cfg.checks.mp_threshold)
    sc = run.cfg.spike
    drows, rrows = [], []
    for i, probe in enumerate(sc.probes):
        sp = SpikePerturbation(probe.tau, max(sc.eps), probe.v)
        sp.validate(run.cfg.horizon, ctx.spec.control_set)
        d = duality_check(ctx.spec, bundle, adj, sp, deg)
        drows.append([i + 1, *d.row(), d.normalized_gap()])
        run.check(f"probe{i + 1}_duality_gap", d.normalized_gap(), "<=", run.cfg.checks.duality_tolerance,
                  se=d.chi_se / d.eps)
        if sc.rates:
            rr = estimate_recursive_rates(ctx.spec, bundle, probe.tau, probe.v, sc.eps, adj, deg)
            rrows += _rate_rows(rr.rows(), i, probe)
            _rate_checks(run, rr, f"probe{i + 1}_")
    run.csv("duality.csv", ["probe"] + list(d.header) + ["normalized_gap"], drows)
    if sc.rates:
        run.csv("recursive_rates.csv", ["probe", "tau", "v"] + list(rr.header), rrows)


def _hjb_window(ctx: Context):
    h = ctx.cfg.hjb
    if h.x_min is not None:
        return h.x_min, h.x_max
    U = ctx.spec.control_set.grid(ctx.cfg.checks.control_points)
    n = U.shape[0]
    smax = 0.0
    x = np.full((n, 1), ctx.cfg.x0)
    for i in range(ctx.generator.n_regimes):
        s = ctx.spec.diffusion(0.0, x, U, np.full(n, i))
        g = ctx.spec.jump(0.0, x, U, np.full(n, i))
        smax = max(smax, float(np.abs(s).max()), float(np.abs(g).max()))
    return default_window(ctx.cfg.x0, max(smax, 1e-3), ctx.cfg.horizon)


def cmd_hjb(run: Run):
    ctx = make_context(run.cfg, run.workers)
    sp = ctx.spec
    _need(sp.has_forward_cost, "model", "HJB needs a model with running and terminal cost")
    _need(sp.state_dim == 1 and sp.noise_dim == 1 and sp.control_dim == 1, "model", "HJB solver is scalar")
    h = run.cfg.hjb
    lo, hi = _hjb_window(ctx)
    vg = solve_hjb(sp, ctx.generator, run.cfg.horizon, lo, hi, h.dx, run.cfg.checks.control_points,
                   h.n_steps, h.boundary)
    every = max(1, (len(vg.times) - 1) // 50)
    run.csv("value_grid.csv", vg.header, vg.rows(every))
    run.metrics.update(n_steps=len(vg.times) - 1, x_min=lo, x_max=hi, extrapolated=vg.extrapolated)
    run.check("monotone_scheme", float(vg.monotone), ">=", 1.0)
    pols, _ = _random_constants(ctx, run.cfg.checks.random_policies, "policies")
    pols["hjb_optimal"] = vg.policy(sp.control_set)
    rep = verify_value_dominance(vg, sp, ctx.generator, pols, x0=run.cfg.x0, regime0=run.cfg.initial_regime - 1,
                                 n_paths=h.mc_paths, n_steps=h.mc_steps, seed=run.cfg.seed, tolerance=h.tolerance,
                                 optimal="hjb_optimal")
    run.csv("dominance.csv", rep.header, rep.rows)
    run.metrics["V0"] = rep.V0
    worst = min(r[1] + 3 * r[2] + h.tolerance - r[3] for r in rep.rows)
    run.check("dominance", worst, ">=", 0.0, degraded=vg.extrapolated, passed=rep.dominance_ok)
    opt = [r for r in rep.rows if r[0] == "hjb_optimal"][0]
    run.check("equality_optimal", abs(opt[1] - opt[3]), "<=", 3 * opt[2] + h.tolerance, se=opt[2],
              degraded=vg.extrapolated, passed=rep.equality_ok)
    if h.argmin_check:
        bundle = ctx.bundle(vg.policy(sp.control_set), n_paths=h.argmin_paths, running_cost=False)
        adj = _forward_adjoints(ctx, bundle)
        mp = _mp_check(ctx, bundle, False, adj)
        frac = argmin_agreement(vg, bundle, mp.cell_time, mp.cell_path, mp.argmin)
        run.metrics["argmin_agreement"] = frac
        run.check("hjb_mp_argmin_agreement", frac, ">=", h.argmin_threshold)


def example1_config(cfg: ScenarioConfig | None) -> ScenarioConfig:
    if cfg is None:
        return ScenarioConfig(scenario="example1", paths=100000, steps=200)
    return cfg


def cmd_example1(run: Run):
    cfg = run.cfg
    g = build_generator(cfg)
    spec = example1(sigma=[1.0] * g.n_regimes, control_set=cfg.control_set.build())
    ctx = make_context(cfg, run.workers, spec=spec, policy=constant_policy(1.0, spec.control_set))
    bundle = ctx.bundle(running_cost=False)
    first, second = _forward_adjoints(ctx, bundle)
    comps = _scalar_forward(first, second)
    run.csv("adjoints.csv", *_adjoint_rows(bundle.grid.times, comps, g.n_regimes))
    w = bundle.x[:, :, 0] - cfg.x0
    q_dev = _rms_dev(comps["q"], 1.0)
    p_rmse = float(np.sqrt(np.mean((comps["p"] - w) ** 2)))
    P_dev = float(np.abs(comps["P"] - 1).max() + np.abs(comps["Q"]).max() + np.abs(comps["S"]).max())
    rep = _mp_check(ctx, bundle, False, (first, second))
    run.csv("mp_check.csv", rep.header, rep.rows)
    run.metrics.update(q_deviation=q_dev, p_rmse=p_rmse, P_deviation=P_dev, mp_fraction=rep.fraction)
    run.check("q_deviation", q_dev, "<=", 0.05)
    run.check("p_rmse", p_rmse, "<=", 0.05)
    run.check("second_order_deviation", P_dev, "<=", run.cfg.checks.adjoint_tolerance)
    run.check("mp_fraction", rep.fraction, ">=", run.cfg.checks.mp_threshold)


def example2_config(cfg: ScenarioConfig | None) -> ScenarioConfig:
    if cfg is None:
        return ScenarioConfig(scenario="example2", paths=100000, steps=100)
    return cfg


def cmd_example2(run: Run):
    cfg = run.cfg
    g = build_generator(cfg)
    spec = example2(g, nu=cfg.model.nu, control_set=cfg.control_set.build())
    ctx = make_context(cfg, run.workers, spec=spec, policy=constant_policy(0.0, spec.control_set))
    bundle = ctx.bundle(running_cost=False)
    deg = cfg.regression.degree
    adj = solve_recursive_adjoints(spec, bundle, deg, cfg.regression.picard)
    run.csv("adjoints.csv", *_adjoint_rows(bundle.grid.times, _scalar_recursive(adj), g.n_regimes))
    dev = adj.deviation(p=1.0)
    tol = cfg.checks.adjoint_tolerance
    for k, v in dev.items():
        run.metrics[f"{k}_deviation"] = v
        run.check(f"{k}_deviation", v, "<=", tol)
    rep = _mp_check(ctx, bundle, True, adj)
    run.csv("mp_check.csv", rep.header, rep.rows)
    run.metrics["mp_fraction"] = rep.fraction
    run.check("mp_fraction", rep.fraction, ">=", cfg.checks.mp_threshold)
    n_dom = cfg.checks.dominance_paths or bundle.n_paths
    base = bundle if n_dom == bundle.n_paths else ctx.bundle(n_paths=n_dom, running_cost=False)
    sol0 = adj.base if base is bundle else solve_bsde(spec, base, deg)
    J0 = float(sol0.y0[0])
    pols, pts = _random_constants(ctx, cfg.checks.random_policies, "policies")
    rows = [["u_0", 0.0, J0, float(sol0.y0_se[0]), 0.0, False]]
    dominated = 0
    for (name, pol), u in zip(pols.items(), pts):
        sol = solve_bsde(spec, resimulate(base, pol), deg)
        J = float(sol.y0[0])
        diff = sol.pathwise[:, 0] - sol0.pathwise[:, 0]
        se = float(diff.std(ddof=1) / np.sqrt(diff.size))
        dom = J < J0 - 3 * se
        dominated += int(dom)
        rows.append([name, float(u[0]), J, float(sol.y0_se[0]), se, dom])
    run.csv("cost_dominance.csv", ["policy", "u", "J", "J_se", "diff_se", "dominates_zero"], rows)
    run.metrics["J0"] = J0
    run.check("zero_policy_dominated", dominated, "<=", 0)


def report_tables(run_dir: str | Path):
    """Merge all manifests below run_dir into summary.csv / summary.json rows keyed by (scenario, check).

    Directories with CSV reports but no manifest are listed as absent; manifests
    that cannot be parsed are listed as unreadable.
    """
    root = Path(run_dir)
    rows = []
    dirs = sorted({p.parent for p in root.rglob("*.csv") if p.name not in ("summary.csv",)} |
                  {p.parent for p in root.rglob(MANIFEST)})
    for d in dirs:
        rel = str(d.relative_to(root)) or "."
        mf = d / MANIFEST
        if not mf.exists():
            rows.append([rel, "", "", "", "", "", "absent"])
            continue
        try:
            m = json.loads(mf.read_text(encoding="utf-8"))
            checks = m["checks"]
            scen, cmd = m["scenario"], m["command"]
            for c in checks:
                rows.append([rel, scen, cmd, c["name"], c["value"], c["passed"],
                             "degraded" if c.get("degraded") else "ok"])
        except (OSError, ValueError, KeyError, TypeError):
            rows.append([rel, "", "", "", "", "", "unreadable"])
    header = ["run", "scenario", "command", "check", "value", "passed", "status"]
    return header, rows


def cmd_report(run_dir: Path) -> int:
    header, rows = report_tables(run_dir)
    write_csv(run_dir / "summary.csv", header, rows)
    (run_dir / "summary.json").write_text(
        json.dumps([dict(zip(header, _json_value(r))) for r in rows], indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


COMMAND_FNS = {
    "simulate": cmd_simulate,
    "solve-bsde": cmd_solve_bsde,
    "adjoints": cmd_adjoints,
    "check-mp": cmd_check_mp,
    "rates": cmd_rates,
    "recursive": cmd_recursive,
    "hjb": cmd_hjb,
    "example1": cmd_example1,
    "example2": cmd_example2,
}


# ---------------------------------------------------------------- entry point


def _error(kind: str, message: str, field_name: str | None = None) -> None:
    payload = {"error": kind, "message": message}
    if field_name is not None:
        payload["field"] = field_name
    sys.stderr.write(json.dumps(payload) + "\n")


def _workers(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(WORKERS_ENV, f"not an integer: {env!r}") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="regime-mp", description="Regime-switching control experiments.")
    p.add_argument("command", choices=list(COMMAND_FNS) + ["report"])
    p.add_argument("--config", help="scenario YAML (optional for example1/example2)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help=f"worker cap (default ${WORKERS_ENV} or 1)")
    p.add_argument("--out", help="output directory (report: directory to summarise)")
    p.add_argument("--strict", action="store_true", help="treat degraded-confidence flags as failures")
    return p


def run_command(command: str, config: str | None = None, seed: int | None = None, workers: int | None = None,
                out: str | None = None, strict: bool = False) -> int:
    """Run one command; returns the exit status (0 pass, 1 check failure, 2 config error)."""
    try:
        if command == "report":
            _need(out is not None, "--out", "report needs the run directory via --out")
            d = Path(out)
            d.mkdir(parents=True, exist_ok=True)
            return cmd_report(d)
        if config is None and command not in ("example1", "example2"):
            raise ConfigError("--config", f"command {command!r} needs a config file")
        cfg = load_config(config) if config is not None else None
        if command == "example1":
            cfg = example1_config(cfg)
        elif command == "example2":
            cfg = example2_config(cfg)
        if seed is not None:
            if seed < 0:
                raise ConfigError("--seed", "must be non-negative")
            cfg = cfg.model_copy(update={"seed": seed})
        nw = _workers(workers)
        dest = Path(out if out is not None else cfg.output) / command
        dest.mkdir(parents=True, exist_ok=True)
        run = Run(command, cfg, dest, nw, strict)
        t0 = time.perf_counter()
        with np.errstate(over="ignore", invalid="ignore"):
            COMMAND_FNS[command](run)
        run.finish(time.perf_counter() - t0)
        if not run.passed:
            failed = [c.name for c in run.checks if not c.passed or (strict and c.degraded)]
            _error("check_failed", f"checks failed: {', '.join(failed)}")
            return EXIT_CHECK
        return EXIT_OK
    except (ConfigError, StabilityError, ModelInconsistencyError) as exc:
        fld = getattr(exc, "field", None)
        msg = getattr(exc, "message", str(exc))
        _error("config_error", msg, fld)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as machine-readable error
        _error("runtime_error", f"{type(exc).__name__}: {exc}")
        return EXIT_CHECK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run_command(args.command, args.config, args.seed, args.workers, args.out, args.strict)


if __name__ == "__main__":
    sys.exit(main())
