"""Full-scale acceptance suite: one pass/fail line per criterion, printed in the terminal summary.

Runtime is several minutes; select with `-m acceptance` or deselect with `-m "not acceptance"`.
"""
import csv
import json
import time

import numpy as np
import pytest
import yaml

from conftest import ACCEPTANCE_LINES
from regime_mp.bsde import random_linear_instance, verify_apriori_estimate
from regime_mp.chain import RegimeGenerator, sample_chain, sample_chains
from regime_mp.cli import COMMAND_FNS, run_command
from regime_mp.forward import PureJumpProcess, TestFunction, TimeGrid, build_drivers, quadratic_covariation, \
    simulate_forward, verify_ito_formula
from regime_mp.hjb import argmin_agreement, solve_hjb, verify_value_dominance
from regime_mp.maxprinciple import check_maximum_condition, solve_first_order_adjoint, solve_second_order_adjoint
from regime_mp.model import ControlSet, constant_policy
from regime_mp.models import example1, example2, expression_model
from regime_mp.recursive import estimate_recursive_rates
from regime_mp.rng import stream
from regime_mp.spike import estimate_rates

pytestmark = pytest.mark.acceptance

TWO = RegimeGenerator([[-1.0, 1.0], [2.0, -2.0]])
THREE = RegimeGenerator([[-1.5, 1.0, 0.5], [0.7, -1.0, 0.3], [0.2, 1.8, -2.0]])
EPS = [2.0**-k for k in range(3, 9)]
# 2 x the largest ratio over calibration seeds 1000-1019 (2000 paths, 50 steps), disjoint from the test seeds
K_TILDE = {1: 7.30, 2: 14.72}


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")


def read_checks(d):
    with open(d / "checks.csv", newline="") as fh:
        return {r["check"]: r for r in csv.DictReader(fh)}


def _cli_example(tmp_path, command, budget):
    t0 = time.perf_counter()
    code = run_command(command, out=str(tmp_path))
    wall = time.perf_counter() - t0
    checks = read_checks(tmp_path / command)
    parts = [f"{k}={float(v['value']):.3g}{'' if v['passed'] == 'true' else '(fail)'}" for k, v in checks.items()]
    ok = code == 0 and wall <= budget
    return ok, f"{', '.join(parts)}, runtime {wall:.0f}s (limit {budget}s)"


def test_criterion_1_first_example(tmp_path):
    ok, detail = _cli_example(tmp_path, "example1", 300)
    record(1, ok, "first closed-form example, 1e5 paths x 200 steps: " + detail)
    assert ok, detail


def test_criterion_2_recursive_example(tmp_path):
    ok, detail = _cli_example(tmp_path, "example2", 300)
    record(2, ok, "recursive closed-form example, 1e5 paths x 100 steps, 20 random policies: " + detail)
    assert ok, detail


def test_criterion_3_expansion_rates():
    t0 = time.perf_counter()
    spec = example1(sigma=(0.8, 0.6), beta=0.5)
    ch = sample_chains(TWO, 0, 1.0, 20000, seed=1)
    b = simulate_forward(spec, constant_policy(0.5, spec.control_set), ch, TimeGrid(1.0, 512), seed=3, x0=[0.3])
    fwd = estimate_rates(spec, b, 0.25, [1.0], EPS, vi=False)
    spec2 = example2(TWO, nu=(0.5, 1.0))
    b2 = simulate_forward(spec2, constant_policy(0.0, spec2.control_set), ch, TimeGrid(1.0, 512), seed=3)
    rec = estimate_recursive_rates(spec2, b2, 0.25, [1.0], EPS)
    wall = time.perf_counter() - t0
    parts, ok = [], wall <= 900
    for rep, names in ((fwd, ("state_gap", "first_variation", "second_variation", "first_remainder", "second_remainder")), (rec, ("perturbed_energy", "linearized_energy", "remainder_energy"))):
        for q in names:
            good = rep.within(q)
            ok = ok and good
            tag = "" if good else "(fail)"
            tag += " degraded" if rep.degraded[q] else ""
            parts.append(f"{q}={rep.slopes[q]:.2f}+-{rep.slope_se[q]:.2f}{tag}")
    record(3, ok, f"slopes {', '.join(parts)}, runtime {wall:.0f}s (limit 900s)")
    assert ok, parts


def _pure_jump_spec(gen, loads):
    D = gen.n_regimes
    consts = {f"g{j + 1}": [loads[i][j] for i in range(D)] for j in range(D)}
    return expression_model({"b": "0", "sigma": "0", "gamma": [f"g{j + 1}" for j in range(D)]}, D, consts,
                            generator=gen, control_set=ControlSet.box([0.0], [1.0]))


def test_criterion_4_martingale_and_ito():
    batch = sample_chains(THREE, 0, 1.0, 100000, seed=21)
    dr = build_drivers(batch, TimeGrid(1.0, 10), 1, seed=21)
    phi = sum(dr.dphi_tilde(k) for k in range(10))
    z = np.abs(phi.mean(axis=0)) / (phi.std(axis=0, ddof=1) / np.sqrt(phi.shape[0]))
    mart = bool(np.all(z <= 3))

    X1 = PureJumpProcess(0.3, np.array([[0, 0.5, -0.3], [0.2, 0, 0.7], [-0.4, 0.1, 0]]))
    X2 = PureJumpProcess(-1.0, np.array([[0, 1.0, 2.0], [-0.5, 0, 0.3], [0.6, 0.9, 0]]))
    cov = max(np.abs(quadratic_covariation(X1, X2, sample_chain(THREE, s % 3, 3.0, s), THREE,
                                           np.linspace(0, 3, 13)).residual).max() for s in range(20))

    a, c = np.array([1.0, -2.0, 0.5]), np.array([0.7, 1.3, -0.4])
    affine = TestFunction(value=lambda t, x, r: a[r] + c[r] * x[:, 0], dt=lambda t, x, r: np.zeros(x.shape[0]),
                          dx=lambda t, x, r: c[r][:, None], dxx=lambda t, x, r: np.zeros((x.shape[0], 1, 1)))
    spec = _pure_jump_spec(THREE, [[0, 0.5, -0.3], [0.2, 0, 0.7], [-0.4, 0.1, 0]])
    ch = sample_chains(THREE, 0, 1.0, 2000, seed=8)
    b = simulate_forward(spec, constant_policy(0.5, spec.control_set), ch, TimeGrid(1.0, 5), seed=1, x0=[0.3])
    ito_jump = float(np.abs(verify_ito_formula(affine, b).residuals[0]).max())

    w = np.array([1.0, -0.5])
    smooth = TestFunction(
        value=lambda t, x, r: w[r] * np.sin(x[:, 0]) * (1 + t), dt=lambda t, x, r: w[r] * np.sin(x[:, 0]),
        dx=lambda t, x, r: (w[r] * np.cos(x[:, 0]) * (1 + t))[:, None],
        dxx=lambda t, x, r: (-w[r] * np.sin(x[:, 0]) * (1 + t))[:, None, None])
    spec_d = example1(sigma=(0.8, 0.6), gamma=[[0, 0.5], [0.4, 0]], beta=0.5)
    ch2 = sample_chains(TWO, 0, 1.0, 4000, seed=2)
    bundles = [simulate_forward(spec_d, constant_policy(0.7, spec_d.control_set), ch2, TimeGrid(1.0, n), seed=5,
                                x0=[0.2]) for n in (16, 32, 64, 128)]
    slope = verify_ito_formula(smooth, bundles).slope

    ok = mart and cov <= 1e-10 and ito_jump <= 1e-10 and slope >= 0.4
    record(4, ok, f"compensated mean |z| max {z.max():.2f} (<= 3), covariation residual {cov:.1e}, "
                  f"pure-jump Ito residual {ito_jump:.1e} (<= 1e-10), diffusion Ito slope {slope:.2f} (>= 0.4)")
    assert ok


def test_criterion_5_apriori_estimate():
    worst = {1: 0.0, 2: 0.0}
    homog = 0.0
    for seed in range(20):
        inst = random_linear_instance(seed)
        sol = inst.solve()
        for k in (1, 2):
            r = verify_apriori_estimate(sol, inst.xi, inst.F, k)
            worst[k] = max(worst[k], r.ratio)
            if seed < 5:
                r2 = verify_apriori_estimate(inst.solve(7.5), 7.5 * inst.xi, 7.5 * inst.F, k)
                homog = max(homog, abs(r2.ratio / r.ratio - 1))
    ok = all(worst[k] <= K_TILDE[k] for k in (1, 2)) and homog <= 1e-6
    record(5, ok, f"max ratio k=1 {worst[1]:.2f} (<= {K_TILDE[1]}), k=2 {worst[2]:.2f} (<= {K_TILDE[2]}), "
                  f"homogeneity drift {homog:.1e} (<= 1e-6)")
    assert ok


def test_criterion_6_hjb_verification():
    g1 = RegimeGenerator([[0.0]])
    heat = expression_model({"b": "0", "sigma": "1", "gamma": ["0"], "l": "0", "h": "x^2"}, 1,
                            generator=g1, control_set=ControlSet.finite([[0.0]]))
    hv = solve_hjb(heat, g1, 0.5, -3.0, 3.0, 0.02, controls=1)
    inner = np.abs(hv.xs) <= 2.0
    heat_err = float(np.max(np.abs(hv.V[:, inner, 0] - (hv.xs[inner] ** 2 + 0.5 - hv.times[:, None]))))

    spec = example1(sigma=(1.0, 1.2), gamma=[[0.0, 0.5], [0.4, 0.0]])
    vg = solve_hjb(spec, TWO, 1.0, -4.0, 4.0, 0.02, controls=101)
    rng = stream(0, "policies")
    pols = {f"u_{k + 1}": constant_policy([u], spec.control_set) for k, u in enumerate(rng.uniform(0, 1, 20))}
    pols["optimal"] = vg.policy(spec.control_set)
    rep = verify_value_dominance(vg, spec, TWO, pols, n_paths=20000, n_steps=200, seed=0, optimal="optimal")

    ch = sample_chains(TWO, 0, 1.0, 10000, seed=31)
    bundle = simulate_forward(spec, vg.policy(spec.control_set), ch, TimeGrid(1.0, 200), seed=32, x0=[0.0])
    first = solve_first_order_adjoint(spec, bundle)
    second = solve_second_order_adjoint(spec, bundle, first)
    mp = check_maximum_condition(spec, bundle, first, second, controls=101, per_time=100, seed=33)
    agree = argmin_agreement(vg, bundle, mp.cell_time, mp.cell_path, mp.argmin)

    opt = next(r for r in rep.rows if r[0] == "optimal")
    ok = heat_err <= 5e-3 and rep.dominance_ok and rep.equality_ok and agree >= 0.95
    record(6, ok, f"heat max error {heat_err:.1e} (<= 5e-3), dominance over 20 policies "
                  f"{'ok' if rep.dominance_ok else 'violated'}, V0 {rep.V0:.4f} vs J(u*) {opt[1]:.4f} +- {opt[2]:.4f} "
                  f"{'ok' if rep.equality_ok else 'violated'}, argmin agreement {agree:.3f} (>= 0.95)")
    assert ok


SMALL = {
    "scenario": "determinism",
    "model": {"name": "example1", "sigma": [1.0, 0.8], "gamma": [[0.0, 0.3], [0.2, 0.0]]},
    "x0": 0.2, "horizon": 0.5, "steps": 20, "paths": 1500, "seed": 4,
    "policy": {"kind": "constant", "value": [0.5]},
    "checks": {"per_time": 10, "control_points": 21, "random_policies": 3, "dominance_paths": 500},
    "spike": {"eps": [0.125, 0.0625], "probes": [{"tau": 0.2, "v": [1.0]}]},
    "hjb": {"x_min": -2.0, "x_max": 2.0, "dx": 0.1, "mc_paths": 500, "mc_steps": 20, "argmin_paths": 300},
}
RECURSIVE = {"model": {"name": "example2", "nu": [0.5, 1.0]}, "policy": {"kind": "constant", "value": [0.0]}}
NEEDS_RECURSIVE = {"solve-bsde", "recursive", "example2"}


def _snapshot(d):
    out = {p.name: p.read_bytes() for p in sorted(d.glob("*.csv")) if p.is_file()}
    out["config.yaml"] = (d / "config.yaml").read_bytes()
    m = json.loads((d / "manifest.json").read_text())
    m.pop("wall_time")
    out["manifest"] = json.dumps(m, sort_keys=True)
    return out


def test_criterion_7_determinism(tmp_path):
    bad = []
    for command in COMMAND_FNS:
        doc = {**SMALL, **(RECURSIVE if command in NEEDS_RECURSIVE else {})}
        cfg = tmp_path / f"{command}.yaml"
        cfg.write_text(yaml.safe_dump(doc))
        snaps = []
        for k, w in enumerate((1, 1, 3)):
            out = tmp_path / f"{command}_{k}"
            run_command(command, str(cfg), workers=w, out=str(out))
            snaps.append(_snapshot(out / command))
        if not (snaps[0] == snaps[1] == snaps[2]):
            bad.append(command)
    ok = not bad
    record(7, ok, f"{len(COMMAND_FNS)} commands byte-identical over two runs and workers 1 vs 3"
           + ("" if ok else f"; differing: {', '.join(bad)}"))
    assert ok, bad
