"""Adjoint processes, Hamiltonian, the H-function and the grid check of the maximum condition."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import BackwardSolution, backward_sweep
from .forward import PathBundle
from .model import ModelSpec


@dataclass
class FirstOrderAdjoint:
    """p (n + 1, N, L), q (n, N, L, d), s (n, N, L, D)."""

    p: np.ndarray
    q: np.ndarray
    s: np.ndarray
    solution: BackwardSolution


@dataclass
class SecondOrderAdjoint:
    """P (n + 1, N, L, L), Q (n, N, L, L, d), S (n, N, L, L, D)."""

    P: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    solution: BackwardSolution


def hamiltonian(spec: ModelSpec, t, x, u, regime, p, q, s, intensities):
    """H = l + b.p + tr(sigma^T q) + sum_{m,n} gamma_{nm} s_{nm} lambda_{im}.

    Args:
        intensities: (N, D) jump intensities of the current regimes.
    """
    b, sg, g = spec.coefficients(t, x, u, regime)
    out = (b * p).sum(axis=1) + (sg * q).sum(axis=(1, 2)) + np.einsum("nlm,nlm,nm->n", g, s, intensities)
    if spec.running_cost is not None:
        out = out + spec.running_cost(t, x, u, regime)
    return out


class _StepCache:
    """Per-step derivative evaluations along the candidate trajectory."""

    def __init__(self, spec: ModelSpec, bundle: PathBundle, second: bool):
        self.spec = spec
        self.bundle = bundle
        self.second = second
        self.k = None
        self.vals = None

    def get(self, k):
        if self.k != k:
            b = self.bundle
            t = b.grid.times[k]
            x = b.x[k]
            r = b.regime[k].astype(np.int64)
            u = b.controls(k)
            sp = self.spec
            v = {
                "bx": sp.drift_x(t, x, u, r),
                "sx": sp.diffusion_x(t, x, u, r),
                "gx": sp.jump_x(t, x, u, r),
                "lx": sp.running_cost_x(t, x, u, r),
                "lam": b.generator.intensities[r],
            }
            if self.second:
                v["bxx"] = sp.drift_xx(t, x, u, r)
                v["sxx"] = sp.diffusion_xx(t, x, u, r)
                v["gxx"] = sp.jump_xx(t, x, u, r)
                v["lxx"] = sp.running_cost_xx(t, x, u, r)
            self.k, self.vals = k, v
        return self.vals


def hamiltonian_x(v, p, q, s):
    """H_x given cached derivatives, shape (N, L)."""
    return (v["lx"] + np.einsum("nlk,nl->nk", v["bx"], p) + np.einsum("nljk,nlj->nk", v["sx"], q)
            + np.einsum("nlmk,nlm,nm->nk", v["gx"], s, v["lam"]))


def hamiltonian_xx(v, p, q, s):
    """H_xx given cached derivatives, shape (N, L, L)."""
    return (v["lxx"] + np.einsum("nlab,nl->nab", v["bxx"], p) + np.einsum("nljab,nlj->nab", v["sxx"], q)
            + np.einsum("nlmab,nlm,nm->nab", v["gxx"], s, v["lam"]))


def solve_first_order_adjoint(spec: ModelSpec, bundle: PathBundle, degree: int = 3, picard: int = 1) -> FirstOrderAdjoint:
    """Backward equation dp = -H_x dt + q dW + s dPhiTilde, p(T) = h_x(x(T), alpha(T))."""
    spec.require("forward_cost")
    L = spec.state_dim
    cache = _StepCache(spec, bundle, second=False)

    def driver(k, y, z, kap):
        return hamiltonian_x(cache.get(k), y, z, kap)

    terminal = spec.terminal_cost_x(bundle.x[-1], bundle.regime[-1].astype(np.int64)).reshape(-1, L)
    sol = backward_sweep(bundle, terminal, driver, degree, picard)
    return FirstOrderAdjoint(sol.y, sol.z, sol.kappa, sol)


def _sym(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def second_order_driver(v, P, Q, S, Hxx):
    """Driver of the matrix adjoint equation for P (N, L, L), Q (N, L, L, d), S (N, L, L, D)."""
    bx, sx, gx, lam = v["bx"], v["sx"], v["gx"], v["lam"]
    out = P @ bx + np.swapaxes(bx, 1, 2) @ P + Hxx
    for j in range(sx.shape[2]):
        sj = sx[:, :, j, :]
        sjT = np.swapaxes(sj, 1, 2)
        out = out + sjT @ P @ sj + sjT @ Q[..., j] + Q[..., j] @ sj
    for m in range(gx.shape[2]):
        gm = gx[:, :, m, :]
        gmT = np.swapaxes(gm, 1, 2)
        Sm = S[..., m]
        term = gmT @ Sm + Sm @ gm + gmT @ (P + Sm) @ gm
        out = out + term * lam[:, m, None, None]
    return out


def solve_second_order_adjoint(spec: ModelSpec, bundle: PathBundle, first: FirstOrderAdjoint,
                               degree: int = 3, picard: int = 1) -> SecondOrderAdjoint:
    """Matrix backward equation for (P, Q, S) with terminal h_xx, symmetrised at every node."""
    spec.require("forward_cost")
    L = spec.state_dim
    N = bundle.n_paths
    cache = _StepCache(spec, bundle, second=True)
    hxx_cache = {}

    def driver(k, y, z, kap):
        v = cache.get(k)
        if k not in hxx_cache:
            hxx_cache.clear()
            hxx_cache[k] = hamiltonian_xx(v, first.p[k], first.q[k], first.s[k])
        P = y.reshape(N, L, L)
        Q = z.reshape(N, L, L, -1)
        S = kap.reshape(N, L, L, -1)
        return second_order_driver(v, P, Q, S, hxx_cache[k]).reshape(N, L * L)

    terminal = spec.terminal_cost_xx(bundle.x[-1], bundle.regime[-1].astype(np.int64)).reshape(N, L, L)
    terminal = _sym(terminal).reshape(N, L * L)
    project = lambda y: _sym(y.reshape(N, L, L)).reshape(N, L * L)
    sol = backward_sweep(bundle, terminal, driver, degree, picard, project=project)
    n = bundle.grid.n_steps
    P = sol.y.reshape(n + 1, N, L, L)
    Q = sol.z.reshape(n, N, L, L, -1)
    S = sol.kappa.reshape(n, N, L, L, -1)
    return SecondOrderAdjoint(P, Q, S, sol)


def quadratic_terms(P, S, sigma, gamma, intensities):
    """1/2 tr(sigma^T P sigma) + 1/2 sum_j gamma_j^T (P + S_j) gamma_j lambda_j for each row."""
    out = 0.5 * np.einsum("nlj,nlk,nkj->n", sigma, P, sigma)
    PS = P[..., None] + S
    out = out + 0.5 * np.einsum("nlm,nlkm,nkm,nm->n", gamma, PS, gamma, intensities)
    return out


def h_function(spec: ModelSpec, t, x, u, ubar, regime, p, q, s, P, S, intensities):
    """The H-function used in the maximum condition.

    H(u) - Q(sigma(ubar), gamma(ubar)) + Q(sigma(u) - sigma(ubar), gamma(u) - gamma(ubar)),
    with Q(a, c) = 1/2 tr(a^T P a) + 1/2 sum_j c_j^T (P + S_j) c_j lambda_j.
    """
    H = hamiltonian(spec, t, x, u, regime, p, q, s, intensities)
    _, sb, gb = spec.coefficients(t, x, ubar, regime)
    _, su, gu = spec.coefficients(t, x, u, regime)
    return H - quadratic_terms(P, S, sb, gb, intensities) + quadratic_terms(P, S, su - sb, gu - gb, intensities)


@dataclass
class MaximumConditionReport:
    fraction: float
    passed: bool
    tolerance: float
    rows: list
    gaps: np.ndarray
    argmin: np.ndarray
    cell_time: np.ndarray
    cell_path: np.ndarray

    header = ["time", "regime", "frac_pass", "worst_gap", "argmin_u"]


def sample_cells(n_steps: int, n_paths: int, per_time: int, seed: int):
    """(step, path) cells: per_time distinct paths at every node t_0..t_{n-1}."""
    g = np.random.default_rng(seed)
    m = min(per_time, n_paths)
    steps = np.repeat(np.arange(n_steps), m)
    paths = np.concatenate([g.choice(n_paths, m, replace=False) for _ in range(n_steps)])
    return steps, paths


def grid_check(values_bar: np.ndarray, values: np.ndarray, controls: np.ndarray, tolerance: float):
    """Pass flags, gaps and argmin controls for candidate values against grid values (C, K)."""
    best = values.min(axis=1)
    arg = np.argmin(values, axis=1)
    gap = values_bar - best
    return gap <= tolerance, gap, controls[arg]


def report_rows(times, regimes, steps, passed, gap, argmin, n_regimes):
    rows = []
    for k in np.unique(steps):
        for i in range(n_regimes):
            sel = (steps == k) & (regimes == i)
            if not sel.any():
                continue
            rows.append([float(times[k]), i + 1, float(passed[sel].mean()), float(gap[sel].max()),
                         float(np.median(argmin[sel, 0]))])
    return rows


def check_maximum_condition(
    spec: ModelSpec,
    bundle: PathBundle,
    first: FirstOrderAdjoint,
    second: SecondOrderAdjoint,
    controls=101,
    tolerance: float = 0.02,
    per_time: int = 100,
    seed: int = 0,
    threshold: float = 0.99,
) -> MaximumConditionReport:
    """Grid check that the candidate control minimises the H-function.

    Args:
        controls: (K, k) control grid, or an integer number of points per box axis.
        tolerance: allowed excess of H(ubar) over the grid minimum.
        per_time: sampled paths per grid node.
    """
    grid_u = spec.control_set.grid(controls) if np.ndim(controls) == 0 else np.asarray(controls, dtype=float)
    if grid_u.ndim == 1:
        grid_u = grid_u[:, None]
    if grid_u.shape[0] == 0:
        raise ValueError("empty control grid")
    n = bundle.grid.n_steps
    steps, paths = sample_cells(n, bundle.n_paths, per_time, seed)
    times = bundle.grid.times
    lam_all = bundle.generator.intensities
    K = grid_u.shape[0]
    C = steps.size
    t = times[steps]
    x = bundle.x[steps, paths]
    r = bundle.regime[steps, paths].astype(np.int64)
    ubar = np.empty((C, spec.control_dim))
    for k in np.unique(steps):
        sel = steps == k
        ubar[sel] = bundle.policy(times[k], x[sel], r[sel])
    lam = lam_all[r]
    p = first.p[steps, paths]
    q = first.q[steps, paths]
    s = first.s[steps, paths]
    P = second.P[steps, paths]
    S = second.S[steps, paths]
    hbar = h_function(spec, t, x, ubar, ubar, r, p, q, s, P, S, lam)
    vals = np.empty((C, K))
    chunk = max(1, 400000 // K)
    for lo in range(0, C, chunk):
        hi = min(C, lo + chunk)
        c = hi - lo
        rep = lambda a: np.repeat(a[lo:hi], K, axis=0)
        uu = np.tile(grid_u, (c, 1))
        vals[lo:hi] = h_function(spec, rep(t), rep(x), uu, rep(ubar), rep(r), rep(p), rep(q), rep(s),
                                 rep(P), rep(S), rep(lam)).reshape(c, K)
    ok, gap, arg = grid_check(hbar, vals, grid_u, tolerance)
    frac = float(ok.mean())
    rows = report_rows(times, r, steps, ok, gap, arg, spec.n_regimes)
    return MaximumConditionReport(frac, frac >= threshold, tolerance, rows, gap, arg, steps, paths)
