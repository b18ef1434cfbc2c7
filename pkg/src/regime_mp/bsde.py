"""Backward regression Monte Carlo for BSDEs driven by W and the compensated chain."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .chain import RegimeGenerator, sample_chains
from .forward import PathBundle, TimeGrid, simulate_forward
from .model import constant_policy
from .models import example1
from .regression import joint_projection
from .rng import stream

Driver = Callable[[int, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass
class BackwardSolution:
    """Regression solution on a bundle.

    y (n + 1, N, m), z (n, N, m, d), kappa (n, N, m, D); kappa_j is zero where
    the chain cannot jump to j from the current regime.
    """

    bundle: PathBundle
    y: np.ndarray
    z: np.ndarray
    kappa: np.ndarray
    degree: int
    ridge_steps: list = field(default_factory=list)
    basis_log: dict = field(default_factory=dict)
    pathwise: Optional[np.ndarray] = None
    source: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        return self.bundle.grid.times

    @property
    def y0(self) -> np.ndarray:
        return self.y[0].mean(axis=0)

    @property
    def y0_se(self) -> np.ndarray:
        """Standard error from the pathwise martingale-corrected cost estimator."""
        if self.pathwise is None:
            return np.full(self.y.shape[2], np.nan)
        n = self.pathwise.shape[0]
        return self.pathwise.std(axis=0, ddof=1) / np.sqrt(n)


def backward_sweep(
    bundle: PathBundle,
    terminal: np.ndarray,
    driver: Driver,
    degree: int = 3,
    picard: int = 1,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    state: Optional[Callable[[int], np.ndarray]] = None,
) -> BackwardSolution:
    """Backward Euler sweep with joint regression per regime.

    At each step the target y_{n+1} is regressed, per regime, on the
    polynomial basis of the state and on the basis multiplied by dW and by
    the admissible dPhiTilde columns. The three coefficient blocks give the
    conditional mean and the z, kappa estimates. Then
    y_n = E[y_{n+1}] + f(y, z, kappa) dt with the predictor y = E[y_{n+1}]
    followed by `picard` corrections.

    Args:
        bundle: forward paths.
        terminal: (N,) or (N, m) terminal values.
        driver: callable (n, y (N, m), z (N, m, d), kappa (N, m, D)) -> (N, m).
        degree: polynomial degree of the basis.
        picard: number of corrections of the y argument.
        project: optional map applied to y_n (e.g. symmetrisation).
        state: optional map n -> regression state (default the bundle state).
    """
    if bundle.flagged:
        raise ValueError("bundle contains aborted paths; backward solve refused")
    dr = bundle.drivers
    grid = bundle.grid
    n, N = grid.n_steps, bundle.n_paths
    dt = grid.dt
    d = dr.dW.shape[2]
    D = dr.generator.n_regimes
    lam = dr.generator.intensities
    term = np.asarray(terminal, dtype=float)
    if term.ndim == 1:
        term = term[:, None]
    if term.shape[0] != N:
        raise ValueError("terminal values must have one row per path")
    m = term.shape[1]
    y = np.empty((n + 1, N, m))
    z = np.zeros((n, N, m, d))
    kap = np.zeros((n, N, m, D))
    y[n] = term
    acc = np.zeros((N, m))
    src = np.empty((n, N, m))
    ridge, blog = [], {}
    for k in range(n - 1, -1, -1):
        xs = bundle.x[k] if state is None else state(k)
        reg = dr.regime[k]
        dpt = dr.dphi_tilde(k)
        cond = np.empty((N, m))
        for i in np.unique(reg):
            rows = np.flatnonzero(reg == i)
            targets = np.flatnonzero(lam[i] > 0)
            c, zz, kk, flag, basis = joint_projection(xs[rows], dr.dW[k][rows], dpt[rows][:, targets], y[k + 1][rows],
                                                      degree, dr.jumps[k][rows][:, targets])
            cond[rows] = c
            z[k, rows] = zz
            if targets.size:
                kap[k][np.ix_(rows, np.arange(m), targets)] = kk
            if flag:
                ridge.append((k, int(i)))
            if k == 0 or k == n - 1:
                blog[(k, int(i))] = basis.describe()
        yk = cond
        f = driver(k, yk, z[k], kap[k])
        for _ in range(picard):
            yk = cond + f * dt
            f = driver(k, yk, z[k], kap[k])
        yk = cond + f * dt
        if project is not None:
            yk = project(yk)
        y[k] = yk
        src[k] = f
        acc += f * dt - np.einsum("nmd,nd->nm", z[k], dr.dW[k]) - np.einsum("nmj,nj->nm", kap[k], dpt)
    return BackwardSolution(bundle, y, z, kap, degree, ridge, blog, term + acc, src)


def solve_bsde(spec, bundle: PathBundle, degree: int = 3, picard: int = 1) -> BackwardSolution:
    """Solve the recursive-utility BSDE with generator f and terminal g(x(T), alpha(T))."""
    spec.require("recursive")
    times = bundle.grid.times
    reg_all = bundle.regime

    def driver(k, y, z, kap):
        r = reg_all[k].astype(np.int64)
        u = bundle.controls(k)
        return spec.generator(times[k], bundle.x[k], y[:, 0], z[:, 0], kap[:, 0], u, r)[:, None]

    terminal = spec.terminal_value(bundle.x[-1], reg_all[-1].astype(np.int64))
    return backward_sweep(bundle, terminal, driver, degree, picard)


def _coef(c, k, shape):
    if callable(c):
        c = c(k)
    a = np.asarray(c, dtype=float)
    if a.ndim == len(shape) + 1:
        a = a[k]
    return np.broadcast_to(a, shape)


def solve_linear_bsde(bundle: PathBundle, terminal, A=0.0, B=0.0, C=0.0, F=0.0,
                      degree: int = 3, picard: int = 1) -> BackwardSolution:
    """Scalar linear BSDE with driver A y + B . z + C . kappa + F.

    Coefficients may be scalars, arrays indexed by step (n, N, ...) or callables
    k -> array; shapes per step: A (N,), B (N, d), C (N, D), F (N,).
    """
    N = bundle.n_paths
    d = bundle.drivers.dW.shape[2]
    D = bundle.generator.n_regimes

    def driver(k, y, z, kap):
        a = _coef(A, k, (N,))
        b = _coef(B, k, (N, d))
        c = _coef(C, k, (N, D))
        f = _coef(F, k, (N,))
        return (a * y[:, 0] + (b * z[:, 0]).sum(axis=1) + (c * kap[:, 0]).sum(axis=1) + f)[:, None]

    term = np.broadcast_to(np.asarray(terminal, dtype=float), (N,))
    return backward_sweep(bundle, term, driver, degree, picard)


def recursive_cost(solution: BackwardSolution):
    """J = y(t0) with its Monte Carlo standard error."""
    return float(solution.y0[0]), float(solution.y0_se[0])


@dataclass
class AprioriResult:
    lhs: float
    rhs: float
    ratio: float


def verify_apriori_estimate(solution: BackwardSolution, xi, F, k: int = 1, weighted: bool = True) -> AprioriResult:
    """Empirical sides of the 2k-th moment a-priori estimate for a linear BSDE.

    lhs = sup_n E|y_n|^{2k} + E sum_n w_n (|z_n|^2 + sum_j |kappa_j|^2 lambda_j) dt with
    w_n = |y_n|^{2k-2} when weighted (equal to 1 for k = 1);
    rhs = E|xi|^{2k} + (sum_n (E|F_n|^{2k})^{1/(2k)} dt)^{2k}.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    b = solution.bundle
    dt = b.grid.dt
    n = b.grid.n_steps
    N = b.n_paths
    lam = b.generator.intensities
    y = solution.y[:, :, 0]
    p = 2 * k
    sup_y = float(np.max(np.mean(np.abs(y) ** p, axis=1)))
    zz = (solution.z[:, :, 0, :] ** 2).sum(axis=2)
    kk = (solution.kappa[:, :, 0, :] ** 2 * lam[b.regime[:-1].astype(np.int64)]).sum(axis=2)
    w = np.abs(y[:-1]) ** (p - 2) if weighted else 1.0
    integral = float(np.mean(np.sum(w * (zz + kk), axis=0) * dt))
    lhs = sup_y + integral
    xi = np.broadcast_to(np.asarray(xi, dtype=float), (N,))
    Fa = np.broadcast_to(np.asarray(F, dtype=float), (n, N)) if np.ndim(F) != 0 else np.full((n, N), float(F))
    rhs = float(np.mean(np.abs(xi) ** p)) + float(np.sum(np.mean(np.abs(Fa) ** p, axis=1) ** (1.0 / p)) * dt) ** p
    ratio = lhs / rhs if rhs > 0 else (1.0 if lhs == 0 else np.inf)
    return AprioriResult(lhs, rhs, ratio)


def solution_rows(solution: BackwardSolution):
    """Per-node means of y, z (first noise) and kappa_j with the SE of mean y."""
    D = solution.kappa.shape[3]
    n = solution.y.shape[0] - 1
    rows = []
    for k, t in enumerate(solution.times):
        yk = solution.y[k][:, 0]
        se = float(yk.std(ddof=1) / np.sqrt(yk.size)) if yk.size > 1 else 0.0
        if k < n:
            mz = float(solution.z[k][:, 0, 0].mean())
            mk = [float(v) for v in solution.kappa[k][:, 0, :].mean(axis=0)]
        else:
            mz, mk = 0.0, [0.0] * D
        rows.append([float(t), float(yk.mean()), mz, *mk, se])
    header = ["time", "mean_y", "mean_z"] + [f"mean_kappa_{j + 1}" for j in range(D)] + ["se_mean_y"]
    return header, rows


@dataclass
class LinearInstance:
    """Random linear BSDE on Brownian paths: driver A y + B z + C . kappa + F, terminal xi."""

    bundle: PathBundle
    xi: np.ndarray
    F: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def solve(self, scale: float = 1.0, degree: int = 3) -> BackwardSolution:
        r = self.bundle.regime[:-1].astype(np.int64)
        return solve_linear_bsde(self.bundle, scale * self.xi, self.A[r], self.B[r][..., None], self.C[r],
                                 scale * self.F, degree)


def random_linear_instance(seed: int, n_paths: int = 2000, n_steps: int = 50, horizon: float = 1.0,
                           bound: float = 1.0) -> LinearInstance:
    """Regime-dependent coefficients with |A|, |B|, |C| <= bound; x is a Brownian motion.

    xi = a + b sin(x(T)) and F = c + e cos(x(t)) with regime-dependent a, b, c, e.
    """
    g = stream(seed, "instances")
    D = int(g.integers(2, 4))
    Q = g.uniform(0.5, 2.0, (D, D))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    gen = RegimeGenerator(Q)
    A = g.uniform(-bound, bound, D)
    B = g.uniform(-bound, bound, D)
    C = g.uniform(-bound, bound, (D, D))
    np.fill_diagonal(C, 0.0)
    a, b, c, e = (g.uniform(-1.0, 1.0, D) for _ in range(4))
    spec = example1(sigma=np.ones(D))
    chains = sample_chains(gen, int(g.integers(0, D)), horizon, n_paths, seed)
    bundle = simulate_forward(spec, constant_policy(1.0, spec.control_set), chains, TimeGrid(horizon, n_steps),
                              seed=seed)
    x = bundle.x[:, :, 0]
    reg = bundle.regime.astype(np.int64)
    xi = a[reg[-1]] + b[reg[-1]] * np.sin(x[-1])
    F = c[reg[:-1]] + e[reg[:-1]] * np.cos(x[:-1])
    return LinearInstance(bundle, xi, F, A, B, C)
