"""Forward Euler simulation of regime-switching jump diffusions and pathwise identity checks."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from .chain import ChainBatch, ChainPath, RegimeGenerator
from .model import ControlPolicy, ModelSpec


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon]; augmented grids sub-step each path at its chain jump times."""

    horizon: float
    n_steps: int
    augmented: bool = True

    def __post_init__(self):
        if self.horizon <= 0 or int(self.n_steps) < 1:
            raise ValueError("grid needs a positive horizon and at least one step")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def index(self, t: float) -> int:
        """Nearest grid index of time t."""
        return int(np.clip(np.rint(t / self.dt), 0, self.n_steps))


@dataclass
class Drivers:
    """Brownian increments and chain data aligned with a time grid.

    Arrays are time-major: dW (n, N, d), jumps (n, N, D) counts of entries into
    each regime during the step, comp (n, N, D) exact compensator increments,
    regime (n + 1, N) chain state at the nodes. Events are stored sorted by
    (path, time) with their step, rank inside the step and the Brownian
    increment accumulated since the previous sub-step point.
    """

    grid: TimeGrid
    chains: ChainBatch
    dW: np.ndarray
    jumps: np.ndarray
    comp: np.ndarray
    regime: np.ndarray
    ev_path: np.ndarray
    ev_time: np.ndarray
    ev_from: np.ndarray
    ev_to: np.ndarray
    ev_step: np.ndarray
    ev_rank: np.ndarray
    ev_dw: np.ndarray
    step_order: np.ndarray
    step_offsets: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.dW.shape[1]

    @property
    def generator(self) -> RegimeGenerator:
        return self.chains.generator

    def dphi_tilde(self, k: int) -> np.ndarray:
        return self.jumps[k] - self.comp[k]

    def step_events(self, k: int) -> np.ndarray:
        """Indices of events in step k sorted by (rank, path)."""
        return self.step_order[self.step_offsets[k] : self.step_offsets[k + 1]]


def build_drivers(chains: ChainBatch, grid: TimeGrid, noise_dim: int, seed: int, workers: int = 1) -> Drivers:
    """Align chain paths with the grid and draw Brownian increments.

    Macro increments are drawn first; values at chain jump times are filled
    in by Brownian-bridge interpolation, so the macro increments do not
    depend on the chain.
    """
    if abs(chains.horizon - grid.horizon) > 1e-12 * grid.horizon:
        raise ValueError("chain horizon differs from grid horizon")
    n, N, d = grid.n_steps, chains.n_paths, int(noise_dim)
    gen = chains.generator
    D = gen.n_regimes
    lam = gen.intensities
    times = grid.times
    dt = grid.dt

    ev_path = chains.event_path
    ev_time = chains.times
    ev_to = chains.states
    ev_from = chains.from_states
    E = ev_time.size
    ev_step = np.clip(np.searchsorted(times, ev_time, side="left") - 1, 0, n - 1)
    key = ev_path * n + ev_step
    first = np.ones(E, dtype=bool)
    first[1:] = key[1:] != key[:-1]
    start = np.maximum.accumulate(np.where(first, np.arange(E), 0)) if E else np.zeros(0, dtype=np.int64)
    ev_rank = np.arange(E) - start
    last = np.ones(E, dtype=bool)
    last[:-1] = key[1:] != key[:-1]

    dtype = np.int8 if D < 127 else np.int32
    reg = np.full((n + 1, N), -1, dtype=np.int32)
    reg[0] = chains.initial
    reg[ev_step[last] + 1, ev_path[last]] = ev_to[last]
    idx = np.where(reg >= 0, np.arange(n + 1)[:, None], 0)
    np.maximum.accumulate(idx, axis=0, out=idx)
    regime = np.take_along_axis(reg, idx, axis=0).astype(dtype)
    del reg, idx

    jumps = np.zeros((n, N, D), dtype=np.int16)
    np.add.at(jumps, (ev_step, ev_path, ev_to), 1)
    comp = lam[regime[:-1]] * dt
    if E:
        rem = times[ev_step + 1] - ev_time
        np.add.at(comp, (ev_step, ev_path), (lam[ev_to] - lam[ev_from]) * rem[:, None])

    dW = np.empty((n, N, d))
    sq = np.sqrt(dt)
    offs = chains.offsets

    def brownian(job):
        b, lo, hi = job
        z = rng.stream(seed, "brownian", b).standard_normal((n, rng.BLOCK, d))
        dW[:, lo:hi] = sq * z[:, : hi - lo]

    jobs = list(rng.blocks(N))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(brownian, jobs))
    else:
        for j in jobs:
            brownian(j)

    # bridge normals: event number r of path p uses row r of its block stream
    zb = np.empty((E, d))
    if E:
        ev_num = np.arange(E) - offs[ev_path]
        for b, lo, hi in jobs:
            sel = slice(offs[lo], offs[hi])
            cnt = ev_num[sel]
            if cnt.size == 0:
                continue
            z = rng.stream(seed, "bridge", b).standard_normal((int(cnt.max()) + 1, rng.BLOCK, d))
            zb[sel] = z[cnt, ev_path[sel] - lo]
    ev_dw = np.zeros((E, d))
    w_at = np.zeros((E, d))
    if E:
        for r in range(int(ev_rank.max()) + 1):
            e = np.flatnonzero(ev_rank == r)
            if r == 0:
                s_prev = times[ev_step[e]]
                w_prev = np.zeros((e.size, d))
            else:
                s_prev = ev_time[e - 1]
                w_prev = w_at[e - 1]
            t_end = times[ev_step[e] + 1]
            total = dW[ev_step[e], ev_path[e]]
            span = t_end - s_prev
            safe = np.where(span > 0, span, 1.0)
            frac = np.where(span > 0, (ev_time[e] - s_prev) / safe, 0.0)
            var = np.where(span > 0, (ev_time[e] - s_prev) * (t_end - ev_time[e]) / safe, 0.0)
            w = w_prev + (total - w_prev) * frac[:, None] + np.sqrt(np.maximum(var, 0.0))[:, None] * zb[e]
            w_at[e] = w
            ev_dw[e] = w - w_prev
    order = np.lexsort((ev_path, ev_rank, ev_step)) if E else np.zeros(0, dtype=np.int64)
    step_offsets = np.searchsorted(ev_step[order], np.arange(n + 1), side="left")
    return Drivers(grid, chains, dW, jumps, comp, regime, ev_path, ev_time, ev_from, ev_to,
                   ev_step, ev_rank, ev_dw, order, step_offsets, int(seed))


CoeffFn = Callable[[object, np.ndarray, np.ndarray], tuple]


def integrate(drivers: Drivers, x0: np.ndarray, coeff: CoeffFn, augmented: bool = True):
    """Euler integration of dX = B dt + S dW + G dPhiTilde on the drivers.

    coeff(t, X, regime) returns (B (n, M), S (n, M, d), G (n, M, D)); t may be
    a scalar or a per-row array. On augmented grids every path is sub-stepped
    at its chain jump times: between jumps only the compensator acts, and at a
    jump into regime j the state moves by column j of G evaluated at the
    pre-jump arguments.

    Returns:
        X (n + 1, N, M), pre-jump and post-jump states per event (E, M), and
        a boolean mask of paths aborted after a non-finite state.
    """
    grid = drivers.grid
    n, N = grid.n_steps, drivers.n_paths
    times = grid.times
    dt = grid.dt
    lam = drivers.generator.intensities
    x = np.array(np.broadcast_to(x0, (N,) + np.shape(x0)[-1:]), dtype=float)
    M = x.shape[1]
    X = np.empty((n + 1, N, M))
    X[0] = x
    E = drivers.ev_time.size
    pre = np.full((E, M), np.nan)
    post = np.full((E, M), np.nan)
    failed = np.zeros(N, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(n):
            t = times[k]
            reg = drivers.regime[k].astype(np.int64)
            b, s, g = coeff(t, x, reg)
            x_new = (x + b * dt + np.einsum("nmd,nd->nm", s, drivers.dW[k])
                     + np.einsum("nmj,nj->nm", g, drivers.dphi_tilde(k)))
            idx = drivers.step_events(k)
            if augmented and idx.size:
                paths = np.unique(drivers.ev_path[idx])
                xs = x[paths].copy()
                ss = np.full(paths.size, t)
                rs = reg[paths].copy()
                wsum = np.zeros((paths.size, drivers.dW.shape[2]))
                ranks = drivers.ev_rank[idx]
                for r in range(int(ranks.max()) + 1):
                    e = idx[ranks == r]
                    li = np.searchsorted(paths, drivers.ev_path[e])
                    tau = drivers.ev_time[e]
                    h = tau - ss[li]
                    b1, s1, g1 = coeff(ss[li], xs[li], rs[li])
                    xm = (xs[li] + b1 * h[:, None] + np.einsum("nmd,nd->nm", s1, drivers.ev_dw[e])
                          - np.einsum("nmj,nj->nm", g1, lam[rs[li]] * h[:, None]))
                    pre[e] = xm
                    _, _, g2 = coeff(tau, xm, rs[li])
                    xp = xm + g2[np.arange(e.size), :, drivers.ev_to[e]]
                    post[e] = xp
                    xs[li] = xp
                    rs[li] = drivers.ev_to[e]
                    ss[li] = tau
                    wsum[li] += drivers.ev_dw[e]
                h = times[k + 1] - ss
                b1, s1, g1 = coeff(ss, xs, rs)
                xs = (xs + b1 * h[:, None] + np.einsum("nmd,nd->nm", s1, drivers.dW[k][paths] - wsum)
                      - np.einsum("nmj,nj->nm", g1, lam[rs] * h[:, None]))
                x_new[paths] = xs
            bad = ~np.isfinite(x_new).all(axis=1)
            if bad.any():
                failed |= bad
                x_new[failed] = np.nan
            x = x_new
            X[k + 1] = x
    return X, pre, post, failed


def model_coefficients(spec: ModelSpec, policy: ControlPolicy) -> CoeffFn:
    def coeff(t, x, r):
        u = policy(t, x, r)
        return spec.coefficients(t, x, u, r)
    return coeff


@dataclass
class PathBundle:
    """Simulated forward paths together with their drivers and policy."""

    spec: ModelSpec
    policy: ControlPolicy
    drivers: Drivers
    x: np.ndarray
    x_pre: np.ndarray
    x_post: np.ndarray
    failed: np.ndarray
    x0: np.ndarray
    running: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def grid(self) -> TimeGrid:
        return self.drivers.grid

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]

    @property
    def regime(self) -> np.ndarray:
        return self.drivers.regime

    @property
    def generator(self) -> RegimeGenerator:
        return self.drivers.generator

    @property
    def flagged(self) -> bool:
        return bool(self.failed.any())

    def controls(self, k: int, policy: ControlPolicy | None = None) -> np.ndarray:
        pol = policy or self.policy
        return pol(self.grid.times[k], self.x[k], self.regime[k].astype(np.int64))

    def terminal_cost(self) -> np.ndarray:
        self.spec.require("forward_cost")
        return self.spec.terminal_cost(self.x[-1], self.regime[-1].astype(np.int64))

    def cost_samples(self) -> np.ndarray:
        """Per-path realised cost int l dt + h(x(T), alpha(T))."""
        if self.running is None:
            raise ValueError("bundle was simulated without running-cost accumulation")
        return self.running + self.terminal_cost()


def simulate_forward(
    spec: ModelSpec,
    policy: ControlPolicy,
    chains: ChainBatch | None = None,
    grid: TimeGrid | None = None,
    seed: int = 0,
    x0=None,
    drivers: Drivers | None = None,
    workers: int = 1,
    running_cost: bool = False,
) -> PathBundle:
    """Simulate the controlled forward state on a grid.

    Args:
        spec: model coefficients.
        policy: control rule evaluated at (t, x(t-), alpha(t-)).
        chains: chain paths (ignored when drivers are given).
        grid: time grid (ignored when drivers are given).
        seed: Brownian seed.
        x0: initial state, default zero.
        drivers: reuse existing drivers (common random numbers).
        workers: threads used for random number generation.
        running_cost: also integrate the running cost along each path.
    """
    if drivers is None:
        if chains is None or grid is None:
            raise ValueError("either drivers or (chains, grid) are required")
        drivers = build_drivers(chains, grid, spec.noise_dim, seed, workers)
    L = spec.state_dim
    x0 = np.zeros(L) if x0 is None else np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (L,):
        raise ValueError(f"initial state must have length {L}")
    base = model_coefficients(spec, policy)
    if running_cost:
        spec.require("forward_cost")
        d, D = spec.noise_dim, spec.n_regimes

        def coeff(t, X, r):
            x = X[:, :L]
            u = policy(t, x, r)
            b, s, g = spec.coefficients(t, x, u, r)
            n = X.shape[0]
            lt = np.asarray(spec.running_cost(t, x, u, r), dtype=float).reshape(n, 1)
            return (np.concatenate([b, lt], axis=1),
                    np.concatenate([s, np.zeros((n, 1, d))], axis=1),
                    np.concatenate([g, np.zeros((n, 1, D))], axis=1))

        X, pre, post, failed = integrate(drivers, np.append(x0, 0.0), coeff, drivers.grid.augmented)
        run = X[-1, :, L].copy()
        X = np.ascontiguousarray(X[:, :, :L])
        pre, post = pre[:, :L], post[:, :L]
    else:
        X, pre, post, failed = integrate(drivers, x0, base, drivers.grid.augmented)
        run = None
    return PathBundle(spec, policy, drivers, X, pre, post, failed, x0, run)


def resimulate(bundle: PathBundle, policy: ControlPolicy, spec: ModelSpec | None = None, running_cost: bool = False) -> PathBundle:
    """Same drivers and initial state, different policy (or model)."""
    return simulate_forward(spec or bundle.spec, policy, drivers=bundle.drivers, x0=bundle.x0,
                            running_cost=running_cost)


# ---------------------------------------------------------------- Ito formula check


@dataclass(frozen=True)
class TestFunction:
    """Smooth phi(t, x, regime) with its t, x and xx derivatives.

    value -> (N,), dt -> (N,), dx -> (N, L), dxx -> (N, L, L).
    """

    value: Callable
    dt: Callable
    dx: Callable
    dxx: Callable

    __test__ = False


@dataclass
class ItoResult:
    residuals: list
    rms: np.ndarray
    dts: np.ndarray
    slope: Optional[float]


def _ito_piece(phi, spec, policy, lam, s, x, a, h, dw, dpt):
    """Integrated Ito right-hand side over one interval with frozen coefficients."""
    n, L = x.shape
    D = lam.shape[0]
    u = policy(s, x, a)
    b, sg, g = spec.coefficients(s, x, u, a)
    f0 = phi.value(s, x, a)
    fx = phi.dx(s, x, a)
    fxx = phi.dxx(s, x, a)
    drift = phi.dt(s, x, a) + (fx * b).sum(axis=1) + 0.5 * np.einsum("nlj,nlm,nmj->n", sg, fxx, sg)
    jumpdiff = np.empty((n, D))
    for m in range(D):
        jumpdiff[:, m] = phi.value(s, x + g[:, :, m], np.full(n, m)) - f0
    comp = jumpdiff - np.einsum("nl,nlm->nm", fx, g)
    drift = drift + (comp * lam[a]).sum(axis=1)
    return drift * h + np.einsum("nl,nld,nd->n", fx, sg, dw) + (jumpdiff * dpt).sum(axis=1)


def _ito_residual(phi: TestFunction, bundle: PathBundle) -> np.ndarray:
    spec, policy, dr = bundle.spec, bundle.policy, bundle.drivers
    grid = dr.grid
    times = grid.times
    lam = dr.generator.intensities
    N = bundle.n_paths
    rhs = np.zeros(N)
    aug = grid.augmented
    for k in range(grid.n_steps):
        t = times[k]
        reg = dr.regime[k].astype(np.int64)
        x = bundle.x[k]
        piece = _ito_piece(phi, spec, policy, lam, np.full(N, t), x, reg, grid.dt, dr.dW[k], dr.dphi_tilde(k))
        idx = dr.step_events(k)
        if aug and idx.size:
            paths = np.unique(dr.ev_path[idx])
            acc = np.zeros(paths.size)
            xs = x[paths].copy()
            ss = np.full(paths.size, t)
            rs = reg[paths].copy()
            wsum = np.zeros((paths.size, dr.dW.shape[2]))
            ranks = dr.ev_rank[idx]
            for r in range(int(ranks.max()) + 1):
                e = idx[ranks == r]
                li = np.searchsorted(paths, dr.ev_path[e])
                tau = dr.ev_time[e]
                h = tau - ss[li]
                acc[li] += _ito_piece(phi, spec, policy, lam, ss[li], xs[li], rs[li], h, dr.ev_dw[e],
                                      -lam[rs[li]] * h[:, None])
                acc[li] += phi.value(tau, bundle.x_post[e], dr.ev_to[e]) - phi.value(tau, bundle.x_pre[e], rs[li])
                xs[li] = bundle.x_post[e]
                rs[li] = dr.ev_to[e]
                ss[li] = tau
                wsum[li] += dr.ev_dw[e]
            h = times[k + 1] - ss
            acc += _ito_piece(phi, spec, policy, lam, ss, xs, rs, h, dr.dW[k][paths] - wsum, -lam[rs] * h[:, None])
            piece[paths] = acc
        rhs += piece
    T = grid.horizon
    lhs = (phi.value(np.full(N, T), bundle.x[-1], dr.regime[-1].astype(np.int64))
           - phi.value(np.zeros(N), bundle.x[0], dr.regime[0].astype(np.int64)))
    return lhs - rhs


def fit_slope(h, values):
    """Least-squares slope of log(values) on log(h) and its standard error."""
    lh = np.log(np.asarray(h, dtype=float))
    lv = np.log(np.asarray(values, dtype=float))
    A = np.vstack([lh, np.ones_like(lh)]).T
    coef, *_ = np.linalg.lstsq(A, lv, rcond=None)
    resid = lv - A @ coef
    dof = max(len(lh) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(np.sqrt(max(cov[0, 0], 0.0)))


def verify_ito_formula(phi: TestFunction, bundles: PathBundle | Sequence[PathBundle]) -> ItoResult:
    """Pathwise residual of the regime-switching Ito formula.

    The left side is phi(T, x(T), alpha(T)) - phi(0, x(0), alpha(0)); the right
    side integrates the drift, second-order and regime-coupling terms against
    dt and the stochastic integrals against dW and dPhiTilde on the bundle's
    grid (sub-interval by sub-interval on augmented grids). Several bundles on
    refined grids give a fitted convergence slope of the RMS residual in dt.
    """
    if isinstance(bundles, PathBundle):
        bundles = [bundles]
    res = [_ito_residual(phi, b) for b in bundles]
    rms = np.array([np.sqrt(np.mean(r**2)) for r in res])
    dts = np.array([b.grid.dt for b in bundles])
    slope = fit_slope(dts, rms)[0] if len(bundles) > 1 and np.all(rms > 0) else None
    return ItoResult(res, rms, dts, slope)


# ---------------------------------------------------------------- quadratic covariation


@dataclass(frozen=True)
class PureJumpProcess:
    """dX = sum_j loadings[alpha(t-), j] dPhiTilde_j with X(0) = x0."""

    x0: float
    loadings: np.ndarray


@dataclass
class CovariationResult:
    times: np.ndarray
    bracket: np.ndarray
    residual: np.ndarray
    x1: np.ndarray
    x2: np.ndarray


def quadratic_covariation(X1: PureJumpProcess, X2: PureJumpProcess, path: ChainPath,
                          generator: RegimeGenerator, times) -> CovariationResult:
    """Bracket [X1, X2] and the residual of the product rule on one chain path.

    Both processes are piecewise linear between chain jumps, so the
    stochastic integrals are evaluated exactly (trapezoid on linear pieces plus
    left-limit products at the jumps).
    """
    for X in (X1, X2):
        if not isinstance(X, PureJumpProcess):
            raise TypeError("quadratic_covariation accepts only PureJumpProcess inputs")
    lam = generator.intensities
    G1 = np.asarray(X1.loadings, dtype=float)
    G2 = np.asarray(X2.loadings, dtype=float)
    slope1 = -(G1 * lam).sum(axis=1)
    slope2 = -(G2 * lam).sum(axis=1)
    times = np.asarray(times, dtype=float)
    ev = [(float(t), 1, int(s)) for t, s in zip(path.times, path.states)]
    obs = [(float(t), 0, i) for i, t in enumerate(times)]
    # at equal times the observation sees the jump already (right-continuity)
    seq = sorted(ev + obs, key=lambda e: (e[0], -e[1]))
    a = int(path.initial_state)
    s = 0.0
    x1, x2 = float(X1.x0), float(X2.x0)
    p0 = x1 * x2
    i12 = i21 = br = 0.0
    out = np.zeros((4, times.size))
    for t, kind, val in seq:
        h = t - s
        if h > 0:
            y1 = x1 + slope1[a] * h
            y2 = x2 + slope2[a] * h
            i12 += 0.5 * (x1 + y1) * slope2[a] * h
            i21 += 0.5 * (x2 + y2) * slope1[a] * h
            x1, x2, s = y1, y2, t
        if kind == 1:
            d1 = G1[a, val]
            d2 = G2[a, val]
            i12 += x1 * d2
            i21 += x2 * d1
            br += d1 * d2
            x1 += d1
            x2 += d2
            a = val
        else:
            out[:, val] = (br, x1 * x2 - p0 - i12 - i21 - br, x1, x2)
    return CovariationResult(times, out[0], out[1], out[2], out[3])


# ---------------------------------------------------------------- export


def summary_rows(bundle: PathBundle):
    """Per-node mean and variance of the first state coordinate and regime occupancy."""
    D = bundle.generator.n_regimes
    N = bundle.n_paths
    ok = ~bundle.failed
    rows = []
    for k, t in enumerate(bundle.grid.times):
        xk = bundle.x[k][ok, 0]
        occ = np.bincount(bundle.regime[k][ok].astype(np.int64), minlength=D) / max(ok.sum(), 1)
        var = float(xk.var(ddof=1)) if xk.size > 1 else 0.0
        se = float(np.sqrt(var / max(xk.size, 1)))
        rows.append([float(t), float(xk.mean()), var, *[float(v) for v in occ], se])
    header = ["time", "mean_x", "var_x"] + [f"regime_occupancy_{j + 1}" for j in range(D)] + ["se_mean_x"]
    return header, rows
