"""Explicit monotone finite differences for the regime-coupled HJB system with scalar state."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chain import sample_chains
from .forward import TimeGrid, simulate_forward
from .model import ControlPolicy, ModelSpec, feedback_policy


class StabilityError(ValueError):
    """The explicit scheme's step-size condition is violated."""


@dataclass
class ValueGrid:
    """Value surfaces V (n_t + 1, M, D) and minimising controls u_star (n_t, M, D, k)."""

    times: np.ndarray
    xs: np.ndarray
    V: np.ndarray
    u_star: np.ndarray
    controls: np.ndarray
    monotone: bool
    extrapolated: bool
    dt_max: float
    flags: list = field(default_factory=list)

    @property
    def dx(self) -> float:
        return float(self.xs[1] - self.xs[0])

    def value(self, k: int, x, regime) -> np.ndarray:
        """Linear interpolation of V(t_k, ., e_regime) at x (arrays broadcast)."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        r = np.broadcast_to(np.asarray(regime, dtype=np.int64), x.shape)
        out = np.empty(x.shape)
        for i in np.unique(r):
            sel = r == i
            out[sel] = _interp(self.xs, self.V[k, :, i], x[sel])[0]
        return out

    def control_at(self, t, x: np.ndarray, regime: np.ndarray) -> np.ndarray:
        """u_star at the node below t and the nearest state node."""
        k = int(np.clip(np.searchsorted(self.times, np.max(t) + 1e-12, side="right") - 1, 0, len(self.times) - 2))
        m = np.clip(np.rint((x[:, 0] - self.xs[0]) / self.dx).astype(np.int64), 0, self.xs.size - 1)
        return self.u_star[k, m, regime]

    def policy(self, control_set) -> ControlPolicy:
        return feedback_policy(self.control_at, control_set)

    def rows(self, every: int = 1):
        """CSV rows (t, x, regime 1-based, V, u_star first component); terminal rows carry u_star = nan."""
        out = []
        nt = self.times.size - 1
        ks = sorted(set(range(0, nt + 1, max(1, every))) | {nt})
        for k in ks:
            for i in range(self.V.shape[2]):
                for m, x in enumerate(self.xs):
                    u = float(self.u_star[k, m, i, 0]) if k < nt else float("nan")
                    out.append([float(self.times[k]), float(x), i + 1, float(self.V[k, m, i]), u])
        return out

    header = ["t", "x", "regime", "V", "u_star"]


def _interp(xs, vals, q):
    """Linear interpolation with linear extrapolation outside [xs[0], xs[-1]]; returns (values, outside)."""
    dx = xs[1] - xs[0]
    pos = (q - xs[0]) / dx
    j = np.clip(np.floor(pos).astype(np.int64), 0, xs.size - 2)
    w = pos - j
    outside = (q < xs[0] - 1e-12) | (q > xs[-1] + 1e-12)
    return (1 - w) * vals[..., j] + w * vals[..., j + 1], outside


def _interp_weights(xs, q, boundary: str = "quadratic"):
    """Three-node stencil (indices (..., 3), weights (..., 3)) evaluating a grid function at q.

    Inside the window: linear interpolation. Outside: extrapolation of the
    chosen order from the nearest boundary nodes.
    """
    M = xs.size
    dx = xs[1] - xs[0]
    pos = (q - xs[0]) / dx
    j = np.clip(np.floor(pos).astype(np.int64), 0, M - 2)
    w = pos - j
    idx = np.stack([j, j + 1, j + 1], axis=-1)
    wts = np.stack([1 - w, w, np.zeros_like(w)], axis=-1)
    left = pos < -1e-12
    right = pos > M - 1 + 1e-12
    if boundary == "quadratic":
        s = pos - (M - 1)
        r_idx = np.array([M - 3, M - 2, M - 1])
        r_w = np.stack([(s + 1) * s / 2, -(s + 2) * s, (s + 2) * (s + 1) / 2], axis=-1)
        s = pos
        l_idx = np.array([0, 1, 2])
        l_w = np.stack([(s - 1) * (s - 2) / 2, -s * (s - 2), s * (s - 1) / 2], axis=-1)
        idx = np.where(right[..., None], r_idx, idx)
        wts = np.where(right[..., None], r_w, wts)
        idx = np.where(left[..., None], l_idx, idx)
        wts = np.where(left[..., None], l_w, wts)
    elif boundary != "linear":
        raise ValueError("boundary must be 'linear' or 'quadratic'")
    return idx, wts, bool(np.any(left | right))


class _Coefficients:
    """Coefficients on the (control, node, regime) lattice, cached when time-homogeneous."""

    def __init__(self, spec: ModelSpec, xs: np.ndarray, controls: np.ndarray, horizon: float):
        self.spec = spec
        self.xs = xs
        self.controls = controls
        K, M, D = controls.shape[0], xs.size, spec.n_regimes
        self.shape = (K, M, D)
        self.uu = np.repeat(controls, M, axis=0)
        self.xx = np.tile(xs, K)[:, None]
        probes = [self._eval(t) for t in (0.0, 0.5 * horizon, horizon)]
        self.homogeneous = all(
            all(np.array_equal(a, b) for a, b in zip(probes[0], p)) for p in probes[1:]
        )
        self.cached = probes[0] if self.homogeneous else None

    def _eval(self, t):
        sp = self.spec
        K, M, D = self.shape
        n = K * M
        b = np.empty((K, M, D))
        s2 = np.empty((K, M, D))
        g = np.empty((K, M, D, D))
        lc = np.empty((K, M, D))
        tt = np.full(n, t)
        for i in range(D):
            r = np.full(n, i, dtype=np.int64)
            bi, si, gi = sp.coefficients(tt, self.xx, self.uu, r)
            b[:, :, i] = bi[:, 0].reshape(K, M)
            s2[:, :, i] = (si[:, 0, :] ** 2).sum(axis=1).reshape(K, M)
            g[:, :, i, :] = gi[:, 0, :].reshape(K, M, D)
            lc[:, :, i] = np.asarray(sp.running_cost(tt, self.xx, self.uu, r), dtype=float).reshape(K, M)
        return b, s2, g, lc

    def at(self, t):
        return self.cached if self.homogeneous else self._eval(t)


def stable_steps(spec: ModelSpec, generator, xs: np.ndarray, controls: np.ndarray, horizon: float,
                 safety: float = 0.95):
    """Largest stable time step dx^2 / max(sigma^2 + dx |b_eff| + dx^2 sum_m lambda_im) and a step count below it."""
    coef = _Coefficients(spec, xs, controls, horizon)
    dx = xs[1] - xs[0]
    lam = generator.intensities
    worst = 0.0
    for t in (0.0, 0.5 * horizon, horizon):
        b, s2, g, _ = coef.at(t)
        beff = b - (g * lam[None, None]).sum(axis=3)
        tot = lam.sum(axis=1)[None, None, :]
        worst = max(worst, float(np.max(s2 + dx * np.abs(beff) + dx**2 * tot)))
    dt_max = dx**2 / worst if worst > 0 else horizon
    n = max(1, int(np.ceil(horizon / (safety * dt_max))))
    return dt_max, n


def solve_hjb(
    spec: ModelSpec,
    generator,
    horizon: float,
    x_min: float,
    x_max: float,
    dx: float,
    controls=101,
    n_steps: int | None = None,
    boundary: str = "quadratic",
) -> ValueGrid:
    """Backward explicit sweep of min_u {L^u V + l} = -dV/dt with terminal V = h.

    The operator uses the compensated form: drift b - sum_m gamma^m lambda_im
    (upwinded), central second difference, and lambda_im [V(x + gamma^m, e_m) -
    V(x, e_i)] by linear interpolation. Boundary nodes, and jump destinations
    outside the window, use extrapolation of the order given by `boundary`
    ("quadratic" or "linear"); leaving the window sets a flag.

    Raises:
        StabilityError: when n_steps is given and violates the step condition.
    """
    spec.require("forward_cost")
    if spec.state_dim != 1:
        raise ValueError("the HJB solver handles scalar state only")
    ctrl = spec.control_set.grid(controls) if np.ndim(controls) == 0 else np.asarray(controls, dtype=float)
    if ctrl.ndim == 1:
        ctrl = ctrl[:, None]
    M = int(round((x_max - x_min) / dx)) + 1
    if M < 5:
        raise ValueError("state window needs at least five nodes")
    xs = np.linspace(x_min, x_max, M)
    dx = xs[1] - xs[0]
    dt_max, n_auto = stable_steps(spec, generator, xs, ctrl, horizon)
    if n_steps is None:
        n_steps = n_auto
    elif horizon / n_steps > dt_max * (1 + 1e-12):
        raise StabilityError(f"time step {horizon / n_steps:.3e} exceeds the stable bound {dt_max:.3e} at dx = {dx:.3e}")
    grid = TimeGrid(horizon, n_steps, augmented=False)
    dt = grid.dt
    times = grid.times
    K, D = ctrl.shape[0], spec.n_regimes
    lam = generator.intensities
    coef = _Coefficients(spec, xs, ctrl, horizon)
    V = np.empty((n_steps + 1, M, D))
    U = np.empty((n_steps, M, D, ctrl.shape[1]))
    for i in range(D):
        V[-1, :, i] = spec.terminal_cost(xs[:, None], np.full(M, i, dtype=np.int64))
    extrap = False
    interp_cache = {}
    for k in range(n_steps - 1, -1, -1):
        b, s2, g, lc = coef.at(times[k])
        Vn = V[k + 1]
        out = np.empty((M, D))
        for i in range(D):
            v = Vn[:, i]
            fwd = np.zeros(M)
            bwd = np.zeros(M)
            fwd[:-1] = (v[1:] - v[:-1]) / dx
            bwd[1:] = (v[1:] - v[:-1]) / dx
            sec = np.zeros(M)
            sec[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / dx**2
            beff = b[:, :, i] - (g[:, :, i, :] * lam[i][None, None, :]).sum(axis=2)
            drift = np.where(beff > 0, beff * fwd[None, :], beff * bwd[None, :])
            op = drift + 0.5 * s2[:, :, i] * sec[None, :] + lc[:, :, i]
            for m in range(D):
                if lam[i, m] <= 0:
                    continue
                key = (i, m)
                if key not in interp_cache or not coef.homogeneous:
                    j, w, outside = _interp_weights(xs, xs[None, :] + g[:, :, i, m], boundary)
                    interp_cache[key] = (j, w)
                    extrap = extrap or outside
                j, w = interp_cache[key]
                vm = Vn[:, m]
                op = op + lam[i, m] * ((w * vm[j]).sum(axis=-1) - v[None, :])
            arg = np.argmin(op, axis=0)
            best = op[arg, np.arange(M)]
            out[:, i] = v + dt * best
            U[k, :, i] = ctrl[arg]
        if boundary == "quadratic":
            out[0] = 3 * out[1] - 3 * out[2] + out[3]
            out[-1] = 3 * out[-2] - 3 * out[-3] + out[-4]
        else:
            out[0] = 2 * out[1] - out[2]
            out[-1] = 2 * out[-2] - out[-3]
        V[k] = out
    flags = ["extrapolated jump destinations"] if extrap else []
    if not np.all(np.isfinite(V)):
        raise FloatingPointError("non-finite value surface")
    return ValueGrid(times, xs, V, U, ctrl, True, extrap, dt_max, flags)


def default_window(x0: float, sigma_max: float, horizon: float, width: float = 6.0):
    h = width * sigma_max * np.sqrt(horizon)
    return x0 - h, x0 + h


@dataclass
class DominanceReport:
    V0: float
    rows: list
    tolerance: float

    @property
    def dominance_ok(self) -> bool:
        return all(r[4] for r in self.rows)

    @property
    def equality_ok(self) -> bool:
        eq = [r[5] for r in self.rows if r[5] is not None]
        return all(eq) if eq else True

    header = ["policy", "J", "J_se", "V0", "dominance_ok", "equality_ok"]


def verify_value_dominance(vg: ValueGrid, spec: ModelSpec, generator, policies: dict, x0: float = 0.0,
                           regime0: int = 0, n_paths: int = 20000, n_steps: int = 200, seed: int = 0,
                           tolerance: float = 5e-3, optimal: str | None = None) -> DominanceReport:
    """Check V(0, x0, e_i) <= J(u) + 3 SE + tolerance for each named policy.

    The policy named by `optimal` also gets the equality check |V - J| <= 3 SE + tolerance.
    """
    horizon = float(vg.times[-1])
    chains = sample_chains(generator, regime0, horizon, n_paths, seed)
    grid = TimeGrid(horizon, n_steps)
    V0 = float(vg.value(0, x0, regime0)[0])
    rows = []
    drivers = None
    for name, pol in policies.items():
        b = simulate_forward(spec, pol, chains, grid, seed=seed + 1, x0=[x0], drivers=drivers, running_cost=True)
        drivers = b.drivers
        c = b.cost_samples()
        J = float(c.mean())
        se = float(c.std(ddof=1) / np.sqrt(c.size))
        dom = V0 <= J + 3 * se + tolerance
        eq = abs(V0 - J) <= 3 * se + tolerance if name == optimal else None
        rows.append([name, J, se, V0, bool(dom), eq])
    return DominanceReport(V0, rows, tolerance)


def argmin_agreement(vg: ValueGrid, bundle, steps: np.ndarray, paths: np.ndarray, mp_argmin: np.ndarray,
                     tolerance: float | None = None) -> float:
    """Fraction of sampled trajectory points where the HJB control matches the grid argmin of the H-function."""
    tol = tolerance
    if tol is None:
        c = np.unique(vg.controls[:, 0])
        tol = float(np.min(np.diff(c))) * (1 + 1e-9) if c.size > 1 else 0.0
    times = bundle.grid.times
    agree = np.empty(steps.size, dtype=bool)
    for k in np.unique(steps):
        sel = steps == k
        x = bundle.x[k, paths[sel]]
        r = bundle.regime[k, paths[sel]].astype(np.int64)
        u = vg.control_at(times[k], x, r)
        agree[sel] = np.all(np.abs(u - mp_argmin[sel]) <= tol, axis=1)
    return float(agree.mean())
