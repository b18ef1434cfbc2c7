"""Spike perturbations, first and second order variational equations and expansion-rate checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import PathBundle, TimeGrid, fit_slope, integrate, resimulate
from .maxprinciple import FirstOrderAdjoint, SecondOrderAdjoint, h_function
from .model import ControlPolicy, ModelSpec


@dataclass(frozen=True)
class SpikePerturbation:
    """Control v on the window [tau, tau + eps), base control elsewhere."""

    tau: float
    eps: float
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "v", np.atleast_1d(np.asarray(self.v, dtype=float)))
        if self.tau < 0 or self.eps <= 0:
            raise ValueError("spike needs tau >= 0 and eps > 0")

    def validate(self, horizon: float, control_set=None):
        if self.tau + self.eps > horizon * (1 + 1e-12):
            raise ValueError(f"spike window [{self.tau}, {self.tau + self.eps}] exceeds horizon {horizon}")
        if control_set is not None and not control_set.contains(self.v[None, :])[0]:
            raise ValueError(f"spike value {self.v} lies outside the control set")

    def snapped(self, grid: TimeGrid) -> "SpikePerturbation":
        """Window endpoints moved onto the grid; the width is at least one step."""
        n_tau, n_eps = self.window_steps(grid)
        return SpikePerturbation(grid.times[n_tau], grid.times[n_tau + n_eps] - grid.times[n_tau], self.v)

    def window_steps(self, grid: TimeGrid):
        n_tau = int(np.rint(self.tau / grid.dt))
        n_eps = max(1, int(np.rint(self.eps / grid.dt)))
        if n_tau + n_eps > grid.n_steps:
            raise ValueError("snapped spike window exceeds the grid")
        return n_tau, n_eps

    def indicator(self, t, scale: float = 1.0):
        t = np.asarray(t, dtype=float)
        tol = 1e-9 * scale
        return (t >= self.tau - tol) & (t < self.tau + self.eps - tol)


def apply_spike(policy: ControlPolicy, spike: SpikePerturbation) -> ControlPolicy:
    """u^eps: v on the spike window, the base policy elsewhere."""
    v = spike.v
    scale = max(spike.eps, 1e-12)

    def rule(t, x, r):
        base = policy(t, x, r)
        on = np.broadcast_to(spike.indicator(t, scale), (x.shape[0],))
        return np.where(on[:, None], v[None, :], base)

    return ControlPolicy(rule, "feedback" if policy.kind == "feedback" else "deterministic", policy.control_set)


@dataclass
class VariationPaths:
    """x1, x2 (n + 1, N, L) along the bundle together with the spike used."""

    x1: np.ndarray
    x2: np.ndarray
    xbar: np.ndarray
    spike: SpikePerturbation


def _quad(a, v):
    """Contract the last two axes of a with v v^T (v has shape (N, L))."""
    return np.einsum("n...ab,na,nb->n...", a, v, v)


def variational_coefficients(spec: ModelSpec, base: ControlPolicy, spiked: ControlPolicy):
    """Coefficient function of the stacked system (xbar, x1, x2)."""
    L = spec.state_dim

    def coeff(t, X, r):
        n = X.shape[0]
        xb, x1, x2 = X[:, :L], X[:, L : 2 * L], X[:, 2 * L :]
        ub = base(t, xb, r)
        ue = spiked(t, xb, r)
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        b, s, g = spec.coefficients(tt, xb, ub, r)
        bx, sx, gx = spec.drift_x(tt, xb, ub, r), spec.diffusion_x(tt, xb, ub, r), spec.jump_x(tt, xb, ub, r)
        bxx, sxx, gxx = spec.drift_xx(tt, xb, ub, r), spec.diffusion_xx(tt, xb, ub, r), spec.jump_xx(tt, xb, ub, r)
        db = np.zeros_like(b)
        ds = np.zeros_like(s)
        dg = np.zeros_like(g)
        dbx = np.zeros_like(bx)
        dsx = np.zeros_like(sx)
        dgx = np.zeros_like(gx)
        on = np.flatnonzero(np.any(ue != ub, axis=1))
        if on.size:
            ta, xa, ua, ra = tt[on], xb[on], ue[on], r[on]
            be, se, ge = spec.coefficients(ta, xa, ua, ra)
            db[on] = be - b[on]
            ds[on] = se - s[on]
            dg[on] = ge - g[on]
            dbx[on] = spec.drift_x(ta, xa, ua, ra) - bx[on]
            dsx[on] = spec.diffusion_x(ta, xa, ua, ra) - sx[on]
            dgx[on] = spec.jump_x(ta, xa, ua, ra) - gx[on]
        d1 = np.einsum("nlk,nk->nl", bx, x1) + db
        d2 = np.einsum("nlk,nk->nl", bx, x2) + 0.5 * _quad(bxx, x1) + np.einsum("nlk,nk->nl", dbx, x1)
        s1 = np.einsum("nljk,nk->nlj", sx, x1) + ds
        s2 = np.einsum("nljk,nk->nlj", sx, x2) + 0.5 * _quad(sxx, x1) + np.einsum("nljk,nk->nlj", dsx, x1)
        g1 = np.einsum("nljk,nk->nlj", gx, x1) + dg
        g2 = np.einsum("nljk,nk->nlj", gx, x2) + 0.5 * _quad(gxx, x1) + np.einsum("nljk,nk->nlj", dgx, x1)
        return (np.concatenate([b, d1, d2], axis=1), np.concatenate([s, s1, s2], axis=1),
                np.concatenate([g, g1, g2], axis=1))

    return coeff


def solve_variational_eqs(spec: ModelSpec, bundle: PathBundle, spike: SpikePerturbation) -> VariationPaths:
    """Integrate the first and second order variational equations on the bundle's drivers.

    The reference state is integrated alongside with the same scheme, so the
    variations use exactly the coefficients seen along the reference path.
    """
    spike.validate(bundle.grid.horizon, spec.control_set)
    sp = spike.snapped(bundle.grid)
    L = spec.state_dim
    coeff = variational_coefficients(spec, bundle.policy, apply_spike(bundle.policy, sp))
    x0 = np.concatenate([bundle.x0, np.zeros(2 * L)])
    X, _, _, failed = integrate(bundle.drivers, x0, coeff, bundle.grid.augmented)
    if failed.any():
        raise FloatingPointError("variational equations produced non-finite values")
    return VariationPaths(X[:, :, L : 2 * L].copy(), X[:, :, 2 * L :].copy(), X[:, :, :L].copy(), sp)


def cost_expansion(spec: ModelSpec, bundle: PathBundle, var: VariationPaths) -> np.ndarray:
    """Per-path left side of the cost-expansion inequality (first plus second order terms)."""
    spec.require("forward_cost")
    grid = bundle.grid
    spiked = apply_spike(bundle.policy, var.spike)
    out = np.zeros(bundle.n_paths)
    for k in range(grid.n_steps):
        t = grid.times[k]
        x = bundle.x[k]
        r = bundle.regime[k].astype(np.int64)
        ub = bundle.policy(t, x, r)
        ue = spiked(t, x, r)
        x1, x2 = var.x1[k], var.x2[k]
        lx = spec.running_cost_x(t, x, ub, r)
        lxx = spec.running_cost_xx(t, x, ub, r)
        term = (lx * (x1 + x2)).sum(axis=1) + 0.5 * _quad(lxx, x1)
        term = term + spec.running_cost(t, x, ue, r) - spec.running_cost(t, x, ub, r)
        out += term * grid.dt
    rT = bundle.regime[-1].astype(np.int64)
    hx = spec.terminal_cost_x(bundle.x[-1], rT)
    hxx = spec.terminal_cost_xx(bundle.x[-1], rT)
    x1, x2 = var.x1[-1], var.x2[-1]
    return out + (hx * (x1 + x2)).sum(axis=1) + 0.5 * _quad(hxx, x1)


QUANTITIES = ("state_gap", "first_variation", "second_variation", "first_remainder", "second_remainder")
EXPECTED = {"state_gap": (0.8, 1.2), "first_variation": (0.8, 1.2), "second_variation": (1.8, 2.2), "first_remainder": (1.8, 2.2), "second_remainder": (2.3, np.inf)}


@dataclass
class RatesReport:
    eps: np.ndarray
    values: dict
    value_se: dict
    slopes: dict
    slope_se: dict
    vi: np.ndarray = None
    vi_se: np.ndarray = None
    windows: dict = field(default_factory=dict)

    @property
    def degraded(self) -> dict:
        return {q: self.slope_se[q] > 0.15 for q in self.slopes}

    def within(self, q: str) -> bool:
        lo, hi = self.windows.get(q, (-np.inf, np.inf))
        return lo <= self.slopes[q] <= hi

    def rows(self):
        out = []
        for q in self.values:
            for e, v, s in zip(self.eps, self.values[q], self.value_se[q]):
                out.append([q, float(e), float(v), float(s), self.slopes.get(q, np.nan), self.slope_se.get(q, np.nan)])
        if self.vi is not None:
            for e, v, s in zip(self.eps, self.vi, self.vi_se):
                out.append(["vi_over_eps", float(e), float(v), float(s), np.nan, np.nan])
        return out

    header = ["quantity", "eps", "value", "value_se", "slope", "slope_se"]


def _sup_mean_sq(a: np.ndarray):
    """sup over nodes of the sample mean of |a|^2 and the SE at the maximising node."""
    sq = (a**2).sum(axis=2)
    m = sq.mean(axis=1)
    k = int(np.argmax(m))
    return float(m[k]), float(sq[k].std(ddof=1) / np.sqrt(sq.shape[1]))


def estimate_rates(spec: ModelSpec, bundle: PathBundle, tau: float, v, eps_list, vi: bool = True) -> RatesReport:
    """Fit log-log slopes of the five expansion quantities over a family of spike widths.

    All widths reuse the bundle's drivers (common random numbers); x^eps comes
    from a fresh simulation under the spiked policy.
    """
    eps_arr = []
    vals = {q: [] for q in QUANTITIES}
    ses = {q: [] for q in QUANTITIES}
    vin, vin_se = [], []
    for eps in eps_list:
        sp = SpikePerturbation(tau, eps, v).snapped(bundle.grid)
        eps_arr.append(sp.eps)
        var = solve_variational_eqs(spec, bundle, sp)
        xe = resimulate(bundle, apply_spike(bundle.policy, sp)).x
        xi = xe - bundle.x
        parts = {
            "state_gap": xi,
            "first_variation": var.x1,
            "second_variation": var.x2,
            "first_remainder": xi - var.x1,
            "second_remainder": xi - var.x1 - var.x2,
        }
        for q in QUANTITIES:
            m, s = _sup_mean_sq(parts[q])
            vals[q].append(m)
            ses[q].append(s)
        if vi and spec.has_forward_cost:
            c = cost_expansion(spec, bundle, var)
            vin.append(float(c.mean() / sp.eps))
            vin_se.append(float(c.std(ddof=1) / np.sqrt(c.size) / sp.eps))
        del xe, xi, parts, var
    eps_arr = np.array(eps_arr)
    slopes, slope_se = {}, {}
    for q in QUANTITIES:
        arr = np.array(vals[q])
        if np.all(arr > 0) and np.all(np.isfinite(arr)):
            slopes[q], slope_se[q] = fit_slope(eps_arr, arr)
        else:
            slopes[q], slope_se[q] = np.nan, np.inf
    return RatesReport(eps_arr, {q: np.array(vals[q]) for q in QUANTITIES},
                       {q: np.array(ses[q]) for q in QUANTITIES}, slopes, slope_se,
                       np.array(vin) if vin else None, np.array(vin_se) if vin_se else None, dict(EXPECTED))


def variational_inequality(spec: ModelSpec, bundle: PathBundle, first: FirstOrderAdjoint,
                           second: SecondOrderAdjoint, spike: SpikePerturbation):
    """Empirical left side of the variational inequality divided by eps, with its SE.

    Integrand on the window: H(u^eps) - H(ubar) + 1/2 tr(dsigma^T P dsigma)
    + 1/2 sum_j dgamma_j^T (P + S_j) dgamma_j lambda_j.
    """
    spike.validate(bundle.grid.horizon, spec.control_set)
    grid = bundle.grid
    sp = spike.snapped(grid)
    n_tau, n_eps = sp.window_steps(grid)
    lam_all = bundle.generator.intensities
    acc = np.zeros(bundle.n_paths)
    for k in range(n_tau, n_tau + n_eps):
        t = grid.times[k]
        x = bundle.x[k]
        r = bundle.regime[k].astype(np.int64)
        ub = bundle.policy(t, x, r)
        ue = np.broadcast_to(sp.v, ub.shape).copy()
        args = (r, first.p[k], first.q[k], first.s[k], second.P[k], second.S[k], lam_all[r])
        tt = np.full(x.shape[0], t)
        acc += (h_function(spec, tt, x, ue, ub, *args) - h_function(spec, tt, x, ub, ub, *args)) * grid.dt
    return float(acc.mean() / sp.eps), float(acc.std(ddof=1) / np.sqrt(acc.size) / sp.eps)
