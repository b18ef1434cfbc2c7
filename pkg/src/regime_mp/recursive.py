"""Maximum principle for recursive utilities with scalar state and noise.

The cost is y(0) of the backward equation with generator f. Two adjoint
equations with generators F (first order) and G (second order) absorb the
state variations into the backward solution; the spike then enters a linear
backward equation whose initial value is the cost increment to order eps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bsde import BackwardSolution, backward_sweep, solve_bsde
from .forward import PathBundle, fit_slope, resimulate
from .maxprinciple import MaximumConditionReport, grid_check, report_rows, sample_cells
from .model import ModelSpec
from .spike import RatesReport, SpikePerturbation, VariationPaths, apply_spike, solve_variational_eqs


class ModelInconsistencyError(ValueError):
    """The model asks for a jump weight where the chain has zero intensity."""


def _require_scalar(spec: ModelSpec):
    spec.require("recursive")
    if spec.state_dim != 1 or spec.noise_dim != 1:
        raise ValueError("the recursive maximum principle is implemented for scalar state and noise")


# ---------------------------------------------------------------- pointwise data


def scalar_derivatives(spec: ModelSpec, t, x, u, r):
    """b_x, b_xx, sigma_x, sigma_xx as (N,) and gamma_x, gamma_xx as (N, D)."""
    return {
        "bx": spec.drift_x(t, x, u, r)[:, 0, 0],
        "bxx": spec.drift_xx(t, x, u, r)[:, 0, 0, 0],
        "sx": spec.diffusion_x(t, x, u, r)[:, 0, 0, 0],
        "sxx": spec.diffusion_xx(t, x, u, r)[:, 0, 0, 0, 0],
        "gx": spec.jump_x(t, x, u, r)[:, 0, :, 0],
        "gxx": spec.jump_xx(t, x, u, r)[:, 0, :, 0, 0],
    }


def generator_derivatives(spec: ModelSpec, t, x, y, z, kappa, u, r):
    """f_x, f_y, f_z (N,), f_kappa (N, D) and the Hessian over (x, y, z, kappa)."""
    g = spec.generator_grad(t, x, y, z, kappa, u, r)
    return {
        "fx": g[:, 0],
        "fy": g[:, 1],
        "fz": g[:, 2],
        "fk": g[:, 3:],
        "D2f": spec.generator_hess(t, x, y, z, kappa, u, r),
    }


class _Along:
    """Derivatives along (xbar, ybar, zbar, kappabar, ubar) at one grid step."""

    def __init__(self, spec: ModelSpec, bundle: PathBundle, base: BackwardSolution):
        self.spec = spec
        self.bundle = bundle
        self.base = base
        self.k = None
        self.vals = None

    def get(self, k: int) -> dict:
        if self.k != k:
            b = self.bundle
            t = b.grid.times[k]
            x = b.x[k]
            r = b.regime[k].astype(np.int64)
            u = b.controls(k)
            kk = min(k, b.grid.n_steps - 1)
            y = self.base.y[k][:, 0]
            z = self.base.z[kk][:, 0, :]
            kap = self.base.kappa[kk][:, 0, :]
            v = scalar_derivatives(self.spec, t, x, u, r)
            v.update(generator_derivatives(self.spec, t, x, y, z, kap, u, r))
            v["lam"] = b.generator.intensities[r]
            v["dgx"] = np.zeros_like(v["gx"])
            self.k, self.vals = k, v
        return self.vals


def pi4(v: dict, p, q, s):
    """Stacked vector (1, p, p sigma_x + q, [p gamma_x^j + s_j + dgamma_x^j]_j), shape (N, 3 + D)."""
    n = p.shape[0]
    return np.concatenate(
        [np.ones((n, 1)), p[:, None], (p * v["sx"] + q)[:, None], p[:, None] * v["gx"] + s + v["dgx"]], axis=1
    )


def generator_F(v: dict, p, q, s):
    """First-order adjoint generator, transcribed term by term."""
    fk, gx, lam = v["fk"], v["gx"], v["lam"]
    return (
        (v["bx"] + v["fy"] + v["fz"] * v["sx"] + (fk * gx).sum(axis=1)) * p
        + (v["sx"] + v["fz"]) * q
        + ((gx * lam + fk) * s).sum(axis=1)
        + (fk * v["dgx"]).sum(axis=1)
        + v["fx"]
    )


def generator_G(v: dict, p, q, s, P, Q, S):
    """Second-order adjoint generator, transcribed term by term."""
    fk, gx, gxx, lam, sx = v["fk"], v["gx"], v["gxx"], v["lam"], v["sx"]
    Pc = P[:, None]
    pc = p[:, None]
    a9 = pc * gxx + s * gxx + 2 * Pc * gx + Pc * gx**2 + S + 2 * S * gx + S * gx**2
    w = pi4(v, p, q, s)
    return (
        (2 * v["bx"] + sx**2 + (gx**2 * lam).sum(axis=1) + v["fy"] + v["fz"] * 2 * sx) * P
        + (2 * sx + v["fz"]) * Q
        + v["bxx"] * p
        + (q + v["fz"] * p) * v["sxx"]
        + ((gxx * s + S * gx**2 + 2 * S * gx) * lam).sum(axis=1)
        + (fk * a9).sum(axis=1)
        + np.einsum("na,nab,nb->n", w, v["D2f"], w)
    )


# ---------------------------------------------------------------- adjoints


@dataclass
class RecursiveAdjointSet:
    """First order (p, q, s) and second order (P, Q, S) recursive adjoints.

    p, P (n + 1, N); q, Q (n, N); s, S (n, N, D). base holds (ybar, zbar, kappabar).
    """

    p: np.ndarray
    q: np.ndarray
    s: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    base: BackwardSolution
    first: BackwardSolution
    second: BackwardSolution

    @property
    def bundle(self) -> PathBundle:
        return self.base.bundle

    def deviation(self, p=0.0, q=0.0, s=0.0, P=0.0, Q=0.0, S=0.0):
        """Largest absolute deviation of each component from reference values."""
        return {
            "p": float(np.abs(self.p - p).max()),
            "q": float(np.abs(self.q - q).max()),
            "s": float(np.abs(self.s - s).max()),
            "P": float(np.abs(self.P - P).max()),
            "Q": float(np.abs(self.Q - Q).max()),
            "S": float(np.abs(self.S - S).max()),
        }


def solve_recursive_adjoints(spec: ModelSpec, bundle: PathBundle, degree: int = 3, picard: int = 1,
                             base: Optional[BackwardSolution] = None) -> RecursiveAdjointSet:
    """Solve the cost equation, then the first and the second order recursive adjoints."""
    _require_scalar(spec)
    if base is None:
        base = solve_bsde(spec, bundle, degree, picard)
    along = _Along(spec, bundle, base)
    xT = bundle.x[-1]
    rT = bundle.regime[-1].astype(np.int64)

    def drv1(k, y, z, kap):
        return generator_F(along.get(k), y[:, 0], z[:, 0, 0], kap[:, 0, :])[:, None]

    first = backward_sweep(bundle, spec.terminal_value_x(xT, rT)[:, 0], drv1, degree, picard)
    p, q, s = first.y[:, :, 0], first.z[:, :, 0, 0], first.kappa[:, :, 0, :]

    def drv2(k, y, z, kap):
        return generator_G(along.get(k), p[k], q[k], s[k], y[:, 0], z[:, 0, 0], kap[:, 0, :])[:, None]

    second = backward_sweep(bundle, spec.terminal_value_xx(xT, rT)[:, 0, 0], drv2, degree, picard)
    return RecursiveAdjointSet(p, q, s, second.y[:, :, 0], second.z[:, :, 0, 0], second.kappa[:, :, 0, :],
                               base, first, second)


def build_generators(spec: ModelSpec, bundle: PathBundle, adjoints: RecursiveAdjointSet):
    """F and G evaluated along the bundle, shape (n, N) each."""
    _require_scalar(spec)
    along = _Along(spec, bundle, adjoints.base)
    a = adjoints
    n = bundle.grid.n_steps
    F = np.empty((n, bundle.n_paths))
    G = np.empty((n, bundle.n_paths))
    for k in range(n):
        v = along.get(k)
        F[k] = generator_F(v, a.p[k], a.q[k], a.s[k])
        G[k] = generator_G(v, a.p[k], a.q[k], a.s[k], a.P[k], a.Q[k], a.S[k])
    return F, G


# ---------------------------------------------------------------- coefficient processes


def kappa_shift(p, s, P, S, dgamma, lam):
    """Per-target jump shift (p + s_j) dgamma_j + 1/2 (P + S_j) dgamma_j^2, zero where lambda_j = 0."""
    out = (p[:, None] + s) * dgamma + 0.5 * (P[:, None] + S) * dgamma**2
    return np.where(lam > 0, out, 0.0)


class VariationalBsdeTerms:
    """Coefficient processes of the backward expansion, evaluated lazily per step.

    terms(k) returns the dict with A1..A13, Pi4, F, G and the spike increments
    at step k; the perturbed-solution terms Pi1..Pi3 are added when a solution
    under u^eps is supplied.
    """

    def __init__(self, spec: ModelSpec, bundle: PathBundle, adjoints: RecursiveAdjointSet,
                 spike: SpikePerturbation, var: Optional[VariationPaths] = None,
                 perturbed: Optional[BackwardSolution] = None):
        _require_scalar(spec)
        self.spec = spec
        self.bundle = bundle
        self.adj = adjoints
        self.spike = spike.snapped(bundle.grid)
        self.n_tau, self.n_eps = self.spike.window_steps(bundle.grid)
        self.var = var
        self.perturbed = perturbed
        self.along = _Along(spec, bundle, adjoints.base)
        self.spiked = apply_spike(bundle.policy, self.spike)

    def on_window(self, k: int) -> bool:
        return self.n_tau <= k < self.n_tau + self.n_eps

    def increments(self, k: int) -> dict:
        """Spike increments at (xbar, u^eps) versus (xbar, ubar); zero off the window."""
        b = self.bundle
        N = b.n_paths
        D = b.generator.n_regimes
        zero = {"db": np.zeros(N), "ds": np.zeros(N), "dg": np.zeros((N, D)),
                "dbx": np.zeros(N), "dsx": np.zeros(N), "dgx": np.zeros((N, D))}
        if not self.on_window(k):
            return zero
        sp = self.spec
        t = b.grid.times[k]
        x = b.x[k]
        r = b.regime[k].astype(np.int64)
        ub = b.policy(t, x, r)
        ue = self.spiked(t, x, r)
        b0, s0, g0 = sp.coefficients(t, x, ub, r)
        b1, s1, g1 = sp.coefficients(t, x, ue, r)
        d0 = scalar_derivatives(sp, t, x, ub, r)
        d1 = scalar_derivatives(sp, t, x, ue, r)
        return {"db": b1[:, 0] - b0[:, 0], "ds": s1[:, 0, 0] - s0[:, 0, 0], "dg": g1[:, 0, :] - g0[:, 0, :],
                "dbx": d1["bx"] - d0["bx"], "dsx": d1["sx"] - d0["sx"], "dgx": d1["gx"] - d0["gx"]}

    def terms(self, k: int) -> dict:
        a = self.adj
        kk = min(k, self.bundle.grid.n_steps - 1)
        v = dict(self.along.get(k))
        inc = self.increments(k)
        v["dgx"] = inc["dgx"]
        p, q, s, P, Q, S = a.p[k], a.q[kk], a.s[kk], a.P[k], a.Q[kk], a.S[kk]
        bx, bxx, sx, sxx, gx, gxx, lam = v["bx"], v["bxx"], v["sx"], v["sxx"], v["gx"], v["gxx"], v["lam"]
        db, ds, dg, dbx, dsx, dgx = inc["db"], inc["ds"], inc["dg"], inc["dbx"], inc["dsx"], inc["dgx"]
        Pc, pc = P[:, None], p[:, None]
        F = generator_F(v, p, q, s)
        G = generator_G(v, p, q, s, P, Q, S)
        t = {"F": F, "G": G, "Pi4": pi4(v, p, q, s), "indicator": float(self.on_window(k))}
        t.update(inc)
        t["A1"] = (p * db + ds * q + 0.5 * P * ds**2
                   + ((dg * s + 0.5 * (Pc + S) * dg**2) * lam).sum(axis=1))
        t["A2"] = p * bx + q * sx + (gx * s * lam).sum(axis=1) - F
        t["A3"] = (bxx * p + q * sxx + 2 * P * bx + P * sx**2 + P * (gx**2 * lam).sum(axis=1) + 2 * Q * sx - G
                   + ((gxx * s + S * gx**2 + 2 * S * gx) * lam).sum(axis=1))
        t["A4"] = (p * dbx + q * dsx + P * db + Q * ds
                   + ((dgx * s + Pc * gx * dg + S * dg + S * dg * gx) * lam).sum(axis=1) + P * ds)
        t["A5"] = p * sx + q
        t["A6"] = p * sxx + Q + 2 * P * sx
        t["A7"] = p * dsx + P * ds
        t["A8"] = pc * gx + s + dgx
        t["A9"] = pc * gxx + s * gxx + 2 * Pc * gx + Pc * gx**2 + S + 2 * S * gx + S * gx**2
        t["A10"] = (pc + s) * dgx + Pc * dg + Pc * dg * gx + S * dg + S * dg * gx
        if self.var is not None:
            x1, x2 = self.var.x1[k][:, 0], self.var.x2[k][:, 0]
            ind = t["indicator"]
            t["A11"] = p * (x1 + x2) + 0.5 * P * x1**2
            t["A12"] = t["A5"] * (x1 + x2) + 0.5 * t["A6"] * x1**2 + t["A7"] * x1 * ind
            t["A13"] = (t["A8"] * (x1 + x2)[:, None] + 0.5 * t["A9"] * (x1**2)[:, None]
                        + t["A10"] * (x1 * ind)[:, None])
            if self.perturbed is not None:
                t.update(self._pi_terms(k, t))
        return t

    def _pi_terms(self, k: int, t: dict) -> dict:
        """Pi1, Pi2, Pi3 from the solution under u^eps (bars with eps as in the expansion)."""
        sp, b, a = self.spec, self.bundle, self.adj
        kk = min(k, b.grid.n_steps - 1)
        pe = self.perturbed
        tt = b.grid.times[k]
        r = b.regime[k].astype(np.int64)
        xe = pe.bundle.x[k]
        ue = pe.bundle.controls(k)
        ub = b.controls(k)
        ind = t["indicator"]
        x1, x2 = self.var.x1[k][:, 0], self.var.x2[k][:, 0]
        ye, ze, ke = pe.y[k][:, 0], pe.z[kk][:, 0, 0], pe.kappa[kk][:, 0, :]
        lam = b.generator.intensities[r]
        ybar_e = ye - (a.p[k] * (x1 + x2) + 0.5 * a.P[k] * x1**2)
        zbar_e = ze - (a.p[k] * t["ds"] * ind + t["A12"])
        kbar_e = ke - (kappa_shift(a.p[k], a.s[kk], a.P[k], a.S[kk], t["dg"], lam) * ind + t["A13"])
        xs = (b.x[k][:, 0] + x1 + x2)[:, None]
        y0, z0, k0 = a.base.y[k][:, 0], a.base.z[kk][:, 0, 0], a.base.kappa[kk][:, 0, :]
        f = lambda x, y, z, kap, u: sp.generator(tt, x, y, z[:, None], kap, u, r)
        mid = f(xs, ybar_e + t["A11"], zbar_e + t["A12"], kbar_e + t["A13"], ub)
        bar = f(xs, y0 + t["A11"], z0 + t["A12"], k0 + t["A13"], ub)
        return {"Pi1": f(xe, ye, ze, ke, ue) - mid, "Pi2": mid - bar,
                "Pi3": bar, "ybar_eps": ybar_e, "zbar_eps": zbar_e, "kappabar_eps": kbar_e}

    def source(self, k: int) -> np.ndarray:
        """A1 plus the generator increment at the shifted (z, kappa), supported on the window."""
        N = self.bundle.n_paths
        if not self.on_window(k):
            return np.zeros(N)
        t = self.terms(k)
        a, b, sp = self.adj, self.bundle, self.spec
        tt = b.grid.times[k]
        x = b.x[k]
        r = b.regime[k].astype(np.int64)
        ub = b.policy(tt, x, r)
        ue = self.spiked(tt, x, r)
        y0, z0, k0 = a.base.y[k][:, 0], a.base.z[k][:, 0, :], a.base.kappa[k][:, 0, :]
        lam = b.generator.intensities[r]
        zs = z0 + (a.p[k] * t["ds"])[:, None]
        ks = k0 + kappa_shift(a.p[k], a.s[k], a.P[k], a.S[k], t["dg"], lam)
        return t["A1"] + sp.generator(tt, x, y0, zs, ks, ue, r) - sp.generator(tt, x, y0, z0, k0, ub, r)

    def transcription_residuals(self, k: int):
        """Residuals of the first and second order Taylor matching conditions at step k."""
        t = self.terms(k)
        v = self.along.get(k)
        a = self.adj
        r1 = t["A2"] + v["fx"] + v["fy"] * a.p[k] + v["fz"] * t["A5"] + (v["fk"] * t["A8"]).sum(axis=1)
        w = t["Pi4"]
        r2 = (t["A3"] + v["fy"] * a.P[k] + v["fz"] * t["A6"] + (v["fk"] * t["A9"]).sum(axis=1)
              + np.einsum("na,nab,nb->n", w, v["D2f"], w))
        return r1, r2


# ---------------------------------------------------------------- H-function and condition check


def big_h(spec: ModelSpec, t, x, y, z, kappa, u, ubar, regime, p, q, s, P, S, intensities):
    """The recursive H-function.

    p b(u) + sigma(u) q + 1/2 P dsigma^2 + sum_j [gamma_j(u) s_j + 1/2 (P + S_j) dgamma_j^2] lambda_j
    + f(x, y, z + p dsigma, kappa + [(p + s_j) dgamma_j + 1/2 (P + S_j) dgamma_j^2]_j, u),
    with dsigma, dgamma the coefficient differences between u and ubar at x.

    Args:
        z: (N,) or (N, 1); kappa, s, S, intensities: (N, D); the rest (N,).
    """
    b1, s1, g1 = spec.coefficients(t, x, u, regime)
    _, s0, g0 = spec.coefficients(t, x, ubar, regime)
    ds = s1[:, 0, 0] - s0[:, 0, 0]
    dg = g1[:, 0, :] - g0[:, 0, :]
    lam = intensities
    z = np.asarray(z).reshape(-1, 1)
    out = p * b1[:, 0] + s1[:, 0, 0] * q + 0.5 * P * ds**2
    out = out + ((g1[:, 0, :] * s + 0.5 * (P[:, None] + S) * dg**2) * lam).sum(axis=1)
    zs = z + (p * ds)[:, None]
    ks = kappa + kappa_shift(p, s, P, S, dg, lam)
    return out + spec.generator(t, x, y, zs, ks, u, regime)


def check_recursive_max_condition(spec: ModelSpec, bundle: PathBundle, adjoints: RecursiveAdjointSet,
                                  controls=101, tolerance: float = 0.02, per_time: int = 100, seed: int = 0,
                                  threshold: float = 0.99) -> MaximumConditionReport:
    """Fraction of sampled (path, time) cells where H(u) >= H(ubar) - tolerance on the whole grid."""
    _require_scalar(spec)
    grid_u = spec.control_set.grid(controls) if np.ndim(controls) == 0 else np.asarray(controls, dtype=float)
    if grid_u.ndim == 1:
        grid_u = grid_u[:, None]
    if grid_u.shape[0] == 0:
        raise ValueError("empty control grid")
    a = adjoints
    n = bundle.grid.n_steps
    steps, paths = sample_cells(n, bundle.n_paths, per_time, seed)
    times = bundle.grid.times
    C, K = steps.size, grid_u.shape[0]
    t = times[steps]
    x = bundle.x[steps, paths]
    r = bundle.regime[steps, paths].astype(np.int64)
    ubar = np.empty((C, spec.control_dim))
    for k in np.unique(steps):
        sel = steps == k
        ubar[sel] = bundle.policy(times[k], x[sel], r[sel])
    lam = bundle.generator.intensities[r]
    args = [a.base.y[steps, paths, 0], a.base.z[steps, paths, 0, 0], a.base.kappa[steps, paths, 0, :]]
    adj = [a.p[steps, paths], a.q[steps, paths], a.s[steps, paths], a.P[steps, paths], a.S[steps, paths]]
    hbar = big_h(spec, t, x, *args, ubar, ubar, r, *adj, lam)
    vals = np.empty((C, K))
    chunk = max(1, 200000 // K)
    for lo in range(0, C, chunk):
        hi = min(C, lo + chunk)
        c = hi - lo
        rep = lambda v: np.repeat(v[lo:hi], K, axis=0)
        uu = np.tile(grid_u, (c, 1))
        vals[lo:hi] = big_h(spec, rep(t), rep(x), *[rep(v) for v in args], uu, rep(ubar), rep(r),
                            *[rep(v) for v in adj], rep(lam)).reshape(c, K)
    ok, gap, arg = grid_check(hbar, vals, grid_u, tolerance)
    frac = float(ok.mean())
    rows = report_rows(times, r, steps, ok, gap, arg, spec.n_regimes)
    return MaximumConditionReport(frac, frac >= threshold, tolerance, rows, gap, arg, steps, paths)


# ---------------------------------------------------------------- variational BSDE and chi


def solve_variational_bsde(spec: ModelSpec, bundle: PathBundle, spike: SpikePerturbation,
                           adjoints: RecursiveAdjointSet, degree: int = 3, picard: int = 1) -> BackwardSolution:
    """Linear equation with driver f_y yhat + f_z zhat + sum_j f_kappa^j kappahat_j + source on the window."""
    spike.validate(bundle.grid.horizon, spec.control_set)
    terms = VariationalBsdeTerms(spec, bundle, adjoints, spike)
    along = terms.along
    cache = {}

    def driver(k, y, z, kap):
        v = along.get(k)
        if k not in cache:
            cache.clear()
            cache[k] = terms.source(k)
        return (v["fy"] * y[:, 0] + v["fz"] * z[:, 0, 0] + (v["fk"] * kap[:, 0, :]).sum(axis=1) + cache[k])[:, None]

    return backward_sweep(bundle, np.zeros(bundle.n_paths), driver, degree, picard)


@dataclass
class ChiProcess:
    chi: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.chi[-1]


def chi_process(bundle: PathBundle, fy: Callable, fz: Callable, fk: Callable) -> ChiProcess:
    """Linear forward equation d chi = chi (f_y dt + f_z dW + sum_j f_kappa^j / lambda_j dPhiTilde_j), chi(0) = 1.

    Coefficients are frozen over each step (taken at the step start); the step
    factor is the exact stochastic exponential of the frozen increments, with
    one factor (1 + f_kappa^j / lambda_j) per jump into j.

    Args:
        fy, fz, fk: callables k -> (N,), (N,), (N, D).
    """
    dr = bundle.drivers
    n, N = bundle.grid.n_steps, bundle.n_paths
    dt = bundle.grid.dt
    lam_all = bundle.generator.intensities
    chi = np.empty((n + 1, N))
    chi[0] = 1.0
    for k in range(n):
        r = dr.regime[k].astype(np.int64)
        lam = lam_all[r]
        a, c, g = fy(k), fz(k), np.asarray(fk(k), dtype=float)
        own = np.zeros_like(lam, dtype=bool)
        own[np.arange(N), r] = True
        bad = (lam <= 0) & ~own & (g != 0)
        if bad.any():
            i = int(np.flatnonzero(bad.any(axis=1))[0])
            j = int(np.flatnonzero(bad[i])[0])
            raise ModelInconsistencyError(
                f"generator has a kappa_{j + 1} sensitivity but regime {r[i] + 1} cannot jump to regime {j + 1}")
        w = np.where(lam > 0, g / np.where(lam > 0, lam, 1.0), 0.0)
        log = (a - 0.5 * c**2) * dt + c * dr.dW[k][:, 0] - (w * dr.comp[k]).sum(axis=1)
        jump = np.prod((1.0 + w) ** dr.jumps[k], axis=1)
        chi[k + 1] = chi[k] * np.exp(log) * jump
    return ChiProcess(chi)


def chi_along(spec: ModelSpec, bundle: PathBundle, base: BackwardSolution) -> ChiProcess:
    """chi with f_y, f_z, f_kappa evaluated along the reference solution."""
    along = _Along(spec, bundle, base)
    return chi_process(bundle, lambda k: along.get(k)["fy"], lambda k: along.get(k)["fz"],
                       lambda k: along.get(k)["fk"])


@dataclass
class DualityResult:
    eps: float
    tau: float
    v: np.ndarray
    yhat0: float
    chi_integral: float
    chi_se: float

    @property
    def gap(self) -> float:
        return self.yhat0 - self.chi_integral

    def normalized_gap(self) -> float:
        return abs(self.gap) / self.eps

    def row(self):
        return [self.eps, self.tau, float(self.v[0]), self.yhat0, self.chi_integral, self.gap, self.chi_se]

    header = ["eps", "tau", "v", "yhat0", "chi_integral", "gap", "chi_integral_se"]


def duality_check(spec: ModelSpec, bundle: PathBundle, adjoints: RecursiveAdjointSet, spike: SpikePerturbation,
                  degree: int = 3, chi: Optional[ChiProcess] = None) -> DualityResult:
    """Compare yhat(0) with E int chi (A1 + generator increment) over the window."""
    sp = spike.snapped(bundle.grid)
    sol = solve_variational_bsde(spec, bundle, sp, adjoints, degree)
    chi = chi if chi is not None else chi_along(spec, bundle, adjoints.base)
    terms = VariationalBsdeTerms(spec, bundle, adjoints, sp)
    acc = np.zeros(bundle.n_paths)
    for k in range(terms.n_tau, terms.n_tau + terms.n_eps):
        acc += chi.chi[k] * terms.source(k) * bundle.grid.dt
    return DualityResult(sp.eps, sp.tau, sp.v, float(sol.y0[0]), float(acc.mean()),
                         float(acc.std(ddof=1) / np.sqrt(acc.size)))


# ---------------------------------------------------------------- rates


RECURSIVE_QUANTITIES = ("perturbed_energy", "linearized_energy", "remainder_energy")
RECURSIVE_EXPECTED = {"perturbed_energy": (1.8, 2.2), "linearized_energy": (1.8, 2.2), "remainder_energy": (2.3, np.inf), "cost_gap": (1.3, np.inf)}


def _energy(y, z, kap, lam, dt):
    """Per path sup_n |y_n|^2 + sum_n (|z_n|^2 + sum_j |kappa_j|^2 lambda_j) dt."""
    return (y**2).max(axis=0) + ((z**2 + (kap**2 * lam).sum(axis=2)) * dt).sum(axis=0)


def expansion_triple(terms: VariationalBsdeTerms, perturbed: BackwardSolution):
    """(yhat^eps, zhat^eps, kappahat^eps) reconstructed from the solution under u^eps."""
    b = terms.bundle
    a = terms.adj
    n, N = b.grid.n_steps, b.n_paths
    D = b.generator.n_regimes
    lam_all = b.generator.intensities
    x1, x2 = terms.var.x1[:, :, 0], terms.var.x2[:, :, 0]
    yh = perturbed.y[:, :, 0] - a.base.y[:, :, 0] - a.p * (x1 + x2) - 0.5 * a.P * x1**2
    zh = np.empty((n, N))
    kh = np.empty((n, N, D))
    for k in range(n):
        t = terms.terms(k)
        ind = t["indicator"]
        lam = lam_all[b.regime[k].astype(np.int64)]
        zh[k] = perturbed.z[k][:, 0, 0] - a.base.z[k][:, 0, 0] - (a.p[k] * t["ds"] * ind + t["A12"])
        shift = kappa_shift(a.p[k], a.s[k], a.P[k], a.S[k], t["dg"], lam) * ind
        kh[k] = np.where(lam > 0, perturbed.kappa[k][:, 0, :] - a.base.kappa[k][:, 0, :] - shift - t["A13"], 0.0)
    return yh, zh, kh


def estimate_recursive_rates(spec: ModelSpec, bundle: PathBundle, tau: float, v, eps_list,
                             adjoints: Optional[RecursiveAdjointSet] = None, degree: int = 3) -> RatesReport:
    """Slopes of the three expansion energies and of the cost-consistency gap over spike widths."""
    _require_scalar(spec)
    adj = adjoints or solve_recursive_adjoints(spec, bundle, degree)
    dt = bundle.grid.dt
    lam = bundle.generator.intensities[bundle.regime[:-1].astype(np.int64)]
    names = RECURSIVE_QUANTITIES + ("cost_gap",)
    vals = {q: [] for q in names}
    ses = {q: [] for q in names}
    eps_arr = []
    J0 = float(adj.base.y0[0])
    for eps in eps_list:
        sp = SpikePerturbation(tau, eps, v).snapped(bundle.grid)
        eps_arr.append(sp.eps)
        var = solve_variational_eqs(spec, bundle, sp)
        be = resimulate(bundle, apply_spike(bundle.policy, sp))
        pert = solve_bsde(spec, be, degree)
        lin = solve_variational_bsde(spec, bundle, sp, adj, degree)
        terms = VariationalBsdeTerms(spec, bundle, adj, sp, var)
        yh, zh, kh = expansion_triple(terms, pert)
        y2, z2, k2 = lin.y[:, :, 0], lin.z[:, :, 0, 0], lin.kappa[:, :, 0, :]
        e = {
            "perturbed_energy": _energy(yh, zh, kh, lam, dt),
            "linearized_energy": _energy(y2, z2, k2, lam, dt),
            "remainder_energy": _energy(yh - y2, zh - z2, kh - k2, lam, dt),
        }
        for q in RECURSIVE_QUANTITIES:
            vals[q].append(float(e[q].mean()))
            ses[q].append(float(e[q].std(ddof=1) / np.sqrt(e[q].size)))
        gap = float(pert.y0[0]) - J0 - float(lin.y0[0])
        pw = pert.pathwise[:, 0] - adj.base.pathwise[:, 0] - lin.pathwise[:, 0]
        vals["cost_gap"].append(abs(gap))
        ses["cost_gap"].append(float(pw.std(ddof=1) / np.sqrt(pw.size)))
        del var, be, pert, lin, yh, zh, kh
    eps_arr = np.array(eps_arr)
    slopes, slope_se = {}, {}
    for q in names:
        arr = np.array(vals[q])
        if np.all(arr > 0) and np.all(np.isfinite(arr)):
            slopes[q], slope_se[q] = fit_slope(eps_arr, arr)
        else:
            slopes[q], slope_se[q] = np.nan, np.inf
    return RatesReport(eps_arr, {q: np.array(vals[q]) for q in names}, {q: np.array(ses[q]) for q in names},
                       slopes, slope_se, windows=dict(RECURSIVE_EXPECTED))
