"""Model specification, control sets, control policies and derivative checks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

FD_STEP = 1e-6
FD_STEP2 = 1e-4
CHECK_STEP = 1e-5
CHECK_TOL = 1e-5


# ---------------------------------------------------------------- control sets


@dataclass(frozen=True)
class ControlSet:
    """Compact control set: a box [lower, upper] in R^k or a finite list of points."""

    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None

    @staticmethod
    def box(lower, upper) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must have equal shape and lower <= upper")
        return ControlSet(lower=lo, upper=hi)

    @staticmethod
    def finite(points) -> "ControlSet":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] == 0:
            raise ValueError("finite control set must be non-empty")
        return ControlSet(points=pts)

    @property
    def dim(self) -> int:
        return self.points.shape[1] if self.points is not None else self.lower.shape[0]

    def project(self, u: np.ndarray) -> np.ndarray:
        """Clamp into the box, or snap to the nearest grid point."""
        if self.points is None:
            return np.clip(u, self.lower, self.upper)
        d2 = ((u[..., None, :] - self.points) ** 2).sum(axis=-1)
        return self.points[np.argmin(d2, axis=-1)]

    def contains(self, u: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        if self.points is None:
            return np.all((u >= self.lower - tol) & (u <= self.upper + tol), axis=-1)
        d2 = ((u[..., None, :] - self.points) ** 2).sum(axis=-1)
        return d2.min(axis=-1) <= tol**2

    def grid(self, n_points: int = 101) -> np.ndarray:
        """(K, k) array of candidate controls used for grid minimisation."""
        if self.points is not None:
            return self.points.copy()
        axes = [np.linspace(lo, hi, n_points) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        if self.points is not None:
            return self.points[gen.integers(0, self.points.shape[0], n)]
        return self.lower + (self.upper - self.lower) * gen.random((n, self.dim))


def as_controls(u, n: int, k: int) -> np.ndarray:
    """Broadcast a policy output to shape (n, k)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return np.full((n, k), float(u))
    if u.ndim == 1:
        if k == 1 and u.shape[0] == n:
            return u[:, None]
        return np.broadcast_to(u, (n, k)).copy()
    return np.broadcast_to(u, (n, k)).copy()


# ---------------------------------------------------------------- policies


@dataclass(frozen=True)
class ControlPolicy:
    """Control rule (t, x, regime) -> u, projected into the control set.

    kind is one of "constant", "deterministic" or "feedback".
    """

    rule: Callable
    kind: str
    control_set: ControlSet

    def __call__(self, t, x: np.ndarray, regime: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        u = as_controls(self.rule(t, x, regime), n, self.control_set.dim)
        return self.control_set.project(u)


def constant_policy(value, control_set: ControlSet) -> ControlPolicy:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return ControlPolicy(lambda t, x, r: v, "constant", control_set)


def regime_policy(values, control_set: ControlSet) -> ControlPolicy:
    """Control depending only on the current regime; values has shape (D,) or (D, k)."""
    vals = np.asarray(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return ControlPolicy(lambda t, x, r: vals[np.asarray(r)], "feedback", control_set)


def time_policy(fn: Callable, control_set: ControlSet) -> ControlPolicy:
    return ControlPolicy(lambda t, x, r: fn(t), "deterministic", control_set)


def feedback_policy(fn: Callable, control_set: ControlSet) -> ControlPolicy:
    return ControlPolicy(fn, "feedback", control_set)


# ---------------------------------------------------------------- model


def _steps(x: np.ndarray, base: float) -> np.ndarray:
    return base * np.maximum(1.0, np.abs(x))


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, base: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian; fn maps (N, L) -> (N, *S), result (N, *S, L)."""
    h = _steps(x, base)
    cols = []
    for k in range(x.shape[1]):
        xp = x.copy()
        xm = x.copy()
        xp[:, k] += h[:, k]
        xm[:, k] -= h[:, k]
        diff = np.asarray(fn(xp)) - np.asarray(fn(xm))
        hk = (2.0 * h[:, k]).reshape((-1,) + (1,) * (diff.ndim - 1))
        cols.append(diff / hk)
    return np.stack(cols, axis=-1)


def fd_hessian(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, base: float = FD_STEP2) -> np.ndarray:
    """Second differences of fn; fn maps (N, L) -> (N, *S), result (N, *S, L, L)."""
    h = _steps(x, base)
    f0 = np.asarray(fn(x))
    L = x.shape[1]
    shape = (-1,) + (1,) * (f0.ndim - 1)
    out = np.empty(f0.shape + (L, L))
    for k in range(L):
        hk = h[:, k].reshape(shape)
        xp = x.copy()
        xm = x.copy()
        xp[:, k] += h[:, k]
        xm[:, k] -= h[:, k]
        out[..., k, k] = (np.asarray(fn(xp)) - 2.0 * f0 + np.asarray(fn(xm))) / hk**2
        for m in range(k + 1, L):
            hm = h[:, m].reshape(shape)
            vals = []
            for sk, sm in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                xx = x.copy()
                xx[:, k] += sk * h[:, k]
                xx[:, m] += sm * h[:, m]
                vals.append(np.asarray(fn(xx)))
            mixed = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * hk * hm)
            out[..., k, m] = mixed
            out[..., m, k] = mixed
    return out


DERIVATIVE_NAMES = (
    "drift_x", "drift_xx", "diffusion_x", "diffusion_xx", "jump_x", "jump_xx",
    "running_cost_x", "running_cost_xx", "terminal_cost_x", "terminal_cost_xx",
    "generator_grad", "generator_hess", "terminal_value_x", "terminal_value_xx",
)


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of a controlled regime-switching forward-backward system.

    Shapes with N evaluation points: x (N, L), u (N, k), regime (N,) int,
    y (N,), z (N, d), kappa (N, D). drift -> (N, L); diffusion -> (N, L, d);
    jump -> (N, L, D) where column j is the state jump when the chain enters
    regime j. Costs return (N,). Derivative evaluators take the same
    arguments and append one axis of size L per x-derivative; the generator
    gradient and Hessian are taken over the packed vector (x, y, z, kappa).
    Missing derivatives fall back to central finite differences.
    """

    state_dim: int
    noise_dim: int
    n_regimes: int
    control_dim: int
    drift: Callable
    diffusion: Callable
    jump: Callable
    control_set: ControlSet
    running_cost: Optional[Callable] = None
    terminal_cost: Optional[Callable] = None
    generator: Optional[Callable] = None
    terminal_value: Optional[Callable] = None
    derivatives: Mapping[str, Callable] = field(default_factory=dict)
    name: str = "custom"

    def __post_init__(self):
        for v in (self.state_dim, self.noise_dim, self.n_regimes, self.control_dim):
            if int(v) < 1:
                raise ValueError("model dimensions must be positive integers")
        if self.control_set.dim != self.control_dim:
            raise ValueError("control set dimension differs from control_dim")
        unknown = set(self.derivatives) - set(DERIVATIVE_NAMES)
        if unknown:
            raise ValueError(f"unknown derivative evaluators: {sorted(unknown)}")

    @property
    def has_forward_cost(self) -> bool:
        return self.running_cost is not None and self.terminal_cost is not None

    @property
    def has_recursive(self) -> bool:
        return self.generator is not None and self.terminal_value is not None

    def require(self, what: str):
        if what == "forward_cost" and not self.has_forward_cost:
            raise ValueError("model lacks running/terminal cost (l, h)")
        if what == "recursive" and not self.has_recursive:
            raise ValueError("model lacks recursive generator and terminal value (f, g)")

    # packed generator argument w = (x, y, z, kappa)
    @property
    def packed_dim(self) -> int:
        return self.state_dim + 1 + self.noise_dim + self.n_regimes

    def unpack(self, w: np.ndarray):
        L, d = self.state_dim, self.noise_dim
        return w[:, :L], w[:, L], w[:, L + 1 : L + 1 + d], w[:, L + 1 + d :]

    def pack(self, x, y, z, kappa) -> np.ndarray:
        return np.concatenate([x, np.asarray(y)[:, None], z, kappa], axis=1)

    def _x_derivative(self, name, parent, order, t, x, u, r):
        fn = self.derivatives.get(name)
        if fn is not None:
            return np.asarray(fn(t, x, u, r), dtype=float)
        g = lambda xx: parent(t, xx, u, r)
        return fd_jacobian(g, x) if order == 1 else fd_hessian(g, x)

    def drift_x(self, t, x, u, r):
        return self._x_derivative("drift_x", self.drift, 1, t, x, u, r)

    def drift_xx(self, t, x, u, r):
        return self._x_derivative("drift_xx", self.drift, 2, t, x, u, r)

    def diffusion_x(self, t, x, u, r):
        return self._x_derivative("diffusion_x", self.diffusion, 1, t, x, u, r)

    def diffusion_xx(self, t, x, u, r):
        return self._x_derivative("diffusion_xx", self.diffusion, 2, t, x, u, r)

    def jump_x(self, t, x, u, r):
        return self._x_derivative("jump_x", self.jump, 1, t, x, u, r)

    def jump_xx(self, t, x, u, r):
        return self._x_derivative("jump_xx", self.jump, 2, t, x, u, r)

    def running_cost_x(self, t, x, u, r):
        return self._x_derivative("running_cost_x", self.running_cost, 1, t, x, u, r)

    def running_cost_xx(self, t, x, u, r):
        return self._x_derivative("running_cost_xx", self.running_cost, 2, t, x, u, r)

    def _terminal_derivative(self, name, parent, order, x, r):
        fn = self.derivatives.get(name)
        if fn is not None:
            return np.asarray(fn(x, r), dtype=float)
        g = lambda xx: parent(xx, r)
        return fd_jacobian(g, x) if order == 1 else fd_hessian(g, x)

    def terminal_cost_x(self, x, r):
        return self._terminal_derivative("terminal_cost_x", self.terminal_cost, 1, x, r)

    def terminal_cost_xx(self, x, r):
        return self._terminal_derivative("terminal_cost_xx", self.terminal_cost, 2, x, r)

    def terminal_value_x(self, x, r):
        return self._terminal_derivative("terminal_value_x", self.terminal_value, 1, x, r)

    def terminal_value_xx(self, x, r):
        return self._terminal_derivative("terminal_value_xx", self.terminal_value, 2, x, r)

    def _packed_generator(self, t, u, r):
        def g(w):
            x, y, z, k = self.unpack(w)
            return self.generator(t, x, y, z, k, u, r)
        return g

    def generator_grad(self, t, x, y, z, kappa, u, r):
        """Gradient of f over (x, y, z, kappa), shape (N, L + 1 + d + D)."""
        fn = self.derivatives.get("generator_grad")
        if fn is not None:
            return np.asarray(fn(t, x, y, z, kappa, u, r), dtype=float)
        return fd_jacobian(self._packed_generator(t, u, r), self.pack(x, y, z, kappa))

    def generator_hess(self, t, x, y, z, kappa, u, r):
        """Hessian of f over (x, y, z, kappa), shape (N, M, M)."""
        fn = self.derivatives.get("generator_hess")
        if fn is not None:
            return np.asarray(fn(t, x, y, z, kappa, u, r), dtype=float)
        return fd_hessian(self._packed_generator(t, u, r), self.pack(x, y, z, kappa))

    def coefficients(self, t, x, u, r):
        return (
            np.asarray(self.drift(t, x, u, r), dtype=float),
            np.asarray(self.diffusion(t, x, u, r), dtype=float),
            np.asarray(self.jump(t, x, u, r), dtype=float),
        )


# ---------------------------------------------------------------- validation


@dataclass
class ValidationReport:
    passed: bool
    mismatches: dict
    growth: dict
    failures: list

    def summary(self) -> str:
        status = "pass" if self.passed else "fail"
        worst = max(self.mismatches.values()) if self.mismatches else 0.0
        return f"{status}: worst derivative mismatch {worst:.3e}; failures {self.failures}"


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(1.0, np.abs(b))
    err = np.abs(a - b) / scale
    return float(np.nanmax(err)) if err.size else 0.0


def validate_spec(spec: ModelSpec, samples: int = 100, seed: int = 0, horizon: float = 1.0) -> ValidationReport:
    """Spot-check derivative consistency and growth of the supplied coefficients.

    Samples mix unit-scale points with points within one check step of the
    origin, so that kinks at zero are exposed. Supplied first derivatives are
    compared with central differences of the parent function; supplied second
    derivatives with central differences of the supplied first derivative
    (second differences of the parent when no first derivative is given).
    """
    gen = np.random.default_rng(seed)
    n = int(samples)
    L, d, D = spec.state_dim, spec.noise_dim, spec.n_regimes
    x = gen.normal(size=(n, L))
    near = gen.random(n) < 0.2
    x[near] *= 3e-6
    t = gen.random(n) * horizon
    u = spec.control_set.sample(n, gen)
    r = gen.integers(0, D, n)
    y = gen.normal(size=n)
    z = gen.normal(size=(n, d))
    k = gen.normal(size=(n, D))

    mism = {}
    funcs = {
        "drift": (spec.drift, True),
        "diffusion": (spec.diffusion, True),
        "jump": (spec.jump, True),
        "running_cost": (spec.running_cost, True),
        "terminal_cost": (spec.terminal_cost, False),
        "terminal_value": (spec.terminal_value, False),
    }
    for name, (fn, timed) in funcs.items():
        if fn is None:
            continue
        parent = (lambda xx, fn=fn: fn(t, xx, u, r)) if timed else (lambda xx, fn=fn: fn(xx, r))
        d1 = spec.derivatives.get(name + "_x")
        if d1 is not None:
            got = d1(t, x, u, r) if timed else d1(x, r)
            mism[name + "_x"] = _rel_err(got, fd_jacobian(parent, x, CHECK_STEP))
        d2 = spec.derivatives.get(name + "_xx")
        if d2 is not None:
            got = d2(t, x, u, r) if timed else d2(x, r)
            if d1 is not None:
                first = (lambda xx, d1=d1: d1(t, xx, u, r)) if timed else (lambda xx, d1=d1: d1(xx, r))
                ref = fd_jacobian(first, x, CHECK_STEP)
            else:
                ref = fd_hessian(parent, x, FD_STEP2)
            mism[name + "_xx"] = _rel_err(got, ref)
    if spec.generator is not None:
        w = spec.pack(x, y, z, k)
        pg = spec._packed_generator(t, u, r)
        g1 = spec.derivatives.get("generator_grad")
        if g1 is not None:
            mism["generator_grad"] = _rel_err(g1(t, x, y, z, k, u, r), fd_jacobian(pg, w, CHECK_STEP))
        g2 = spec.derivatives.get("generator_hess")
        if g2 is not None:
            if g1 is not None:
                ref = fd_jacobian(lambda ww: g1(t, *spec.unpack(ww), u, r), w, CHECK_STEP)
            else:
                ref = fd_hessian(pg, w, FD_STEP2)
            mism["generator_hess"] = _rel_err(g2(t, x, y, z, k, u, r), ref)

    # growth ratios |coef| / (1 + |x|) over the unit-scale samples
    growth = {}
    nx = 1.0 + np.linalg.norm(x, axis=1)
    b, s, g = spec.coefficients(t, x, u, r)
    growth["drift"] = float(np.max(np.linalg.norm(b.reshape(n, -1), axis=1) / nx))
    growth["diffusion"] = float(np.max(np.linalg.norm(s.reshape(n, -1), axis=1) / nx))
    growth["jump"] = float(np.max(np.linalg.norm(g.reshape(n, -1), axis=1) / nx))

    failures = sorted(name for name, v in mism.items() if not (v <= CHECK_TOL))
    finite = all(np.isfinite(v) for v in growth.values())
    if not finite:
        failures.append("growth")
    return ValidationReport(not failures, mism, growth, failures)
