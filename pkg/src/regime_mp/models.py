"""Built-in models and the expression-based custom model."""
from __future__ import annotations

import numpy as np

from .chain import RegimeGenerator
from .expr import Expression
from .model import ControlSet, ModelSpec


def _col(a, n):
    return np.broadcast_to(np.asarray(a, dtype=float), (n,))


def example1(sigma=(1.0, 1.0), gamma=None, beta: float = 0.0, control_set: ControlSet | None = None) -> ModelSpec:
    """Scalar controlled system dx = -beta tanh(x) dt + u sigma_i dW + u gamma_i . dPhiTilde.

    Costs l = -u and h = x^2/2 + 1 (the squared norm of a unit regime vector).
    beta = 0 gives the classical example with x-independent coefficients.

    Args:
        sigma: per-regime diffusion scale, length D.
        gamma: (D, D) jump loadings; row i holds the jump sizes per unit control
            when leaving regime i (diagonal ignored). Defaults to zero.
        beta: strength of the control-free contracting drift.
        control_set: defaults to the box [0, 1].
    """
    sig = np.asarray(sigma, dtype=float)
    D = sig.shape[0]
    gam = np.zeros((D, D)) if gamma is None else np.array(gamma, dtype=float)
    gam = gam - np.diag(np.diag(gam))
    U = control_set or ControlSet.box([0.0], [1.0])

    def drift(t, x, u, r):
        return -beta * np.tanh(x)

    def drift_x(t, x, u, r):
        return (-beta / np.cosh(x) ** 2)[:, :, None]

    def drift_xx(t, x, u, r):
        return (2.0 * beta * np.tanh(x) / np.cosh(x) ** 2)[:, :, None, None]

    def diffusion(t, x, u, r):
        return (u[:, 0] * sig[r])[:, None, None]

    def jump(t, x, u, r):
        return (u[:, :1] * gam[r])[:, None, :]

    def zeros(shape):
        return lambda t, x, u, r: np.zeros((x.shape[0],) + shape)

    def running_cost(t, x, u, r):
        return -u[:, 0]

    def terminal_cost(x, r):
        return 0.5 * x[:, 0] ** 2 + 1.0

    derivs = {
        "drift_x": drift_x,
        "drift_xx": drift_xx,
        "diffusion_x": zeros((1, 1, 1)),
        "diffusion_xx": zeros((1, 1, 1, 1)),
        "jump_x": zeros((1, D, 1)),
        "jump_xx": zeros((1, D, 1, 1)),
        "running_cost_x": zeros((1,)),
        "running_cost_xx": zeros((1, 1)),
        "terminal_cost_x": lambda x, r: x.copy(),
        "terminal_cost_xx": lambda x, r: np.ones((x.shape[0], 1, 1)),
    }
    return ModelSpec(1, 1, D, 1, drift, diffusion, jump, U, running_cost, terminal_cost,
                     derivatives=derivs, name="example1")


def example1_intensity_weight(sigma, gamma, generator: RegimeGenerator) -> np.ndarray:
    """Per-regime curvature sigma_i^2 + sum_j gamma_ij^2 lambda_ij of the `example1` model family."""
    sig = np.asarray(sigma, dtype=float)
    gam = np.zeros_like(generator.matrix) if gamma is None else np.asarray(gamma, dtype=float)
    return sig**2 + (gam**2 * generator.intensities).sum(axis=1)


def example2(generator: RegimeGenerator, nu=None, A=None, control_set: ControlSet | None = None) -> ModelSpec:
    """Recursive-utility example dx = u dW + u nu . dPhiTilde with f = z + sum_j kappa_j^2 lambda_j.

    Terminal value g(x, e_i) = x + A_ii (the quadratic form of the regime vector).
    """
    D = generator.n_regimes
    nu = np.ones(D) if nu is None else np.asarray(nu, dtype=float)
    A = np.zeros((D, D)) if A is None else np.asarray(A, dtype=float)
    lam = generator.intensities
    U = control_set or ControlSet.box([0.0], [1.0])

    def drift(t, x, u, r):
        return np.zeros_like(x)

    def diffusion(t, x, u, r):
        return u[:, :1, None].copy()

    def jump(t, x, u, r):
        return (u[:, :1] * nu[None, :])[:, None, :]

    def generator_fn(t, x, y, z, kappa, u, r):
        return z[:, 0] + (kappa**2 * lam[r]).sum(axis=1)

    def generator_grad(t, x, y, z, kappa, u, r):
        n = x.shape[0]
        out = np.zeros((n, 3 + D))
        out[:, 2] = 1.0
        out[:, 3:] = 2.0 * kappa * lam[r]
        return out

    def generator_hess(t, x, y, z, kappa, u, r):
        n = x.shape[0]
        out = np.zeros((n, 3 + D, 3 + D))
        idx = np.arange(3, 3 + D)
        out[:, idx, idx] = 2.0 * lam[r]
        return out

    def terminal_value(x, r):
        return x[:, 0] + np.diag(A)[r]

    def zeros(shape):
        return lambda t, x, u, r: np.zeros((x.shape[0],) + shape)

    derivs = {
        "drift_x": zeros((1, 1)),
        "drift_xx": zeros((1, 1, 1)),
        "diffusion_x": zeros((1, 1, 1)),
        "diffusion_xx": zeros((1, 1, 1, 1)),
        "jump_x": zeros((1, D, 1)),
        "jump_xx": zeros((1, D, 1, 1)),
        "generator_grad": generator_grad,
        "generator_hess": generator_hess,
        "terminal_value_x": lambda x, r: np.ones((x.shape[0], 1)),
        "terminal_value_xx": lambda x, r: np.zeros((x.shape[0], 1, 1)),
    }
    return ModelSpec(1, 1, D, 1, drift, diffusion, jump, U, generator=generator_fn,
                     terminal_value=terminal_value, derivatives=derivs, name="example2")


LQ_KEYS = ("a", "b", "c", "e", "s0", "q", "r", "h", "fy", "fz", "fq", "fr")


def linear_quadratic(params: dict, n_regimes: int, control_set: ControlSet | None = None) -> ModelSpec:
    """Scalar linear-quadratic model with regime-dependent coefficients.

    dx = (a x + b u) dt + (c x + e u + s0) dW + sum_j (gx_ij x + gu_ij u) dPhiTilde_j,
    l = (q x^2 + r u^2)/2, h = H x^2/2, and the recursive pair
    f = fy y + fz z + sum_j fk_ij kappa_j + (fq x^2 + fr u^2)/2, g = H x^2/2.
    Scalar parameters are per regime (length D); gx, gu, fk are (D, D).
    """
    D = int(n_regimes)
    p = {k: np.broadcast_to(np.asarray(params.get(k, 0.0), dtype=float), (D,)).copy() for k in LQ_KEYS}
    if "h" not in params:
        p["h"] = np.ones(D)
    gx = np.broadcast_to(np.asarray(params.get("gx", 0.0), dtype=float), (D, D)).copy()
    gu = np.broadcast_to(np.asarray(params.get("gu", 0.0), dtype=float), (D, D)).copy()
    fk = np.broadcast_to(np.asarray(params.get("fk", 0.0), dtype=float), (D, D)).copy()
    for m in (gx, gu, fk):
        np.fill_diagonal(m, 0.0)
    U = control_set or ControlSet.box([-1.0], [1.0])

    def drift(t, x, u, r):
        return p["a"][r, None] * x + p["b"][r, None] * u[:, :1]

    def diffusion(t, x, u, r):
        return (p["c"][r, None] * x + p["e"][r, None] * u[:, :1] + p["s0"][r, None])[:, :, None]

    def jump(t, x, u, r):
        return (gx[r] * x + gu[r] * u[:, :1])[:, None, :]

    def const(vals, shape):
        return lambda t, x, u, r: np.broadcast_to(np.asarray(vals)[r].reshape((-1,) + shape), (x.shape[0],) + shape).copy()

    def zeros(shape):
        return lambda t, x, u, r: np.zeros((x.shape[0],) + shape)

    def running_cost(t, x, u, r):
        return 0.5 * (p["q"][r] * x[:, 0] ** 2 + p["r"][r] * u[:, 0] ** 2)

    def terminal_cost(x, r):
        return 0.5 * p["h"][r] * x[:, 0] ** 2

    def generator_fn(t, x, y, z, kappa, u, r):
        return (p["fy"][r] * y + p["fz"][r] * z[:, 0] + (fk[r] * kappa).sum(axis=1)
                + 0.5 * (p["fq"][r] * x[:, 0] ** 2 + p["fr"][r] * u[:, 0] ** 2))

    def generator_grad(t, x, y, z, kappa, u, r):
        out = np.zeros((x.shape[0], 3 + D))
        out[:, 0] = p["fq"][r] * x[:, 0]
        out[:, 1] = p["fy"][r]
        out[:, 2] = p["fz"][r]
        out[:, 3:] = fk[r]
        return out

    def generator_hess(t, x, y, z, kappa, u, r):
        out = np.zeros((x.shape[0], 3 + D, 3 + D))
        out[:, 0, 0] = p["fq"][r]
        return out

    derivs = {
        "drift_x": const(p["a"], (1, 1)),
        "drift_xx": zeros((1, 1, 1)),
        "diffusion_x": const(p["c"], (1, 1, 1)),
        "diffusion_xx": zeros((1, 1, 1, 1)),
        "jump_x": lambda t, x, u, r: gx[r][:, None, :, None].copy(),
        "jump_xx": zeros((1, D, 1, 1)),
        "running_cost_x": lambda t, x, u, r: p["q"][r, None] * x,
        "running_cost_xx": const(p["q"], (1, 1)),
        "terminal_cost_x": lambda x, r: p["h"][r, None] * x,
        "terminal_cost_xx": lambda x, r: np.broadcast_to(p["h"][r].reshape(-1, 1, 1), (x.shape[0], 1, 1)).copy(),
        "generator_grad": generator_grad,
        "generator_hess": generator_hess,
        "terminal_value_x": lambda x, r: p["h"][r, None] * x,
        "terminal_value_xx": lambda x, r: np.broadcast_to(p["h"][r].reshape(-1, 1, 1), (x.shape[0], 1, 1)).copy(),
    }
    return ModelSpec(1, 1, D, 1, drift, diffusion, jump, U, running_cost, terminal_cost,
                     generator_fn, terminal_value=lambda x, r: 0.5 * p["h"][r] * x[:, 0] ** 2,
                     derivatives=derivs, name="linear_quadratic")


def random_lq_params(seed: int, n_regimes: int, scale: float = 0.5) -> dict:
    """Bounded random linear-quadratic coefficients (used for oracle tests)."""
    g = np.random.default_rng(seed)
    D = n_regimes
    out = {k: g.uniform(-scale, scale, D) for k in ("a", "b", "c", "e", "fy", "fz")}
    out["s0"] = g.uniform(0.2, 0.6, D)
    out["q"] = g.uniform(0.0, 1.0, D)
    out["r"] = g.uniform(0.5, 1.0, D)
    out["h"] = g.uniform(0.5, 1.5, D)
    out["fq"] = g.uniform(0.0, 1.0, D)
    out["fr"] = g.uniform(0.5, 1.0, D)
    out["gx"] = g.uniform(-scale, scale, (D, D))
    out["gu"] = g.uniform(-scale, scale, (D, D))
    out["fk"] = g.uniform(-scale, scale, (D, D))
    return out


def expression_model(
    exprs: dict,
    n_regimes: int,
    constants: dict | None = None,
    generator: RegimeGenerator | None = None,
    control_set: ControlSet | None = None,
) -> ModelSpec:
    """Scalar model (L = d = k = 1) from expression strings.

    exprs keys: b, sigma, gamma (list of D strings), and optionally l, h, f, g.
    Variables: t, x, u in all coefficients; y, z, kappa_1..kappa_D in f;
    lambda_1..lambda_D (current-regime intensities) everywhere when a
    generator is given. Derivatives use the finite-difference fallback.
    """
    D = int(n_regimes)
    consts = dict(constants or {})
    for k, v in consts.items():
        a = np.asarray(v, dtype=float)
        if a.ndim > 1 or (a.ndim == 1 and a.shape[0] != D):
            raise ValueError(f"constant {k!r} must be a scalar or a list of length {D}")
    lam = generator.intensities if generator is not None else np.zeros((D, D))
    kappas = [f"kappa_{j + 1}" for j in range(D)]
    lams = [f"lambda_{j + 1}" for j in range(D)]
    base = ["t", "x", "u"] + lams
    U = control_set or ControlSet.box([0.0], [1.0])

    def comp(key, extra=()):
        e = Expression(exprs[key], consts)
        e.check_names(base + list(extra))
        return e

    b = comp("b")
    sig = comp("sigma")
    gam_src = exprs["gamma"]
    if isinstance(gam_src, str):
        gam_src = [gam_src] * D
    if len(gam_src) != D:
        raise ValueError(f"gamma needs {D} expressions")
    gams = [Expression(s, consts) for s in gam_src]
    for e in gams:
        e.check_names(base)

    def env(t, x, u, r):
        n = x.shape[0]
        out = {"t": np.broadcast_to(np.asarray(t, dtype=float), (n,)), "x": x[:, 0], "u": u[:, 0]}
        for j in range(D):
            out[lams[j]] = lam[r, j]
        return out

    def drift(t, x, u, r):
        return _col(b(env(t, x, u, r), r), x.shape[0])[:, None].copy()

    def diffusion(t, x, u, r):
        return _col(sig(env(t, x, u, r), r), x.shape[0])[:, None, None].copy()

    def jump(t, x, u, r):
        e = env(t, x, u, r)
        n = x.shape[0]
        return np.stack([_col(g(e, r), n) for g in gams], axis=1)[:, None, :]

    kw = {}
    if "l" in exprs and "h" in exprs:
        le = comp("l")
        he = Expression(exprs["h"], consts)
        he.check_names(["x"] + lams)
        kw["running_cost"] = lambda t, x, u, r: _col(le(env(t, x, u, r), r), x.shape[0]).copy()

        def terminal_cost(x, r):
            e = {"x": x[:, 0], **{lams[j]: lam[r, j] for j in range(D)}}
            return _col(he(e, r), x.shape[0]).copy()

        kw["terminal_cost"] = terminal_cost
    if "f" in exprs and "g" in exprs:
        fe = comp("f", ["y", "z"] + kappas)
        ge = Expression(exprs["g"], consts)
        ge.check_names(["x"] + lams)

        def generator_fn(t, x, y, z, kappa, u, r):
            e = env(t, x, u, r)
            e["y"] = y
            e["z"] = z[:, 0]
            for j in range(D):
                e[kappas[j]] = kappa[:, j]
            return _col(fe(e, r), x.shape[0]).copy()

        def terminal_value(x, r):
            e = {"x": x[:, 0], **{lams[j]: lam[r, j] for j in range(D)}}
            return _col(ge(e, r), x.shape[0]).copy()

        kw["generator"] = generator_fn
        kw["terminal_value"] = terminal_value
    return ModelSpec(1, 1, D, 1, drift, diffusion, jump, U, name="custom", **kw)
