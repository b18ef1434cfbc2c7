import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from regime_mp.bsde import (random_linear_instance, recursive_cost, solution_rows, solve_bsde, solve_linear_bsde,
                            verify_apriori_estimate)
from regime_mp.chain import sample_chains
from regime_mp.forward import TimeGrid, simulate_forward
from regime_mp.model import ControlSet, constant_policy
from regime_mp.models import example1, example2
from regime_mp.regression import Basis, joint_projection, monomials

U = ControlSet.box([0.0], [1.0])


def brownian_bundle(gen, n_paths=4000, n_steps=20, seed=1, initial=0):
    ch = sample_chains(gen, initial, 1.0, n_paths, seed)
    return simulate_forward(example1(sigma=np.ones(gen.n_regimes)), constant_policy(1.0, U), ch,
                            TimeGrid(1.0, n_steps), seed=seed)


def test_monomial_count():
    assert len(monomials(2, 3)) == 10
    assert len(monomials(1, 0)) == 1


def test_joint_projection_recovers_exact_span():
    g = np.random.default_rng(0)
    n = 3000
    x = g.normal(size=(n, 1))
    dw = g.normal(size=(n, 1)) * 0.1
    jumps = (g.random((n, 2)) < 0.2).astype(float)
    dpt = jumps - 0.2 * 0.1
    y = (1 + x[:, 0] ** 2 + (2 - x[:, 0]) * dw[:, 0] + 0.5 * dpt[:, 0] - x[:, 0] * dpt[:, 1])[:, None]
    cond, z, kap, flagged, _ = joint_projection(x, dw, dpt, y, 2, jumps)
    np.testing.assert_allclose(cond[:, 0], 1 + x[:, 0] ** 2, atol=1e-8)
    np.testing.assert_allclose(z[:, 0, 0], 2 - x[:, 0], atol=1e-8)
    np.testing.assert_allclose(kap[:, 0, 0], 0.5, atol=1e-8)
    np.testing.assert_allclose(kap[:, 0, 1], -x[:, 0], atol=1e-8)


def test_rare_jump_block_is_dropped():
    g = np.random.default_rng(1)
    n = 500
    x = g.normal(size=(n, 1))
    jumps = np.zeros((n, 1))
    jumps[:3] = 1.0
    _, _, kap, _, _ = joint_projection(x, g.normal(size=(n, 1)), jumps - 0.01, g.normal(size=(n, 1)), 3, jumps)
    assert np.all(kap == 0)


def test_basis_degree_limited_by_rows():
    b = Basis.fit(np.random.default_rng(0).normal(size=(20, 2)), 3, 20)
    assert len(b.terms) * 4 <= 20


def test_martingale_terminal_gives_unit_z(two_regime):
    b = brownian_bundle(two_regime)
    sol = solve_linear_bsde(b, b.x[-1, :, 0])
    np.testing.assert_allclose(sol.y[:, :, 0], b.x[:, :, 0], atol=1e-9)
    np.testing.assert_allclose(sol.z[:, :, 0, 0], 1.0, atol=1e-9)
    assert np.abs(sol.kappa).max() < 1e-9


def test_constant_coefficient_linear_bsde(two_regime):
    # y' = -(a y + f), y(T) = 1  =>  y(0) = e^{aT} + f (e^{aT} - 1) / a
    b = brownian_bundle(two_regime, n_paths=500, n_steps=400)
    a, f = 0.7, -0.3
    sol = solve_linear_bsde(b, 1.0, A=a, F=f)
    exact = np.exp(a) + f * (np.exp(a) - 1) / a
    assert sol.y0[0] == pytest.approx(exact, abs=5e-3)


def test_regime_terminal_matches_transition_matrix(three_regime):
    # y(t) = (P(T - t) g)(alpha(t)), kappa_j = y(t, j) - y(t, alpha(t-))
    g = np.array([1.0, -2.0, 0.5])
    b = brownian_bundle(three_regime, n_paths=20000, n_steps=50, initial=1)
    sol = solve_linear_bsde(b, g[b.regime[-1].astype(int)])
    for k in (0, 25):
        t = b.grid.times[k]
        v = expm(three_regime.matrix * (1 - t)) @ g
        r = b.regime[k].astype(int)
        np.testing.assert_allclose(sol.y[k, :, 0], v[r], atol=0.03)
        for j in range(3):
            sel = (r != j) & (three_regime.intensities[r, j] > 0)
            if not sel.any():
                continue
            np.testing.assert_allclose(sol.kappa[k, sel, 0, j].mean(), (v[j] - v[r[sel]]).mean(), atol=0.05)


def example2_value_ode(gen, nu, c):
    """y = x + c (T - t) + v(t, alpha) with -v_i' = sum_j lambda_ij [(c nu_j + v_j - v_i)^2 + v_j - v_i]."""
    lam = gen.intensities

    def rhs(t, v):
        dv = v[None, :] - v[:, None]
        return -(lam * ((c * nu[None, :] + dv) ** 2 + dv)).sum(axis=1)

    sol = solve_ivp(rhs, (1.0, 0.0), np.zeros(gen.n_regimes), rtol=1e-10, atol=1e-12)
    return sol.y[:, -1]


def test_example2_recursive_cost_ode_oracle(two_regime):
    nu = np.array([0.5, 1.0])
    spec = example2(two_regime, nu=nu)
    ch = sample_chains(two_regime, 0, 1.0, 20000, seed=2)
    for c in (0.3, 0.8):
        b = simulate_forward(spec, constant_policy(c, spec.control_set), ch, TimeGrid(1.0, 100), seed=3)
        J, se = recursive_cost(solve_bsde(spec, b))
        exact = c + example2_value_ode(two_regime, nu, c)[0]
        assert abs(J - exact) <= 4 * se + 0.01 * c * c


def test_solution_rows(two_regime):
    b = brownian_bundle(two_regime, n_paths=300, n_steps=5)
    header, rows = solution_rows(solve_linear_bsde(b, b.x[-1, :, 0]))
    assert header == ["time", "mean_y", "mean_z", "mean_kappa_1", "mean_kappa_2", "se_mean_y"]
    assert len(rows) == 6


@given(st.floats(0.01, 100.0), st.sampled_from([1, 2]))
def test_apriori_ratio_is_scale_invariant(scale, k):
    inst = random_linear_instance(5, n_paths=500, n_steps=20)
    r1 = verify_apriori_estimate(inst.solve(), inst.xi, inst.F, k)
    r2 = verify_apriori_estimate(inst.solve(scale), scale * inst.xi, scale * inst.F, k)
    assert abs(r2.ratio / r1.ratio - 1) <= 1e-6
    assert r2.lhs == pytest.approx(scale ** (2 * k) * r1.lhs, rel=1e-6)


def test_apriori_zero_data():
    inst = random_linear_instance(3, n_paths=300, n_steps=10)
    r = verify_apriori_estimate(inst.solve(0.0), 0.0, 0.0, 1)
    assert r.lhs == 0 and r.ratio == 1.0


def test_apriori_rejects_k_zero():
    inst = random_linear_instance(3, n_paths=300, n_steps=10)
    with pytest.raises(ValueError):
        verify_apriori_estimate(inst.solve(), inst.xi, inst.F, 0)


def test_random_instance_coefficients_bounded():
    for s in range(5):
        inst = random_linear_instance(s, n_paths=100, n_steps=5)
        assert max(np.abs(inst.A).max(), np.abs(inst.B).max(), np.abs(inst.C).max()) <= 1.0
