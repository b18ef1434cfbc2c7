import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regime_mp.chain import sample_chains
from regime_mp.forward import TimeGrid, resimulate, simulate_forward
from regime_mp.maxprinciple import (check_maximum_condition, h_function, hamiltonian, solve_first_order_adjoint,
                                    solve_second_order_adjoint)
from regime_mp.model import ControlSet, constant_policy
from regime_mp.models import example1, linear_quadratic

U = ControlSet.box([0.0], [1.0])


@pytest.fixture(scope="module")
def ex1_solution():
    from regime_mp.chain import RegimeGenerator
    g = RegimeGenerator([[-1.0, 1.0], [2.0, -2.0]])
    spec = example1()
    ch = sample_chains(g, 0, 1.0, 5000, seed=1)
    b = simulate_forward(spec, constant_policy(1.0, U), ch, TimeGrid(1.0, 50), seed=3)
    first = solve_first_order_adjoint(spec, b)
    return spec, b, first, solve_second_order_adjoint(spec, b, first)


def test_example1_first_order_adjoint(ex1_solution):
    _, b, first, _ = ex1_solution
    np.testing.assert_allclose(first.p[:, :, 0], b.x[:, :, 0], atol=1e-9)
    np.testing.assert_allclose(first.q[..., 0, 0], 1.0, atol=1e-9)
    assert np.abs(first.s).max() < 1e-9


def test_example1_second_order_adjoint(ex1_solution):
    _, _, _, second = ex1_solution
    np.testing.assert_allclose(second.P[..., 0, 0], 1.0, atol=1e-9)
    assert np.abs(second.Q).max() < 1e-9 and np.abs(second.S).max() < 1e-9


def test_example1_candidate_passes(ex1_solution):
    spec, b, first, second = ex1_solution
    rep = check_maximum_condition(spec, b, first, second, per_time=50)
    assert rep.fraction >= 0.99 and rep.passed
    assert np.all(np.abs(rep.argmin - 1.0) < 1e-12)


def test_wrong_candidate_fails(two_regime):
    spec = example1(sigma=(0.8, 0.6))
    ch = sample_chains(two_regime, 0, 1.0, 3000, seed=1)
    b = simulate_forward(spec, constant_policy(0.0, U), ch, TimeGrid(1.0, 40), seed=3)
    first = solve_first_order_adjoint(spec, b)
    second = solve_second_order_adjoint(spec, b, first)
    rep = check_maximum_condition(spec, b, first, second, per_time=50)
    assert rep.fraction < 0.5 and not rep.passed
    # with ubar = 0 the H-function at u = 1 is -1 + sigma_i^2 / 2 < -0.5
    x = np.zeros((2, 1))
    r = np.array([0, 1])
    zeros = np.zeros((2, 1, 1))
    val = h_function(spec, 0.0, x, np.ones((2, 1)), np.zeros((2, 1)), r, np.zeros((2, 1)), zeros,
                     np.zeros((2, 1, 2)), np.ones((2, 1, 1)), np.zeros((2, 1, 1, 2)), two_regime.intensities[r])
    np.testing.assert_allclose(val, [-1 + 0.32, -1 + 0.18])


def test_linear_adjoints_match_ode():
    # dx = a x dt + s0 dW, h = x^2 / 2: p = exp(2a(T-t)) x, q = exp(2a(T-t)) s0, P = exp(2a(T-t))
    from regime_mp.chain import RegimeGenerator
    g = RegimeGenerator([[-1.0, 1.0], [1.0, -1.0]])
    a, s0 = 0.4, 0.5
    spec = linear_quadratic({"a": a, "s0": s0, "q": 0.0, "r": 0.0, "h": 1.0}, 2, ControlSet.box([-1.0], [1.0]))
    ch = sample_chains(g, 0, 1.0, 4000, seed=2)
    b = simulate_forward(spec, constant_policy(0.0, spec.control_set), ch, TimeGrid(1.0, 200), seed=5, x0=[1.0])
    first = solve_first_order_adjoint(spec, b)
    second = solve_second_order_adjoint(spec, b, first)
    growth = np.exp(2 * a * (1 - b.grid.times))
    err_p = np.abs(first.p[:, :, 0] - growth[:, None] * b.x[:, :, 0]).max()
    assert err_p < 0.02 * np.abs(b.x).max() * growth[0]
    np.testing.assert_allclose(first.q[:, :, 0, 0].mean(axis=1), s0 * growth[:-1], rtol=0.01)
    np.testing.assert_allclose(second.P[:, :, 0, 0].mean(axis=1), growth, rtol=0.01)


def test_hamiltonian_formula(two_regime):
    spec = example1(sigma=(0.8, 0.6), gamma=[[0, 0.5], [0.4, 0]], beta=0.5)
    g = np.random.default_rng(0)
    n = 20
    x = g.normal(size=(n, 1))
    u = g.random((n, 1))
    r = g.integers(0, 2, n)
    p, q, s = g.normal(size=(n, 1)), g.normal(size=(n, 1, 1)), g.normal(size=(n, 1, 2))
    lam = two_regime.intensities[r]
    sig = np.array([0.8, 0.6])[r]
    gam = np.array([[0, 0.5], [0.4, 0]])[r]
    expect = (-u[:, 0] - 0.5 * np.tanh(x[:, 0]) * p[:, 0] + u[:, 0] * sig * q[:, 0, 0]
              + (u * gam * s[:, 0, :] * lam).sum(axis=1))
    np.testing.assert_allclose(hamiltonian(spec, 0.0, x, u, r, p, q, s, lam), expect)


@given(st.integers(0, 10_000))
def test_h_function_vanishes_at_candidate(seed):
    from regime_mp.chain import RegimeGenerator
    gen = RegimeGenerator([[-1.0, 1.0], [2.0, -2.0]])
    spec = example1(sigma=(0.8, 0.6), gamma=[[0, 0.5], [0.4, 0]], beta=0.5)
    g = np.random.default_rng(seed)
    n = 5
    x, u = g.normal(size=(n, 1)), g.random((n, 1))
    r = g.integers(0, 2, n)
    args = (g.normal(size=(n, 1)), g.normal(size=(n, 1, 1)), g.normal(size=(n, 1, 2)),
            g.normal(size=(n, 1, 1)), g.normal(size=(n, 1, 1, 2)), gen.intensities[r])
    hb = h_function(spec, 0.1, x, u, u, r, *args)
    H = hamiltonian(spec, 0.1, x, u, r, *args[:3], args[5])
    from regime_mp.maxprinciple import quadratic_terms
    _, sb, gb = spec.coefficients(0.1, x, u, r)
    np.testing.assert_allclose(hb, H - quadratic_terms(args[3], args[4], sb, gb, args[5]))


def test_report_rows_use_one_based_regimes(ex1_solution):
    spec, b, first, second = ex1_solution
    rep = check_maximum_condition(spec, b, first, second, per_time=10)
    assert rep.header == ["time", "regime", "frac_pass", "worst_gap", "argmin_u"]
    assert {row[1] for row in rep.rows} <= {1, 2}


def test_adjoints_on_resimulated_bundle_differ(ex1_solution):
    spec, b, first, _ = ex1_solution
    b2 = resimulate(b, constant_policy(0.5, U))
    f2 = solve_first_order_adjoint(spec, b2)
    np.testing.assert_allclose(f2.q[..., 0, 0], 0.5, atol=1e-9)
