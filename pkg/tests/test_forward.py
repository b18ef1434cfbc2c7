import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regime_mp.chain import RegimeGenerator, occupation_times, sample_chain, sample_chains
from regime_mp.forward import (PureJumpProcess, TestFunction, TimeGrid, build_drivers, fit_slope,
                               quadratic_covariation, resimulate, simulate_forward, summary_rows,
                               verify_ito_formula)
from regime_mp.model import ControlSet, constant_policy
from regime_mp.models import example1, expression_model

U = ControlSet.box([0.0], [1.0])


def pure_jump_model(gen, loads):
    D = gen.n_regimes
    consts = {f"g{j + 1}": [loads[i][j] for i in range(D)] for j in range(D)}
    return expression_model({"b": "0", "sigma": "0", "gamma": [f"g{j + 1}" for j in range(D)]}, D, consts,
                            generator=gen, control_set=U)


def affine_phi(a, c):
    a, c = np.asarray(a, float), np.asarray(c, float)
    return TestFunction(
        value=lambda t, x, r: a[r] + c[r] * x[:, 0],
        dt=lambda t, x, r: np.zeros(x.shape[0]),
        dx=lambda t, x, r: c[r][:, None],
        dxx=lambda t, x, r: np.zeros((x.shape[0], 1, 1)),
    )


def smooth_phi(w):
    w = np.asarray(w, float)
    return TestFunction(
        value=lambda t, x, r: w[r] * np.sin(x[:, 0]) * (1 + t),
        dt=lambda t, x, r: w[r] * np.sin(x[:, 0]),
        dx=lambda t, x, r: (w[r] * np.cos(x[:, 0]) * (1 + t))[:, None],
        dxx=lambda t, x, r: (-w[r] * np.sin(x[:, 0]) * (1 + t))[:, None, None],
    )


def test_unit_control_state_is_brownian(two_regime):
    spec = example1()
    ch = sample_chains(two_regime, 0, 1.0, 500, seed=1)
    b = simulate_forward(spec, constant_policy(1.0, U), ch, TimeGrid(1.0, 20), seed=2, x0=[0.4])
    W = np.concatenate([np.zeros((1, 500)), np.cumsum(b.drivers.dW[:, :, 0], axis=0)])
    np.testing.assert_allclose(b.x[:, :, 0], 0.4 + W, atol=1e-12)


def test_brownian_increments_are_standard(two_regime):
    ch = sample_chains(two_regime, 0, 1.0, 20000, seed=1)
    dr = build_drivers(ch, TimeGrid(1.0, 8), 1, seed=3)
    dw = dr.dW[:, :, 0]
    assert abs(dw.mean()) < 4 * np.sqrt(0.125 / dw.size)
    assert abs(dw.var() / 0.125 - 1) < 0.02


def test_drivers_independent_of_workers(three_regime):
    ch = sample_chains(three_regime, 0, 1.0, 2500, seed=1)
    a = build_drivers(ch, TimeGrid(1.0, 16), 1, seed=7, workers=1)
    b = build_drivers(ch, TimeGrid(1.0, 16), 1, seed=7, workers=3)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.ev_dw, b.ev_dw)


def test_regime_array_matches_chain(three_regime):
    ch = sample_chains(three_regime, 1, 1.0, 300, seed=4)
    dr = build_drivers(ch, TimeGrid(1.0, 10), 1, seed=1)
    for k, t in enumerate(TimeGrid(1.0, 10).times):
        np.testing.assert_array_equal(dr.regime[k], ch.state_at(t))


def test_pure_jump_state_is_exact(three_regime):
    loads = [[0, 0.5, -0.3], [0.2, 0, 0.7], [-0.4, 0.1, 0]]
    spec = pure_jump_model(three_regime, loads)
    ch = sample_chains(three_regime, 0, 2.0, 50, seed=6)
    b = simulate_forward(spec, constant_policy(0.5, U), ch, TimeGrid(2.0, 7), seed=1)
    G = np.array(loads)
    lam = three_regime.intensities
    for i in range(50):
        path = ch.path(i)
        jump = sum(G[a, s] for a, s in zip(path.from_states, path.states))
        # between jumps x drifts by -sum_j G_aj lambda_aj per unit time
        drift = -(occupation_times(path, 2.0, 3) * (G * lam).sum(axis=1)).sum()
        assert b.x[-1, i, 0] == pytest.approx(jump + drift, abs=1e-12)


def test_ito_pure_jump_regime_dependent_phi(three_regime):
    loads = [[0, 0.5, -0.3], [0.2, 0, 0.7], [-0.4, 0.1, 0]]
    spec = pure_jump_model(three_regime, loads)
    ch = sample_chains(three_regime, 0, 1.0, 2000, seed=8)
    b = simulate_forward(spec, constant_policy(0.5, U), ch, TimeGrid(1.0, 5), seed=1, x0=[0.3])
    res = verify_ito_formula(affine_phi([1.0, -2.0, 0.5], [0.7, 1.3, -0.4]), b)
    assert np.abs(res.residuals[0]).max() <= 1e-10


def test_ito_diffusion_residual_converges(two_regime):
    spec = example1(sigma=(0.8, 0.6), gamma=[[0, 0.5], [0.4, 0]], beta=0.5)
    ch = sample_chains(two_regime, 0, 1.0, 4000, seed=2)
    bundles = [simulate_forward(spec, constant_policy(0.7, U), ch, TimeGrid(1.0, n), seed=5, x0=[0.2])
               for n in (16, 32, 64, 128)]
    res = verify_ito_formula(smooth_phi([1.0, -0.5]), bundles)
    assert res.slope >= 0.4
    assert np.all(np.diff(res.rms) < 0)


def test_fit_slope_exact_power():
    h = np.array([0.1, 0.05, 0.025])
    s, se = fit_slope(h, 3 * h**2)
    assert s == pytest.approx(2.0) and se < 1e-10


def test_quadratic_covariation_product_rule(three_regime):
    X1 = PureJumpProcess(0.3, np.array([[0, 0.5, -0.3], [0.2, 0, 0.7], [-0.4, 0.1, 0]]))
    X2 = PureJumpProcess(-1.0, np.array([[0, 1.0, 2.0], [-0.5, 0, 0.3], [0.6, 0.9, 0]]))
    for seed in range(5):
        path = sample_chain(three_regime, seed % 3, 3.0, seed)
        res = quadratic_covariation(X1, X2, path, three_regime, np.linspace(0, 3, 13))
        assert np.abs(res.residual).max() <= 1e-10
        jumps = [X1.loadings[a, s] * X2.loadings[a, s] for a, s in zip(path.from_states, path.states)]
        assert res.bracket[-1] == pytest.approx(sum(jumps), abs=1e-12)


@given(st.integers(0, 1000))
def test_self_bracket_nonnegative_nondecreasing(seed):
    gen = RegimeGenerator([[-1.5, 1.0, 0.5], [0.7, -1.0, 0.3], [0.2, 1.8, -2.0]])
    g = np.random.default_rng(seed)
    X = PureJumpProcess(0.0, g.normal(size=(3, 3)))
    res = quadratic_covariation(X, X, sample_chain(gen, 0, 2.0, seed), gen, np.linspace(0, 2, 9))
    assert np.all(res.bracket >= 0) and np.all(np.diff(res.bracket) >= 0)


def test_quadratic_covariation_rejects_diffusions(two_regime):
    with pytest.raises(TypeError):
        quadratic_covariation(np.zeros(3), PureJumpProcess(0.0, np.zeros((2, 2))), sample_chain(two_regime, 0, 1.0, 0),
                              two_regime, [1.0])


def test_running_cost_closed_form(two_regime):
    # sigma = 1, gamma = 0: J(c) = -c + c^2 / 2 + 1
    spec = example1()
    ch = sample_chains(two_regime, 0, 1.0, 40000, seed=3)
    for c in (0.3, 1.0):
        b = simulate_forward(spec, constant_policy(c, U), ch, TimeGrid(1.0, 10), seed=4, running_cost=True)
        s = b.cost_samples()
        assert abs(s.mean() - (-c + c * c / 2 + 1)) <= 4 * s.std() / np.sqrt(s.size)


def test_resimulate_reuses_drivers(two_regime):
    ch = sample_chains(two_regime, 0, 1.0, 100, seed=3)
    b = simulate_forward(example1(), constant_policy(1.0, U), ch, TimeGrid(1.0, 10), seed=4)
    b2 = resimulate(b, constant_policy(0.5, U))
    assert b2.drivers is b.drivers
    np.testing.assert_allclose(b2.x, 0.5 * b.x)


def test_summary_rows_header(two_regime):
    ch = sample_chains(two_regime, 0, 1.0, 100, seed=3)
    b = simulate_forward(example1(), constant_policy(1.0, U), ch, TimeGrid(1.0, 4), seed=4)
    header, rows = summary_rows(b)
    assert header == ["time", "mean_x", "var_x", "regime_occupancy_1", "regime_occupancy_2", "se_mean_x"]
    assert len(rows) == 5 and all(abs(r[3] + r[4] - 1) < 1e-12 for r in rows)
