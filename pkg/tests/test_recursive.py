import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from regime_mp.chain import RegimeGenerator, sample_chains
from regime_mp.forward import TimeGrid, simulate_forward
from regime_mp.model import ControlSet, constant_policy
from regime_mp.models import example1, example2, linear_quadratic, random_lq_params
from regime_mp.recursive import (RECURSIVE_EXPECTED, ModelInconsistencyError, VariationalBsdeTerms, big_h,
                                 check_recursive_max_condition, chi_process, duality_check,
                                 estimate_recursive_rates, solve_recursive_adjoints)
from regime_mp.spike import SpikePerturbation

GEN = RegimeGenerator([[-1.0, 1.0], [2.0, -2.0]])


def ex2_bundle(u=0.0, n_paths=4000, n_steps=64, seed=3):
    spec = example2(GEN, nu=(0.5, 1.0))
    ch = sample_chains(GEN, 0, 1.0, n_paths, seed=1)
    return spec, simulate_forward(spec, constant_policy(u, spec.control_set), ch, TimeGrid(1.0, n_steps), seed=seed)


@pytest.fixture(scope="module")
def ex2():
    spec, b = ex2_bundle()
    return spec, b, solve_recursive_adjoints(spec, b)


def test_example2_adjoints_closed_form(ex2):
    _, _, adj = ex2
    dev = adj.deviation(p=1.0)
    assert max(dev.values()) < 1e-8


def test_example2_zero_control_passes(ex2):
    spec, b, adj = ex2
    rep = check_recursive_max_condition(spec, b, adj, per_time=30)
    assert rep.fraction >= 0.99


def test_example2_wrong_candidate_fails():
    spec, b = ex2_bundle(u=1.0, n_paths=2000, n_steps=32)
    adj = solve_recursive_adjoints(spec, b)
    assert check_recursive_max_condition(spec, b, adj, per_time=30).fraction < 0.5


def test_duality_gap(ex2):
    spec, b, adj = ex2
    d = duality_check(spec, b, adj, SpikePerturbation(0.25, 0.0625, [1.0]))
    assert d.normalized_gap() <= 0.05
    assert d.header == ["eps", "tau", "v", "yhat0", "chi_integral", "gap", "chi_integral_se"]


def test_big_h_at_candidate_is_generator(ex2):
    spec, b, adj = ex2
    k = 10
    x, r = b.x[k], b.regime[k].astype(int)
    u = np.zeros((b.n_paths, 1))
    lam = GEN.intensities[r]
    y, z, kap = adj.base.y[k, :, 0], adj.base.z[k, :, 0, 0], adj.base.kappa[k, :, 0, :]
    h = big_h(spec, 0.0, x, y, z, kap, u, u, r, adj.p[k], adj.q[k], adj.s[k], adj.P[k], adj.S[k], lam)
    # u = 0 switches the state coefficients off, leaving f itself
    np.testing.assert_allclose(h, spec.generator(0.0, x, y, z[:, None], kap, u, r))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_transcription_residuals_random_lq(seed):
    params = random_lq_params(seed, 2)
    spec = linear_quadratic(params, 2)
    ch = sample_chains(GEN, 0, 1.0, 2000, seed=seed)
    b = simulate_forward(spec, constant_policy(0.2, spec.control_set), ch, TimeGrid(1.0, 16), seed=seed, x0=[0.5])
    adj = solve_recursive_adjoints(spec, b)
    terms = VariationalBsdeTerms(spec, b, adj, SpikePerturbation(0.25, 0.125, [-0.7]))
    for k in (0, 4, 5, 12):
        r1, r2 = terms.transcription_residuals(k)
        scale = 1 + np.abs(adj.p[k]).max() + np.abs(adj.P[k]).max()
        assert np.abs(r1).max() <= 1e-10 * scale
        assert np.abs(r2).max() <= 1e-10 * scale


def test_recursive_adjoints_match_ode():
    # dx = a x dt + s0 dW, f = fy y + fq x^2 / 2, g = H x^2 / 2:
    # p = phi x and P = phi with phi' = -fq - (fy + 2a) phi, phi(T) = H
    a, s0, fy, fq, H = 0.3, 0.5, 0.2, 0.5, 1.0
    spec = linear_quadratic({"a": a, "s0": s0, "fy": fy, "fq": fq, "h": H}, 2)
    ch = sample_chains(GEN, 0, 1.0, 4000, seed=4)
    b = simulate_forward(spec, constant_policy(0.0, spec.control_set), ch, TimeGrid(1.0, 200), seed=4, x0=[1.0])
    adj = solve_recursive_adjoints(spec, b)
    sol = solve_ivp(lambda t, v: -fq - (fy + 2 * a) * v, (1.0, 0.0), [H], dense_output=True, rtol=1e-10)
    phi = sol.sol(b.grid.times)[0]
    np.testing.assert_allclose(adj.P.mean(axis=1), phi, rtol=0.01)
    rel = np.abs(adj.p - phi[:, None] * b.x[:, :, 0]).max() / np.abs(phi[:, None] * b.x[:, :, 0]).max()
    assert rel < 0.02


def brownian(n_paths=20000, n_steps=20, seed=2):
    spec = example1()
    ch = sample_chains(GEN, 0, 1.0, n_paths, seed=seed)
    return simulate_forward(spec, constant_policy(1.0, spec.control_set), ch, TimeGrid(1.0, n_steps), seed=seed)


def test_chi_constant_fz_is_exponential_martingale():
    b = brownian()
    c = 0.7
    N = b.n_paths
    chi = chi_process(b, lambda k: np.zeros(N), lambda k: np.full(N, c), lambda k: np.zeros((N, 2))).chi
    W = b.x[:, :, 0]
    t = b.grid.times[:, None]
    np.testing.assert_allclose(chi, np.exp(c * W - 0.5 * c * c * t), rtol=1e-12)
    assert abs(chi[-1].mean() - 1) <= 4 * chi[-1].std() / np.sqrt(N)


def test_chi_constant_fy_is_deterministic():
    b = brownian(n_paths=100)
    N = b.n_paths
    chi = chi_process(b, lambda k: np.full(N, 0.4), lambda k: np.zeros(N), lambda k: np.zeros((N, 2))).chi
    np.testing.assert_allclose(chi, np.exp(0.4 * b.grid.times)[:, None] * np.ones((1, N)), rtol=1e-12)


def _jump_chi(n_steps, n_paths=20000):
    b = brownian(n_paths=n_paths, n_steps=n_steps)
    N = b.n_paths
    w = np.array([0.3, -0.4])  # f_kappa / lambda per target

    def fk(k):
        return w[None, :] * GEN.intensities[b.regime[k].astype(int)]

    chi = chi_process(b, lambda k: np.zeros(N), lambda k: np.zeros(N), fk).chi
    dr = b.drivers
    exact = np.prod((1 + w) ** dr.jumps.sum(axis=0), axis=1) * np.exp(-(w * dr.comp.sum(axis=0)).sum(axis=1))
    return b, chi, exact


def test_chi_jump_weights_exact_without_jumps():
    b, chi, exact = _jump_chi(20)
    quiet = b.drivers.jumps.sum(axis=(0, 2)) == 0
    assert quiet.any()
    np.testing.assert_allclose(chi[-1, quiet], exact[quiet], rtol=1e-12)
    assert abs(chi[-1].mean() - 1) <= 4 * chi[-1].std() / np.sqrt(chi.shape[1])


def test_chi_frozen_weights_converge():
    errs = []
    for n in (20, 80):
        _, chi, exact = _jump_chi(n, n_paths=5000)
        errs.append(np.sqrt(np.mean((chi[-1] - exact) ** 2)))
    # an in-step switch mismatches an O(1) factor with probability O(dt): RMS error of order 1/2
    assert errs[1] < errs[0] / 1.6


def test_chi_rejects_weight_on_impossible_jump():
    gen = RegimeGenerator([[0.0, 0.0], [1.0, -1.0]])
    spec = example1()
    ch = sample_chains(gen, 0, 1.0, 50, seed=1)
    b = simulate_forward(spec, constant_policy(1.0, spec.control_set), ch, TimeGrid(1.0, 5), seed=1)
    with pytest.raises(ModelInconsistencyError, match="cannot jump"):
        chi_process(b, lambda k: np.zeros(50), lambda k: np.zeros(50), lambda k: np.ones((50, 2)))


@given(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
def test_chi_positive_for_small_weights(fy, fz):
    b = brownian(n_paths=200, n_steps=8, seed=5)
    N = b.n_paths
    chi = chi_process(b, lambda k: np.full(N, fy), lambda k: np.full(N, fz),
                      lambda k: 0.5 * GEN.intensities[b.regime[k].astype(int)]).chi
    assert np.all(chi > 0)


def test_recursive_rates_small_scale():
    spec, b = ex2_bundle(n_paths=4000, n_steps=128)
    rep = estimate_recursive_rates(spec, b, 0.25, [1.0], [0.125, 0.0625, 0.03125])
    assert rep.within("perturbed_energy") and rep.within("linearized_energy")
    assert set(rep.slopes) == set(RECURSIVE_EXPECTED)


def test_non_scalar_model_rejected():
    spec = linear_quadratic(random_lq_params(0, 2), 2)
    ch = sample_chains(GEN, 0, 1.0, 50, seed=1)
    b = simulate_forward(spec, constant_policy(0.0, spec.control_set), ch, TimeGrid(1.0, 4), seed=1)
    with pytest.raises(Exception):
        solve_recursive_adjoints(example1(), b)
