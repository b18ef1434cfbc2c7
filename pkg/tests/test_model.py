import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from regime_mp.chain import RegimeGenerator
from regime_mp.expr import Expression, ExpressionError
from regime_mp.model import ControlSet, constant_policy, fd_hessian, fd_jacobian, regime_policy, validate_spec
from regime_mp.models import example1, example2, expression_model, linear_quadratic, random_lq_params


def test_box_projection_and_grid():
    U = ControlSet.box([0.0], [1.0])
    np.testing.assert_allclose(U.project(np.array([[-1.0], [0.3], [2.0]]))[:, 0], [0.0, 0.3, 1.0])
    g = U.grid(11)
    assert g.shape == (11, 1) and g[0, 0] == 0.0 and g[-1, 0] == 1.0


def test_finite_set_projects_to_nearest():
    U = ControlSet.finite([0.0, 0.5, 2.0])
    np.testing.assert_allclose(U.project(np.array([[0.2], [1.4], [9.0]]))[:, 0], [0.0, 2.0, 2.0])
    assert U.contains(np.array([[0.5], [0.4]])).tolist() == [True, False]


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        ControlSet.box([1.0], [0.0])


def test_regime_policy_reads_current_regime():
    U = ControlSet.box([0.0], [1.0])
    pol = regime_policy([0.2, 0.9], U)
    u = pol(0.0, np.zeros((3, 1)), np.array([0, 1, 1]))
    np.testing.assert_allclose(u[:, 0], [0.2, 0.9, 0.9])


def test_constant_policy_is_projected():
    U = ControlSet.box([0.0], [1.0])
    assert constant_policy(3.0, U)(0.0, np.zeros((2, 1)), np.zeros(2, dtype=int))[0, 0] == 1.0


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_fd_derivatives_of_polynomial(a, b):
    x = np.array([[a, b]])
    f = lambda v: v[:, 0] ** 3 + v[:, 0] * v[:, 1] ** 2
    J = fd_jacobian(f, x)
    np.testing.assert_allclose(J[0], [3 * a**2 + b**2, 2 * a * b], atol=1e-6)
    H = fd_hessian(f, x)
    np.testing.assert_allclose(H[0], [[6 * a, 2 * b], [2 * b, 2 * a]], atol=1e-4)


def test_builtin_models_validate(two_regime):
    for spec in (example1(), example1(sigma=(0.8, 0.6), gamma=[[0, 0.5], [0.4, 0]], beta=0.5),
                 example2(two_regime, nu=(0.5, 1.0)), linear_quadratic(random_lq_params(3, 2), 2)):
        rep = validate_spec(spec)
        assert rep.passed, rep.summary()


def test_wrong_derivative_is_reported():
    base = example1(beta=0.5)
    bad = dict(base.derivatives)
    bad["drift_x"] = lambda t, x, u, r: np.zeros(x.shape + (1,))
    from dataclasses import replace
    rep = validate_spec(replace(base, derivatives=bad))
    assert not rep.passed and "drift_x" in rep.failures


def test_unknown_derivative_name_rejected():
    from dataclasses import replace
    with pytest.raises(ValueError, match="unknown derivative"):
        replace(example1(), derivatives={"drift_y": lambda *a: 0})


def test_expression_language():
    e = Expression("2*x^2 - exp(y) + c", {"c": [1.0, 10.0]})
    v = e({"x": np.array([1.0, 2.0]), "y": np.array([0.0, 0.0])}, np.array([0, 1]))
    np.testing.assert_allclose(v, [2.0, 17.0])


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "[x]", "x if y else z", "lambda: 1", "'a'"])
def test_expression_rejects_unsafe_syntax(text):
    with pytest.raises(ExpressionError):
        Expression(text)


def test_expression_model_matches_builtin(two_regime):
    custom = expression_model({"b": "0", "sigma": "u*s", "gamma": ["0", "0"], "l": "-u", "h": "x^2/2 + 1"}, 2,
                              {"s": [0.8, 0.6]}, generator=two_regime)
    ref = example1(sigma=(0.8, 0.6))
    g = np.random.default_rng(0)
    x = g.normal(size=(50, 1))
    u = g.random((50, 1))
    r = g.integers(0, 2, 50)
    for a, b in zip(custom.coefficients(0.3, x, u, r), ref.coefficients(0.3, x, u, r)):
        np.testing.assert_allclose(a, b)
    np.testing.assert_allclose(custom.running_cost(0.0, x, u, r), ref.running_cost(0.0, x, u, r))
    np.testing.assert_allclose(custom.terminal_cost(x, r), ref.terminal_cost(x, r))
    np.testing.assert_allclose(custom.running_cost_x(0.0, x, u, r), 0.0, atol=1e-8)
    np.testing.assert_allclose(custom.terminal_cost_xx(x, r)[:, 0, 0], 1.0, atol=1e-5)


def test_expression_model_unknown_name(two_regime):
    with pytest.raises(ExpressionError, match="unknown names"):
        expression_model({"b": "w", "sigma": "1", "gamma": ["0", "0"]}, 2, generator=two_regime)


def test_require_missing_cost():
    spec = example2(RegimeGenerator([[-1.0, 1.0], [1.0, -1.0]]))
    with pytest.raises(Exception):
        spec.require("forward_cost")
