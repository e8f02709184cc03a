import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqmorse import geometry as g

ALL = list(g.CATALOGUE)


@pytest.mark.parametrize("name", ALL)
def test_function_and_metric_are_invariant(scenario, name):
    s = scenario(name)
    pts = g.sample_points(s, 9)
    res = g.invariance_residuals(s, pts)
    assert res["function"] < 1e-10
    assert res["metric"] < 1e-10
    assert res["min_metric_eigenvalue"] > 0


@pytest.mark.parametrize("name", ALL)
def test_action_is_a_group_action(scenario, name):
    s = scenario(name)
    res = g.action_residuals(s, g.sample_points(s, 7))
    assert res["identity"] < 1e-12
    assert res["composition"] < 1e-10
    assert res["fundamental_field"] < 1e-4


@pytest.mark.parametrize("name", ALL)
def test_analytic_derivatives_match_differences(scenario, name):
    s = scenario(name)
    # stay off the chart seams where the difference stencil crosses a wrap
    pts = [p for p in g.sample_points(s, 7) if np.all(np.abs(p.coords) < 0.95) or name != "sphere_height"]
    res = g.derivative_residuals(s, pts)
    assert res["gradient"] < 1e-6
    assert res["hessian"] < 1e-5
    assert res["metric"] < 1e-6


def test_sphere_height_is_ambient_z(scenario):
    s = scenario("sphere_height")
    X, C = g.as_batch(g.sample_points(s, 11))
    assert np.allclose(s.value(X, C), s.to_ambient(X, C)[:, 2], atol=1e-12)


def test_sphere_gradient_matches_ambient_projection(scenario):
    # gradient of z on the unit sphere is e_z minus its normal part
    s = scenario("sphere_height")
    X, C = g.as_batch(g.sample_points(s, 9))
    P = s.to_ambient(X, C)
    ez = np.array([0.0, 0.0, 1.0])
    A = ez[None] - P[:, 2:3] * P
    want = s.chart_vector(X, C, A)
    assert np.allclose(s.gradient(X, C), want, atol=1e-10)


def test_mapping_torus_values_at_landmarks(scenario):
    # (3 + cos 2 pi t1) sin 2 pi t2 at the four critical points
    s = scenario("mapping_torus")
    expect = {"P2": 4.0, "Q1": 2.0, "R1": -2.0, "S0": -4.0}
    for label, p in s.landmarks():
        X, C = p.batch()
        assert s.value(X, C)[0] == pytest.approx(expect[label], abs=1e-12)
        assert np.linalg.norm(s.differential(X, C)[0]) < 1e-12


def test_unknown_scenario_and_params_rejected():
    with pytest.raises(g.ConfigurationError):
        g.build_scenario("klein_bottle")
    with pytest.raises(g.ConfigurationError):
        g.build_scenario("sphere_height", {"radius": 2})
    with pytest.raises(g.ConfigurationError):
        g.build_scenario("torus_with_legs", {"n": 0})
    with pytest.raises(g.ConfigurationError):
        g.build_scenario("mapping_torus", {"theta2_scale": -1.0})


def test_gradient_outside_domain_raises(scenario):
    s = scenario("sphere_height")
    with pytest.raises(g.DomainError):
        g.evaluate_gradient(s, g.Point(2, [0.1, 0.0]))
    with pytest.raises(g.DomainError):
        g.evaluate_gradient(s, g.Point(0, [np.nan, 0.0]))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.45, 0.45), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-3.0, 3.0))
def test_mapping_torus_pushforward_preserves_metric(x, y, z, a):
    s = g.build_scenario("mapping_torus")
    p = g.Point(0, [x % 1.0, y % 1.0, z % 1.0])
    v = np.array([0.3, -0.7, 0.2])
    q, w = g.act_on_tangent(s, a, p, v)
    X, C = p.batch()
    Y, D = q.batch()
    assert s.inner(Y, D, w[None], w[None])[0] == pytest.approx(s.inner(X, C, v[None], v[None])[0], rel=1e-12)
    # canonical representation is stable
    Z, E = s.canonicalize(Y, D)
    assert np.allclose(Z, Y)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.0, 2 * np.pi))
def test_sphere_rotation_commutes_with_gradient(u, v, a):
    s = g.build_scenario("sphere_stabilized")
    p = g.Point(0, [u, v])
    q, w = g.act_on_tangent(s, a, p, g.evaluate_gradient(s, p))
    assert np.allclose(g.evaluate_gradient(s, q), w, atol=1e-10)
