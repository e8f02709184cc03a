import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqmorse import critstruct as cs
from eqmorse import geometry as g
from oracles import index_and_nullity


def table(orbits):
    return {o.label: o for o in orbits}


def test_sphere_height_orbits(orbits):
    t = table(orbits("sphere_height"))
    assert {k: o.index for k, o in t.items()} == {"N": 2, "S": 0}
    assert all(o.orbit_dim == 0 and str(o.isotropy) == "S1" for o in t.values())


def test_mapping_torus_orbits_at_known_coordinates(orbits):
    t = table(orbits("mapping_torus"))
    assert {k: o.index for k, o in t.items()} == {"P2": 2, "Q1": 1, "R1": 1, "S0": 0}
    where = {"P2": (0.0, 0.25), "Q1": (0.5, 0.25), "R1": (0.5, 0.75), "S0": (0.0, 0.75)}
    for label, (a, b) in where.items():
        rep = t[label].representative.coords
        assert abs(rep[0] - a) < 1e-6 and abs(rep[1] - b) < 1e-6
        assert t[label].orbit_dim == 1
        assert str(t[label].isotropy) == "Z2"


def test_torus_with_legs_components(orbits):
    os_ = orbits("torus_with_legs", n=3)
    manifolds = [o for o in os_ if o.kind == "critical_manifold"]
    assert len(manifolds) == 1 and manifolds[0].dim == 1
    by_index = {}
    for o in os_:
        if o.kind == "orbit":
            by_index[o.index] = by_index.get(o.index, 0) + len(o.members)
    assert by_index == {0: 3, 1: 3}


@pytest.mark.parametrize("name,params", [("sphere_height", {}), ("sphere_stabilized", {}),
                                         ("mapping_torus", {}), ("torus_with_legs", {"n": 3}),
                                         ("mapping_torus_stabilized", {})])
def test_index_agrees_with_difference_hessian(scenario, orbits, name, params):
    s = scenario(name, **params)
    for o in orbits(name, **params):
        X, C = o.representative.batch()

        def val(x, C=C):
            return float(s.value(x[None], C)[0])

        G = s.metric_matrix(X, C)[0]
        idx, null = index_and_nullity(val, X[0], G)
        assert idx == o.index, o.label
        assert null == (o.orbit_dim if o.kind == "orbit" else o.dim), o.label


def test_stability_flags(orbits):
    assert {o.label: o.stable for o in orbits("sphere_height")} == {"N": False, "S": True}
    assert {o.label: o.stable for o in orbits("mapping_torus")} == {
        "P2": False, "Q1": True, "R1": False, "S0": True}
    for name in ("sphere_stabilized", "mapping_torus_stabilized"):
        assert all(o.stable for o in orbits(name))


def test_isotropy_of_sphere_stabilized(orbits):
    t = table(orbits("sphere_stabilized"))
    assert str(t["N"].isotropy) == "S1" and str(t["S"].isotropy) == "S1"
    assert str(t["N'"].isotropy) == "1" and t["N'"].orbit_dim == 1


def test_negative_frame_is_orthonormal_and_descending(scenario, orbits):
    s = scenario("mapping_torus_stabilized")
    for o in orbits("mapping_torus_stabilized"):
        X, C = o.representative.batch()
        F = o.neg_frame
        G = s.metric_matrix(X, C)[0]
        assert F.shape[1] == o.index
        assert np.allclose(F.T @ G @ F, np.eye(o.index), atol=1e-9)
        H = s.hessian(X, C)[0]
        if o.index:
            assert np.all(np.linalg.eigvalsh(F.T @ H @ F) < 0)


def test_frames_are_transported_along_the_orbit(scenario, orbits):
    s = scenario("mapping_torus_stabilized")
    o = table(orbits("mapping_torus_stabilized"))["P2'"]
    for q in cs.orbit_points(s, o, 5):
        p, F = cs.frame_at(s, o, q)
        X, C = p.batch()
        G = s.metric_matrix(X, C)[0]
        H = s.hessian(X, C)[0]
        assert np.allclose(F.T @ G @ F, np.eye(2), atol=1e-9)
        assert np.all(np.linalg.eigvalsh(F.T @ H @ F) < 0)


def test_orbit_points_cover_the_orbit_once(scenario, orbits):
    s = scenario("mapping_torus")
    o = table(orbits("mapping_torus"))["Q1"]
    pts = cs.orbit_points(s, o, 8)
    X, C = g.as_batch(pts)
    D = np.array([[s.distance(X[i:i + 1], C[i:i + 1], X[j:j + 1], C[j:j + 1])[0] for j in range(8)]
                  for i in range(8)])
    assert np.min(D + np.eye(8) * 10) > 0.05


def _diag_metric(a, b, c):
    G0 = np.diag([a, b, c])
    return g.MetricField(lambda X, C: np.broadcast_to(G0, (len(X), 3, 3)).copy(),
                         lambda X, C: np.zeros((len(X), 3, 3, 3)))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(0.2, 5.0))
def test_stability_is_metric_independent(a, b, c):
    s = g.build_scenario("mapping_torus")
    for o in cs.find_critical_orbits(s):
        for row in cs.check_stability_equivalences(s, o, [_diag_metric(a, b, c)]):
            assert row["agree"]
            assert row["stable"] == o.stable


def test_non_invariant_metric_rejected(scenario, orbits):
    s = scenario("mapping_torus")
    G0 = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]])
    m = g.MetricField(lambda X, C: np.broadcast_to(G0, (len(X), 3, 3)).copy(),
                      lambda X, C: np.zeros((len(X), 3, 3, 3)))
    with pytest.raises(ValueError):
        cs.check_stability_equivalences(s, orbits("mapping_torus")[0], [m])
