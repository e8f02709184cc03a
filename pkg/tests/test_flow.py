from dataclasses import replace

import numpy as np
import pytest

from eqmorse import critstruct as cs
from eqmorse import flow as fl
from eqmorse import geometry as g


def by_label(orbits):
    return {o.id: o for o in orbits}


def _pairs(s, count=20):
    pts = g.sample_points(s, 6)
    idx = np.linspace(0, len(pts) - 1, count).astype(int)
    period = s.action.circle_period if s.action.is_circle else s.action.order
    els = np.linspace(0.1, period, count, endpoint=False)
    return [(pts[i], a) for i, a in zip(idx, els)]


@pytest.mark.parametrize("name", ["sphere_stabilized", "mapping_torus_stabilized", "mapping_torus"])
def test_flow_is_equivariant(scenario, name):
    s = scenario(name)
    pairs = _pairs(s)
    X, C = g.as_batch([p for p, _ in pairs])
    a = np.array([a for _, a in pairs])
    T = 0.5
    Y1, D1 = fl.flow_to_time(s, *s.act(a, X, C), T)
    Y2, D2 = s.act(a, *fl.flow_to_time(s, X, C, T))
    assert float(np.max(s.distance(Y1, D1, Y2, D2))) <= 1e-6


def test_finite_group_flow_is_equivariant(scenario):
    s = scenario("torus_with_legs", n=3)
    pairs = _pairs(s)
    X, C = g.as_batch([p for p, _ in pairs])
    a = np.round([a for _, a in pairs]) % 3
    Y1, D1 = fl.flow_to_time(s, *s.act(a, X, C), 0.5)
    Y2, D2 = s.act(a, *fl.flow_to_time(s, X, C, 0.5))
    assert float(np.max(s.distance(Y1, D1, Y2, D2))) <= 1e-6


def test_transported_frame_matches_difference_jacobian(scenario):
    s = scenario("mapping_torus")
    x0 = np.array([[0.13, 0.41, 0.2]])
    c0 = np.array([0])
    W0 = np.array([[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]])
    run = fl.integrate_batch(s, x0, c0, W0=W0, t_end=0.05)
    (_, _, _, W), = run.trajectories()
    WT = W[-1]
    h = 1e-6
    cols = []
    for k in range(2):
        e = W0[0, :, k] * h
        Yp, _ = fl.flow_to_time(s, x0 + e, c0, 0.05)
        Ym, _ = fl.flow_to_time(s, x0 - e, c0, 0.05)
        cols.append((Yp[0] - Ym[0]) / (2 * h))
    J = np.column_stack(cols)
    # same span, same orientation
    M = np.linalg.lstsq(J, WT, rcond=None)[0]
    assert np.allclose(J @ M, WT, atol=1e-6)
    assert np.linalg.det(M) > 0


def test_isotropy_fixed_set_is_preserved(scenario):
    s = scenario("mapping_torus")
    for t1 in (0.0, 0.5):
        for t2 in (0.1, 0.4, 0.6, 0.9):
            ln = fl.integrate_flow(s, g.Point(0, [t1, t2, 0.3]), orbits=cs.find_critical_orbits(s))
            assert np.max(np.abs(ln.X[:, 0] - t1)) < 1e-12
            iso = cs.isotropy_at(s, g.Point(0, ln.X[len(ln.t) // 2]))
            assert str(iso) == "Z2"


def test_mapping_torus_tau_is_constant_along_lines(covers):
    _, lines = covers("mapping_torus_stabilized")
    for ls in lines.values():
        for ln in ls[:40]:
            assert np.ptp(ln.X[:, 2]) < 1e-12


def test_unresolved_when_time_runs_out(scenario, orbits):
    s = scenario("sphere_height")
    with pytest.raises(fl.UnresolvedAsymptotics):
        fl.integrate_flow(s, g.Point(0, [0.3, 0.1]), t_max=0.01, orbits=orbits("sphere_height"))


@pytest.mark.parametrize("name", ["sphere_stabilized", "mapping_torus_stabilized"])
def test_line_invariants(scenario, orbits, covers, name):
    s = scenario(name)
    os_ = by_label(orbits(name))
    _, lines = covers(name)
    for src, ls in lines.items():
        for ln in ls:
            X, C = ln.X[:1], ln.C[:1]
            assert s.orbit_distance(X, C, os_[src].representative)[0] < 1e-4
            f = s.value(ln.X, ln.C)
            assert np.all(np.diff(f) <= 1e-12 * max(1.0, np.max(np.abs(f))))
            if ln.status == "captured":
                Y, D = ln.X[-1:], ln.C[-1:]
                assert s.orbit_distance(Y, D, os_[ln.end_orbit].representative)[0] < 1e-5


def _signed_lines(covers, name, count):
    cov, _ = covers(name)
    out = []
    for c in cov.values():
        out += [ln for ln in c.lines if ln.sign is not None and ln.status == "captured"]
    idx = np.linspace(0, len(out) - 1, min(count, len(out))).astype(int)
    return [out[i] for i in idx]


def test_signs_survive_reparametrization_and_group_action(scenario, orbits, covers):
    checked = 0
    for name in ("mapping_torus_stabilized", "sphere_stabilized"):
        s = scenario(name)
        os_ = orbits(name)
        for ln in _signed_lines(covers, name, 10):
            n = len(ln.t)
            k = next(i for i in range(n) if ln.t[i] > 0.5 * ln.t[max(ln.entry, 1)] or i == n - 1)
            # restart the variational equation from a later sample: same sign
            assert fl.orientation_sign(s, ln, os_, start_sample=k) == ln.sign
            # translate the whole line by a group element: same sign
            a = 0.37 * (s.action.circle_period or 1.0)
            X, C = s.act(np.full(n, a), ln.X, ln.C)
            W = s.push(np.full(n, a), ln.X, ln.C, ln.W)
            moved = replace(ln, X=X, C=C, W=W)
            assert fl.orientation_sign(s, moved, os_, start_sample=k) == ln.sign
            checked += 1
    assert checked == 20


def _sheet_summary(cov):
    return {k: (c.dim, c.fiber_dim, c.coefficient) for k, c in cov.items()}


def test_capture_radius_does_not_change_covers(scenario, orbits, covers):
    s = scenario("sphere_stabilized")
    os_ = orbits("sphere_stabilized")
    a, _ = fl.compute_covers(s, os_, r_cap=1e-3)
    b, _ = fl.compute_covers(s, os_, r_cap=1e-4)
    assert _sheet_summary(a) == _sheet_summary(b)
    assert {k: c.sheets for k, c in a.items()} == {k: c.sheets for k, c in b.items()}


@pytest.mark.parametrize("samples", [16, 32, 64])
def test_covers_stable_in_sample_count(scenario, orbits, samples):
    s = scenario("sphere_stabilized")
    cov, _ = fl.compute_covers(s, orbits("sphere_stabilized"), samples=samples)
    assert {k: c.coefficient for k, c in cov.items()} == {("N'", "N"): 1, ("N'", "S"): 1}


def test_mapping_torus_stabilized_cover_table(covers):
    cov, _ = covers("mapping_torus_stabilized")
    coeff = {k: c.coefficient for k, c in cov.items()}
    assert coeff == {
        ("R1'", "S0"): 1, ("R1'", "Rbar0"): -1,
        ("Q1", "S0"): 0, ("Q1", "Rbar0"): 0,
        ("Pbar1", "S0"): 0, ("Pbar1", "Rbar0"): 0,
        ("P2'", "S0"): 0, ("P2'", "Rbar0"): 0, ("P2'", "R1'"): 0,
        ("P2'", "Q1"): 1, ("P2'", "Pbar1"): -1,
    }
    assert sorted(cov[("Q1", "Rbar0")].sheets) == [(-1, 1), (1, 1)]
    assert cov[("P2'", "S0")].fiber_dim == 1


def test_mapping_torus_failure_certificate(scenario, orbits):
    s = scenario("mapping_torus")
    rep = {r.pair: r for r in fl.diagnose_transversality(s, orbits("mapping_torus"))}
    r = rep[("Q1", "R1")]
    assert r.verdict == "failure_detected"
    assert r.expected_dim == -1
    assert r.witness is not None and r.witness.end_orbit == "R1"
    assert r.weak_self_indexing_violation


def test_sphere_height_family_dimension(scenario, orbits):
    s = scenario("sphere_height")
    rep = fl.diagnose_transversality(s, orbits("sphere_height"))
    assert [(r.pair, r.verdict, r.expected_dim, r.observed_family_dim) for r in rep] == [
        (("N", "S"), "transverse", 1, 1)]
