"""Negative gradient flow: a batched Dormand-Prince integrator with an
optional variational frame, shooting from descending spheres, moduli covers
with orientation signs and transversality diagnostics.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import critstruct as cs
from .geometry import Point, Scenario, as_batch

log = logging.getLogger(__name__)

SHOOT_RADIUS = 1e-3
CAPTURE_RADIUS = 1e-3
REFINE_RADIUS = 1e-5
TOL = 1e-10
TRACK_BAND = 0.5
# statuses of trajectories that connect two critical orbits
CONNECTED = ("captured", "limit")

# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4


class UnresolvedAsymptotics(RuntimeError):
    """Integration reached ``t_max`` without settling at a critical orbit."""


class OrientationError(RuntimeError):
    """Change-of-basis determinant too small to read off a sign."""


class CoverError(RuntimeError):
    """Sheet counts differ between sampled source points."""


@dataclass
class FlowLine:
    start_orbit: str
    end_orbit: str | None
    t: np.ndarray
    C: np.ndarray
    X: np.ndarray
    start_point: Point
    start_direction: np.ndarray
    source_param: float = 0.0
    W: np.ndarray | None = None
    entry: int = -1
    status: str = "captured"
    sign: int | None = None
    closest: dict = field(default_factory=dict)
    angle: float | None = None

    @property
    def end_point(self) -> Point:
        return Point(int(self.C[-1]), self.X[-1])


@dataclass
class ModuliCover:
    source_orbit: str
    target_orbit: str
    index_gap: int
    dim: int
    fiber_dim: int
    sheets: list  # (sign, target_winding) for fiber_dim 0
    fiber_integral: Fraction | None = None
    lines: list = field(default_factory=list)
    certificate: str | None = None

    @property
    def coefficient(self) -> Fraction:
        """Pushforward of the pulled-back invariant form (fiber_dim 0: signed count)."""
        if self.fiber_dim == 0:
            return Fraction(sum(sg for sg, _ in self.sheets))
        return self.fiber_integral if self.fiber_integral is not None else Fraction(0)


@dataclass
class TransversalityReport:
    pair: tuple
    verdict: str
    expected_dim: int
    observed_family_dim: int
    witness: FlowLine | None = None
    weak_self_indexing_violation: bool = False


# -- integrator -----------------------------------------------------------------------

def _rhs(s: Scenario, X, C, W, direction):
    if W is None:
        return direction * s.flow_field(X, C), None
    V, J = s.flow_field_and_jacobian(X, C)
    return direction * V, direction * np.einsum("nij,njk->nik", J, W)


def _orthonormalize(W):
    if W is None or W.shape[2] == 0:
        return W
    Q, R = np.linalg.qr(W)
    sgn = np.sign(np.diagonal(R, axis1=1, axis2=2))
    sgn[sgn == 0] = 1.0
    return Q * sgn[:, None, :]


def _orbit_distances(s: Scenario, orbits, X, C, f, rows_needed):
    """Distances to each orbit for rows within the value band; inf elsewhere."""
    out = np.full((len(X), len(orbits)), np.inf)
    for j, o in enumerate(orbits):
        m = rows_needed & (np.abs(f - o.value) < TRACK_BAND)
        if not np.any(m):
            continue
        Xm, Cm = s.canonicalize(X[m], C[m])
        if o.kind == "critical_manifold":
            d = _manifold_distance(s, o, Xm, Cm)
        else:
            d = s.orbit_distance(Xm, Cm, o.representative)
        out[m, j] = d
    return out


def _manifold_distance(s, o, X, C):
    Y = o.curve
    coarse = np.array([np.min(s.distance(np.repeat(x[None], len(Y), 0), np.repeat(c, len(Y)), Y,
                                         np.zeros(len(Y), dtype=int))) for x, c in zip(X, C)])
    near = coarse < 0.05
    if np.any(near):
        P, D, _ = cs.newton_batch(s, X[near], C[near], iters=15)
        coarse[near] = s.distance(X[near], C[near], P, D)
    return coarse


class _Run:
    """Result arrays of a batched integration."""

    def __init__(self, n, m):
        self.rows, self.t, self.C, self.X, self.W = [], [], [], [], []
        self.status = np.array(["running"] * n, dtype=object)
        self.end = np.full(n, -1)
        self.entry = np.full(n, -1)
        self.closest = np.full((n, m), np.inf)
        self.closest_at = np.full((n, m), -1)
        self.nsamp = np.zeros(n, dtype=int)
        self.monotone = np.ones(n, dtype=bool)

    def record(self, idx, t, C, X, W):
        self.rows.append(np.array(idx))
        self.t.append(np.array(t))
        self.C.append(np.array(C))
        self.X.append(np.array(X))
        self.W.append(None if W is None else np.array(W))
        self.nsamp[idx] += 1

    def trajectories(self):
        rows = np.concatenate(self.rows)
        order = np.argsort(rows, kind="stable")
        t = np.concatenate(self.t)[order]
        C = np.concatenate(self.C)[order]
        X = np.concatenate(self.X)[order]
        W = None if self.W[0] is None else np.concatenate(self.W)[order]
        cuts = np.cumsum(np.bincount(rows, minlength=len(self.status)))[:-1]
        split = lambda a: np.split(a, cuts) if a is not None else [None] * len(self.status)
        return list(zip(split(t), split(C), split(X), split(W)))


def integrate_batch(s: Scenario, X0, C0, orbits=(), *, W0=None, direction: int = 1, t_max: float = 60.0,
                    r_cap: float = CAPTURE_RADIUS, refine: float = REFINE_RADIUS, exclude=None,
                    tol: float = TOL, t_end: float | None = None, h_max: float = 0.25) -> _Run:
    """Integrates ``direction * (-grad f)`` from each row until capture or ``t_max``.

    Capture: the first entry within ``r_cap`` of an orbit starts a pending
    capture that is confirmed at ``refine`` and dropped if the trajectory
    leaves ``2 r_cap``.  With ``t_end`` the integration stops exactly at that
    time instead (no capture).
    """
    X = np.array(X0, dtype=float)
    C = np.array(C0, dtype=int)
    n, d = X.shape
    W = None if W0 is None else _orthonormalize(np.array(W0, dtype=float))
    m = len(orbits)
    exclude = np.full(n, -1) if exclude is None else np.broadcast_to(np.asarray(exclude), (n,)).copy()
    run = _Run(n, m)
    t = np.zeros(n)
    h = np.full(n, 1e-3)
    pending = np.full(n, -1)
    active = np.ones(n, dtype=bool)
    f = s.value(X, C)
    run.record(np.arange(n), t, C, X, W)
    K1, KW1 = _rhs(s, X, C, W, direction)
    stop = t_max if t_end is None else t_end
    for _ in range(200000):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        x, c, hh = X[idx], C[idx], h[idx]
        if t_end is not None:
            hh = np.minimum(hh, t_end - t[idx])
        w = None if W is None else W[idx]
        ks = [K1[idx]]
        kws = [None if W is None else KW1[idx]]
        for i in range(1, 7):
            xi = x + hh[:, None] * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            wi = None if W is None else w + hh[:, None, None] * sum(a * k for a, k in zip(_A[i], kws) if a != 0.0)
            k, kw = _rhs(s, xi, c, wi, direction)
            ks.append(k)
            kws.append(kw)
        xn = x + hh[:, None] * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = hh[:, None] * sum(e * k for e, k in zip(_E, ks) if e != 0.0)
        scale = tol + tol * np.maximum(np.abs(x), np.abs(xn))
        en = np.max(np.abs(err) / scale, axis=1)
        ok = en <= 1.0
        fac = np.where(en > 0, 0.9 * np.power(np.maximum(en, 1e-30), -0.2), 5.0)
        h[idx] = np.minimum(h_max, hh * np.clip(fac, 0.2, 5.0))
        if not np.any(ok):
            continue
        acc = idx[ok]
        wn = None
        if W is not None:
            wn = w[ok] + hh[ok][:, None, None] * sum(b * k[ok] for b, k in zip(_B5, kws) if b != 0.0)
        t[acc] = t[acc] + hh[ok]
        X[acc] = xn[ok]
        K1[acc] = ks[6][ok]
        if W is not None:
            W[acc] = _orthonormalize(wn)
            KW1[acc] = _rhs(s, X[acc], C[acc], W[acc], direction)[1]
        # chart transitions
        mask, X2, C2, J = s.chart_switch(X[acc], C[acc])
        if np.any(mask):
            sub = acc[mask]
            X[sub], C[sub] = X2[mask], C2[mask]
            K1[sub] = direction * s.flow_field(X[sub], C[sub])
            if W is not None:
                W[sub] = _orthonormalize(np.einsum("nij,njk->nik", J, W[sub]))
                KW1[sub] = _rhs(s, X[sub], C[sub], W[sub], direction)[1]
        fn = s.value(X[acc], C[acc])
        mono = direction * (fn - f[acc]) <= 1e-12 * max(1.0, float(np.max(np.abs(fn))))
        run.monotone[acc] &= mono
        f[acc] = fn
        run.record(acc, t[acc], C[acc], X[acc], None if W is None else W[acc])
        if t_end is not None:
            done = t[acc] >= t_end - 1e-15
            run.status[acc[done]] = "timed"
            active[acc[done]] = False
            continue
        if m:
            dist = _orbit_distances(s, orbits, X[acc], C[acc], fn, np.ones(len(acc), dtype=bool))
            rows = np.arange(len(acc))
            dist[rows[exclude[acc] >= 0], exclude[acc][exclude[acc] >= 0]] = np.inf
            better = dist < run.closest[acc]
            run.closest[acc] = np.where(better, dist, run.closest[acc])
            run.closest_at[acc] = np.where(better, (run.nsamp[acc] - 1)[:, None], run.closest_at[acc])
            j = np.argmin(dist, axis=1)
            dj = dist[rows, j]
            pend = pending[acc]
            # start a pending capture
            start = (pend < 0) & (dj < r_cap)
            pending[acc[start]] = j[start]
            run.entry[acc[start]] = run.nsamp[acc[start]] - 1
            pend = pending[acc]
            dp = np.where(pend >= 0, dist[rows, np.maximum(pend, 0)], np.inf)
            drop = (pend >= 0) & (dp > 2 * r_cap)
            pending[acc[drop]] = -1
            run.entry[acc[drop]] = -1
            conf = (pend >= 0) & (dp < refine)
            run.end[acc[conf]] = pend[conf]
            run.status[acc[conf]] = "captured"
            active[acc[conf]] = False
        late = active[acc] & (t[acc] >= stop)
        run.status[acc[late]] = "unresolved"
        active[acc[late]] = False
    run.status[active] = "unresolved"
    return run


def integrate_flow(s: Scenario, x0: Point, direction: str = "down", t_max: float = 60.0, orbits=(),
                   raise_unresolved: bool = True, r_cap: float = CAPTURE_RADIUS) -> FlowLine:
    """Single trajectory from ``x0``; stops near a critical orbit of ``orbits``."""
    sign = {"down": 1, "up": -1}[direction]
    X, C = x0.batch()
    for j, o in enumerate(orbits):
        if _orbit_distances(s, [o], X, C, s.value(X, C), np.ones(1, dtype=bool))[0, 0] < 1e-6:
            return FlowLine(o.id, o.id, np.zeros(1), C.copy(), X.copy(), x0, np.zeros(s.dimension), status="constant")
    run = integrate_batch(s, X, C, orbits, direction=sign, t_max=t_max, r_cap=r_cap)
    (t, Cs, Xs, _), = run.trajectories()
    status = run.status[0]
    if status == "unresolved" and raise_unresolved:
        raise UnresolvedAsymptotics(f"no capture from {x0!r} within t_max={t_max}")
    end = orbits[run.end[0]].id if run.end[0] >= 0 else None
    return FlowLine(None, end, t, Cs, Xs, x0, np.zeros(s.dimension), entry=int(run.entry[0]), status=status)


def flow_to_time(s: Scenario, X, C, T: float, direction: int = 1):
    """Flow map at time ``T`` for a batch (no capture)."""
    run = integrate_batch(s, X, C, (), direction=direction, t_end=T)
    tr = run.trajectories()
    return np.array([x[-1] for _, _, x, _ in tr]), np.array([c[-1] for _, c, _, _ in tr])


# -- shooting ------------------------------------------------------------------------------

def _lines_from_run(s, run, source, orbits, starts, dirs, params, angles=None):
    lines = []
    for i, (t, C, X, W) in enumerate(run.trajectories()):
        end = orbits[run.end[i]].id if run.end[i] >= 0 else None
        close = {orbits[j].id: (float(run.closest[i, j]), int(run.closest_at[i, j]))
                 for j in range(len(orbits)) if np.isfinite(run.closest[i, j])}
        lines.append(FlowLine(source.id, end, t, C, X, starts[i], dirs[i], params[i], W, int(run.entry[i]),
                              run.status[i], None, close, None if angles is None else float(angles[i])))
    return lines


def _shoot_points(s, source, orbits, base_pts, frames, coeffs, params, t_max, angles=None, transport=True,
                  r_cap: float = CAPTURE_RADIUS):
    """One trajectory per (base point, unit coefficient vector).

    With ``transport`` the source frame is carried along by the variational
    equation; step control only sees the positions, so the trajectory is the
    same either way.
    """
    X0, C0, W0, starts, dirs = [], [], [], [], []
    for p, F, a in zip(base_pts, frames, coeffs):
        u = F @ a
        x = p.coords + SHOOT_RADIUS * u
        Xc, Cc = s.canonicalize(x[None], np.array([p.chart]))
        Wc = s.canonical_tangent(x[None], np.array([p.chart]), F[None])
        X0.append(Xc[0])
        C0.append(Cc[0])
        W0.append(Wc[0])
        starts.append(p)
        dirs.append(u)
    X0, C0, W0 = np.array(X0), np.array(C0), np.array(W0)
    src = [o.id for o in orbits].index(source.id)
    run = integrate_batch(s, X0, C0, orbits, W0=W0 if transport else None, t_max=t_max, exclude=src, r_cap=r_cap)
    return _lines_from_run(s, run, source, orbits, starts, dirs, params, angles)


def _extend_back(s, o, orbits, lines, radius: float = 1e-4):
    """Prepends the backward flow from each start sample until it is within
    ``radius`` of the source, so the samples run from orbit to orbit."""
    if not lines:
        return lines
    X0 = np.array([ln.X[0] for ln in lines])
    C0 = np.array([ln.C[0] for ln in lines])
    framed = all(ln.W is not None for ln in lines)
    W0 = np.array([ln.W[0] for ln in lines]) if framed else None
    run = integrate_batch(s, X0, C0, [o], W0=W0, direction=-1, t_max=20.0, r_cap=radius, refine=radius)
    out = []
    for ln, (t, C, X, W), status in zip(lines, run.trajectories(), run.status):
        if status != "captured":
            log.warning("backward extension of a line from %s did not reach it", o.id)
            out.append(ln)
            continue
        k = len(t) - 1
        rev = slice(None, 0, -1)
        ln.t = np.concatenate([-t[rev], ln.t])
        ln.C = np.concatenate([C[rev], ln.C])
        ln.X = np.concatenate([X[rev], ln.X])
        if ln.W is not None:
            ln.W = np.concatenate([W[rev], ln.W]) if framed else None
        ln.entry = ln.entry + k if ln.entry >= 0 else ln.entry
        ln.closest = {q: (d, i + k) for q, (d, i) in ln.closest.items()}
        out.append(ln)
    return out


def source_points(s: Scenario, o: cs.CriticalOrbit, count: int):
    """Orbit points with their frames and orbit parameters."""
    pts = cs.orbit_points(s, o, count)
    out = []
    for q in pts:
        p, F = cs.frame_at(s, o, q)
        if o.kind == "critical_manifold" or not s.action.is_circle:
            par = 0.0
        else:
            par = s.orbit_parameter(o.representative, p)
        out.append((p, F, par))
    return out


def shoot_descending_sphere(s: Scenario, o: cs.CriticalOrbit, directions: int, orbits, *,
                            along: int = 1, t_max: float = 60.0, refine_separatrices: bool = True,
                            r_cap: float = CAPTURE_RADIUS):
    """Flow lines leaving ``o``.

    Index 1: both unit directions at each of ``along`` orbit points.  Index 2:
    ``directions`` angles around the descending circle at the representative,
    plus separatrices found by bisection on basin or side changes; the lines
    at the other sampled orbit points are the group translates of these.
    """
    if o.index < 1:
        raise ValueError("descending sphere of an index-0 orbit is empty")
    pts = source_points(s, o, along)
    if o.index == 1:
        base, frames, coeffs, params = [], [], [], []
        for p, F, par in pts:
            for sg in (1.0, -1.0):
                base.append(p)
                frames.append(F)
                coeffs.append(np.array([sg]))
                params.append(par)
        return _extend_back(s, o, orbits, _shoot_points(s, o, orbits, base, frames, coeffs, params, t_max,
                                                        r_cap=r_cap))
    if o.index != 2:
        raise NotImplementedError("descending spheres of dimension above 1")
    p, F, par = pts[0]
    angles = np.linspace(0.0, 2 * np.pi, directions, endpoint=False)
    lines = _shoot_angles(s, o, orbits, p, F, par, angles, t_max, transport=False, r_cap=r_cap)
    if refine_separatrices:
        lines = _separatrices(s, o, orbits, p, F, par, lines, t_max, r_cap=r_cap)
    # frames are only needed on lines ending at orbits of positive index
    by_id = {q.id: q for q in orbits}
    need = [i for i, ln in enumerate(lines) if ln.end_orbit is not None and by_id[ln.end_orbit].index >= 1]
    if need:
        again = _shoot_angles(s, o, orbits, p, F, par, np.array([lines[i].angle for i in need]), t_max,
                              r_cap=r_cap)
        for i, ln in zip(need, again):
            lines[i] = _limit_line(ln, by_id[lines[i].end_orbit]) if lines[i].status == "limit" else ln
    framed = set(need)
    lines = (_extend_back(s, o, orbits, [lines[i] for i in need])
             + _extend_back(s, o, orbits, [ln for i, ln in enumerate(lines) if i not in framed]))
    lines.sort(key=lambda ln: ln.angle)
    need = [i for i, ln in enumerate(lines) if ln.W is not None]
    out = list(lines)
    if s.action.is_circle and o.kind == "orbit" and o.orbit_dim > 0:
        for _, _, parq in pts[1:]:
            out += [_translate_line(s, lines[i], parq - par, parq) for i in need]
    return out


def _translate_line(s: Scenario, ln: FlowLine, a: float, par: float) -> FlowLine:
    """Image of a flow line under the group element ``a`` (flow lines are equivariant)."""
    n = len(ln.t)
    X, C = s.act(np.full(n, a), ln.X, ln.C)
    W = None if ln.W is None else s.push(np.full(n, a), ln.X, ln.C, ln.W)
    Y, D = s.act(np.full(1, a), *ln.start_point.batch())
    u = s.push(np.full(1, a), *ln.start_point.batch(), ln.start_direction[None, :, None])[0, :, 0]
    return FlowLine(ln.start_orbit, ln.end_orbit, ln.t.copy(), C, X, Point(int(D[0]), Y[0]), u, par, W,
                    ln.entry, ln.status, ln.sign, dict(ln.closest), ln.angle)


def _shoot_angles(s, o, orbits, p, F, par, angles, t_max, transport=True, r_cap: float = CAPTURE_RADIUS):
    coeffs = [np.array([np.cos(a), np.sin(a)]) for a in angles]
    return _shoot_points(s, o, orbits, [p] * len(angles), [F] * len(angles), coeffs,
                         [par] * len(angles), t_max, angles, transport, r_cap)


def _side(s, orbits, ln: FlowLine, oid):
    """Which side of an index-1 orbit the trajectory passes: sign of the
    displacement at closest approach along the orbit's negative frame."""
    o = next(q for q in orbits if q.id == oid)
    if o.index != 1 or oid not in ln.closest:
        return 0
    k = ln.closest[oid][1]
    X, C = s.canonicalize(ln.X[k][None], ln.C[k][None])
    q, Fq = cs.frame_at(s, o, Point(int(C[0]), X[0]))
    disp = s.displacement(X, C, *q.batch())[0]
    G = s.metric_matrix(*q.batch())[0]
    return int(np.sign(Fq[:, 0] @ G @ disp))


def _differ(s, orbits, a: FlowLine, b: FlowLine, inter, side_band, cache):
    """Whether the outcome changes between two neighbouring directions."""
    if a.end_orbit != b.end_orbit:
        return True

    def side(ln, q):
        key = (ln.angle, q.id)
        if key not in cache:
            cache[key] = _side(s, orbits, ln, q.id)
        return cache[key]

    for q in inter:
        if q.id in a.closest and q.id in b.closest and max(a.closest[q.id][0], b.closest[q.id][0]) < side_band:
            if side(a, q) * side(b, q) < 0:
                return True
    return False


def _limit_line(ln: FlowLine, q) -> FlowLine:
    """Truncates a trajectory at its closest approach to ``q``."""
    k = ln.closest[q.id][1]
    W = None if ln.W is None else ln.W[:k + 1]
    return FlowLine(ln.start_orbit, q.id, ln.t[:k + 1], ln.C[:k + 1], ln.X[:k + 1], ln.start_point,
                    ln.start_direction, ln.source_param, W, k, "limit", None, dict(ln.closest), ln.angle)


def _separatrices(s, o, orbits, p, F, par, lines, t_max, side_band: float = 0.1, fan: int = 32,
                  probe: float = 1e-5, rounds: int = 20, r_cap: float = CAPTURE_RADIUS):
    """Refines the sampled directions until every outcome change is resolved.

    A change between neighbouring directions (different basin, or opposite
    sides of an intermediate index-1 orbit) is narrowed with ``fan - 1``
    interior directions per round.  A direction ending on an intermediate
    orbit is a hit; its neighbours at ``+-probe`` are shot too, since hits
    may sit inside basins narrower than the sampling.  A bracket that
    collapses to float resolution without a capture is accepted as the
    trajectory of closest approach if that is within the capture radius.
    """
    inter = [q for q in orbits if 1 <= q.index < o.index and q.value < o.value]
    inter_ids = {q.id for q in inter}
    pool = {float(ln.angle): ln for ln in lines}
    probed = set()
    sides: dict = {}
    for _ in range(rounds):
        hits = [a for a, ln in pool.items() if ln.end_orbit in inter_ids and a not in probed]
        new = []
        for a in hits:
            probed.add(a)
            new += [a - probe, a + probe]
        order = sorted(pool)
        n = len(order)
        for i in range(n):
            a, b = order[i], order[(i + 1) % n]
            hi = b if i + 1 < n else b + 2 * np.pi
            la, lb = pool[a], pool[b]
            if la.end_orbit in inter_ids or lb.end_orbit in inter_ids:
                continue
            if hi - a <= 1e-14 * max(1.0, abs(a)):
                continue
            if _differ(s, orbits, la, lb, inter, side_band, sides):
                new += list(a + (hi - a) * np.arange(1, fan) / fan)
        new = [float(np.mod(x, 2 * np.pi)) for x in new]
        new = sorted({x for x in new if x not in pool})
        if not new:
            break
        for ln in _shoot_angles(s, o, orbits, p, F, par, np.array(new), t_max, transport=False, r_cap=r_cap):
            pool[float(ln.angle)] = ln
    # collapsed brackets
    order = sorted(pool)
    n = len(order)
    extra = []
    for i in range(n):
        la, lb = pool[order[i]], pool[order[(i + 1) % n]]
        if la.end_orbit in inter_ids or lb.end_orbit in inter_ids:
            continue
        if not _differ(s, orbits, la, lb, inter, side_band, sides):
            continue
        near = [(ln.closest[q.id][0], k, q) for k, ln in enumerate((la, lb)) for q in inter if q.id in ln.closest]
        if near and min(near, key=lambda x: x[0])[0] < r_cap:
            d, k, q = min(near, key=lambda x: x[0])
            extra.append(_limit_line((la, lb)[k], q))
        else:
            log.warning("separatrix between directions %.15g and %.15g from %s did not resolve",
                        la.angle, lb.angle, o.id)
    out = sorted(list(pool.values()) + extra, key=lambda ln: ln.angle)
    return out


# -- orientation ------------------------------------------------------------------------------

def _sign_at(s: Scenario, target: cs.CriticalOrbit, X, C, W, k_source: int) -> int:
    Xk, Ck = s.canonicalize(X[None], np.array([C]))
    Wk = s.canonical_tangent(X[None], np.array([C]), W[None])[0]
    V = s.flow_field(Xk, Ck)[0]
    G = s.metric_matrix(Xk, Ck)[0]
    V = V / np.sqrt(V @ G @ V)
    q, Fq = cs.frame_at(s, target, Point(int(Ck[0]), Xk[0]))
    first = [V] + [Fq[:, i] for i in range(Fq.shape[1])]
    if len(first) != k_source:
        raise OrientationError(
            f"moduli tangents of dimension {k_source - len(first)} need a fiber orientation")
    comp = cs._gram_schmidt(first + list(np.eye(s.dimension)), G, tol=1e-12)[:, k_source:]
    basis = np.column_stack(first + [comp])
    M = np.linalg.solve(basis, Wk)[:k_source, :]
    det = np.linalg.det(M)
    if abs(det) < 1e-6:
        raise OrientationError(f"near-degenerate orientation (det={det:.3g})")
    return int(np.sign(det)) * int(target.orientation if target.index == 0 else 1)


def orientation_sign(s: Scenario, fl: FlowLine, orbits, start_sample: int = 0) -> int:
    """Sign of the flow line, recomputed by integrating the variational
    equation from sample ``start_sample`` with the transported frame."""
    target = next(o for o in orbits if o.id == fl.end_orbit)
    if start_sample == 0 and fl.W is not None and fl.entry >= 0:
        return _sign_at(s, target, fl.X[fl.entry], fl.C[fl.entry], fl.W[fl.entry], fl.W.shape[2])
    X0, C0, W0 = fl.X[start_sample][None], fl.C[start_sample][None], fl.W[start_sample][None]
    src = [o.id for o in orbits].index(fl.start_orbit)
    run = integrate_batch(s, X0, C0, orbits, W0=W0, exclude=src)
    (t, C, X, W), = run.trajectories()
    if run.end[0] < 0 or orbits[run.end[0]].id != fl.end_orbit:
        raise OrientationError("re-integration did not reach the same orbit")
    e = int(run.entry[0])
    return _sign_at(s, target, X[e], C[e], W[e], W.shape[2])


def assign_signs(s: Scenario, lines, orbits):
    for ln in lines:
        if ln.end_orbit is None or ln.W is None:
            continue
        target = next(o for o in orbits if o.id == ln.end_orbit)
        k = ln.W.shape[2]
        if k - 1 - target.index == 0:
            ln.sign = _sign_at(s, target, ln.X[ln.entry], ln.C[ln.entry], ln.W[ln.entry], k)
    return lines


# -- moduli covers --------------------------------------------------------------------------

def moduli_dimension(source: cs.CriticalOrbit, target: cs.CriticalOrbit) -> int:
    return source.index - target.index + source.dim - 1


def _winding(s: Scenario, source, target):
    """Degree of the endpoint map from the source orbit onto the target orbit."""
    if not s.action.is_circle or source.orbit_dim == 0 or target.orbit_dim == 0:
        return 1
    order = lambda o: o.isotropy.order if o.isotropy.kind == "cyclic" else 1
    return order(target) // order(source) if order(target) % order(source) == 0 else 1


def extract_moduli_cover(s: Scenario, source: cs.CriticalOrbit, target: cs.CriticalOrbit, lines,
                         orbits) -> ModuliCover:
    """Signed covering data of ``M(source, target)`` from shot flow lines."""
    dim = moduli_dimension(source, target)
    gap = source.index - target.index
    fiber_dim = dim - source.dim
    if source.id == target.id or target.value >= source.value:
        return ModuliCover(source.id, target.id, gap, dim, fiber_dim, [])
    if dim < 0:
        hits = [ln for ln in lines if ln.end_orbit == target.id]
        cert = f"virtual dimension {dim}; {'nonempty' if hits else 'empty'}"
        return ModuliCover(source.id, target.id, gap, dim, fiber_dim, [], lines=hits, certificate=cert)
    hits = [ln for ln in lines if ln.end_orbit == target.id and ln.status in CONNECTED]
    if fiber_dim == 0:
        assign_signs(s, hits, orbits)
        # sheets: group by source point; every point must see the same signed lines
        by_point: dict = {}
        for ln in hits:
            by_point.setdefault(round(ln.source_param, 9), []).append(ln)
        counts = {len(v) for v in by_point.values()}
        if len(counts) > 1:
            raise CoverError(f"sheet count varies over {source.id}: {sorted(counts)}")
        if not by_point:
            return ModuliCover(source.id, target.id, gap, dim, fiber_dim, [], lines=[])
        key = min(by_point)
        ref = sorted(by_point[key], key=lambda ln: (ln.angle if ln.angle is not None else 0.0,
                                                    float(ln.start_direction @ ln.start_direction)))
        sig = sorted(ln.sign for ln in ref)
        for v in by_point.values():
            if sorted(ln.sign for ln in v) != sig:
                raise CoverError(f"sheet signs vary over {source.id}")
        wind = _winding(s, source, target)
        sheets = [(int(ln.sign), wind) for ln in ref]
        return ModuliCover(source.id, target.id, gap, dim, fiber_dim, sheets, lines=hits)
    if fiber_dim == 1:
        integral = _fiber_integral(s, source, target, lines)
        return ModuliCover(source.id, target.id, gap, dim, fiber_dim, [], integral, lines=hits)
    raise NotImplementedError("fibers of dimension above 1")


def _fiber_integral(s: Scenario, source, target, lines, max_den: int = 4) -> Fraction:
    """Integral of the pulled-back normalised orbit form over the fiber arcs.

    The fiber at the representative is the set of descending directions that
    end on ``target``; along each arc the form integrates to the change of the
    endpoint's orbit parameter.  Fibers are oriented by decreasing angle.
    """
    if target.orbit_dim == 0 or not s.action.is_circle:
        return Fraction(0)
    at_rep = sorted([ln for ln in lines if ln.angle is not None and ln.source_param == lines[0].source_param],
                    key=lambda ln: ln.angle)
    total = 0.0
    T = s.action.circle_period
    n = len(at_rep)
    for i in range(n):
        a, b = at_rep[i], at_rep[(i + 1) % n]
        if a.end_orbit == target.id and b.end_orbit == target.id:
            pa = s.orbit_parameter(target.representative, Point(*_canon_end(s, a)))
            pb = s.orbit_parameter(target.representative, Point(*_canon_end(s, b)))
            step = (pb - pa + T / 2) % T - T / 2
            total -= step
    # normalised form: the fundamental field pairs to 1, so parameter change is the integral
    val = Fraction(total).limit_denominator(max_den)
    if abs(float(val) - total) > 1e-3:
        raise CoverError(f"fiber integral {total:.6g} does not snap to a rational")
    return val


def _canon_end(s, ln):
    X, C = s.canonicalize(ln.X[-1][None], ln.C[-1][None])
    return int(C[0]), X[0]


def compute_covers(s: Scenario, orbits, *, directions: int = 64, samples: int = 16, t_max: float = 60.0,
                   r_cap: float = CAPTURE_RADIUS):
    """Shoots every orbit of positive index and extracts all covers."""
    by_id = {o.id: o for o in orbits}
    lines = {}
    for o in orbits:
        if o.index >= 1:
            lines[o.id] = shoot_descending_sphere(s, o, directions, orbits, along=samples, t_max=t_max,
                                                  r_cap=r_cap)
    covers = {}
    for src_id, ls in lines.items():
        src = by_id[src_id]
        for tgt in orbits:
            if tgt.index < src.index and tgt.value < src.value:
                covers[(src_id, tgt.id)] = extract_moduli_cover(s, src, tgt, ls, orbits)
    return covers, lines


# -- transversality ----------------------------------------------------------------------------

def diagnose_transversality(s: Scenario, orbits, lines=None, *, directions: int = 16, along: int = 16,
                            t_max: float = 60.0, r_cap: float = CAPTURE_RADIUS):
    """Reports for every ordered pair with a connecting line (and the dimension counts)."""
    reports = []
    by_id = {o.id: o for o in orbits}
    if lines is None:
        lines = {}
        for o in orbits:
            if o.index >= 1:
                if o.kind == "critical_manifold" or o.index == 1:
                    lines[o.id] = _witness_search(s, o, orbits, along, t_max, r_cap=r_cap)
                else:
                    lines[o.id] = shoot_descending_sphere(s, o, directions, orbits, along=1, t_max=t_max,
                                                          r_cap=r_cap)
    for src_id, ls in lines.items():
        src = by_id[src_id]
        # unresolved lines might still reach any lower orbit
        open_ends = any(ln.status not in CONNECTED for ln in ls)
        for tgt in orbits:
            if tgt.id == src_id or tgt.value >= src.value:
                continue
            hits = [ln for ln in ls if ln.end_orbit == tgt.id and ln.status in CONNECTED]
            expected = src.index - tgt.index - 1
            weak = bool(hits) and src.index <= tgt.index
            if hits and expected < 0:
                verdict = "failure_detected"
            elif hits:
                verdict = "transverse"
            elif open_ends:
                verdict = "inconclusive"
            else:
                continue
            observed = _family_dim(src, hits)
            reports.append(TransversalityReport((src_id, tgt.id), verdict, expected, observed,
                                                hits[0] if hits else None, weak))
    return reports


def _family_dim(src, hits) -> int:
    """Dimension of the connecting family seen from one source point: an
    open arc of shooting angles means the whole descending circle direction
    is free, isolated angles mean isolated lines."""
    if not hits:
        return -1
    at_rep = [ln for ln in hits if ln.angle is not None and abs(ln.source_param) < 1e-12]
    distinct = {round(float(ln.angle), 9) for ln in at_rep}
    return src.index - 1 if len(distinct) >= 3 else 0


def _witness_search(s, o, orbits, along, t_max, rounds: int = 16, fan: int = 16, r_cap: float = CAPTURE_RADIUS):
    """Index-1 sources: shoot both directions from points along the source;
    on a critical manifold, refine between neighbouring points whose lines
    reach different orbits (or different members of a finite orbit)."""
    lines = shoot_descending_sphere(s, o, 2, orbits, along=along, t_max=t_max, r_cap=r_cap)
    if o.kind != "critical_manifold":
        return lines
    inter = {q.id for q in orbits if q.index >= 1 and q.id != o.id}
    curve_pts = cs.orbit_points(s, o, along)
    live = []  # [start, step, lo, hi, lo_key, sign]
    for sg_index in (0, 1):
        seq = lines[sg_index::2]
        for i in range(len(seq)):
            a, b = seq[i], seq[(i + 1) % len(seq)]
            lo_key = _end_key(s, orbits, a)
            if lo_key == _end_key(s, orbits, b):
                continue
            pa, pb = curve_pts[i], curve_pts[(i + 1) % len(seq)]
            step = s.displacement(*pb.batch(), *pa.batch())[0]
            live.append([pa, step, 0.0, 1.0, lo_key, 1.0 if sg_index == 0 else -1.0])
    found = []
    for _ in range(rounds):
        if not live:
            break
        us = [br[2] + (br[3] - br[2]) * np.arange(1, fan) / fan for br in live]
        X0 = np.concatenate([br[0].coords[None] + u[:, None] * br[1][None] for br, u in zip(live, us)])
        C0 = np.concatenate([np.full(len(u), br[0].chart) for br, u in zip(live, us)])
        X0, C0, _ = cs.newton_batch(s, X0, C0, iters=20)
        base, frames = [], []
        for x, c in zip(X0, C0):
            p, F = cs.frame_at(s, o, Point(int(c), x))
            base.append(p)
            frames.append(F)
        signs = np.concatenate([np.full(len(u), br[5]) for br, u in zip(live, us)])
        trial = _shoot_points(s, o, orbits, base, frames, [np.array([sg]) for sg in signs],
                              [0.0] * len(base), t_max, r_cap=r_cap)
        nxt, k = [], 0
        for br, u in zip(live, us):
            chunk, k = trial[k:k + len(u)], k + len(u)
            hit = next((ln for ln in chunk if ln.end_orbit in inter), None)
            if hit is not None:
                found.append(hit)
                continue
            j = next((j for j, ln in enumerate(chunk) if _end_key(s, orbits, ln) != br[4]), len(u))
            lo = br[2] if j == 0 else u[j - 1]
            hi = br[3] if j == len(u) else u[j]
            if hi - lo > 1e-15:
                nxt.append([br[0], br[1], lo, hi, br[4], br[5]])
        live = nxt
    if live:
        log.warning("%d witness brackets on %s did not resolve", len(live), o.id)
    return lines + _extend_back(s, o, orbits, found)


def _end_key(s, orbits, ln: FlowLine):
    """End orbit of a line and, for finite orbits, which member it reaches."""
    if ln.end_orbit is None:
        return None, -1
    o = next(q for q in orbits if q.id == ln.end_orbit)
    if not o.members:
        return o.id, 0
    Y, D = as_batch(o.members)
    X, C = ln.X[-1][None].repeat(len(Y), 0), np.repeat(ln.C[-1], len(Y))
    return o.id, int(np.argmin(s.distance(X, C, Y, D)))


