"""Scenario catalogue: coordinate models of closed manifolds with an invariant
function, an invariant metric and a compact group action.

All evaluators are vectorised.  A batch of points is a pair ``(X, C)`` where
``X`` has shape ``(n, dim)`` (chart coordinates) and ``C`` has shape ``(n,)``
(integer chart ids).  Single points are :class:`Point` instances.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

TWO_PI = 2.0 * np.pi


class ConfigurationError(ValueError):
    """Unknown catalogue entry or invalid parameters."""


class DomainError(ValueError):
    """Point outside every chart domain."""


@dataclass(frozen=True)
class CoordinateChart:
    id: str
    coordinate_names: tuple[str, ...]
    domain_box: tuple[tuple[float, float], ...]
    periodic: tuple[bool, ...]
    identification: str | None = None


@dataclass(frozen=True, eq=False)
class Point:
    chart: int
    coords: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float))

    def batch(self):
        return self.coords[None, :], np.array([self.chart])

    def __repr__(self):
        return f"Point(chart={self.chart}, coords={np.array2string(self.coords, precision=6)})"


def as_batch(points: Sequence[Point]):
    X = np.array([p.coords for p in points], dtype=float)
    C = np.array([p.chart for p in points], dtype=int)
    return X, C


def from_batch(X, C) -> list[Point]:
    return [Point(int(c), x.copy()) for x, c in zip(X, C)]


@dataclass(frozen=True)
class ScalarField:
    """Analytic value, differential and coordinate Hessian of a function."""

    value: Callable
    grad: Callable
    hess: Callable
    jet: Callable | None = None  # optional (X, C) -> (grad, hess) in one pass


@dataclass(frozen=True)
class MetricField:
    """Metric matrix ``G[k, l]`` and its derivatives ``dG[k, l, j] = d_j G[k, l]``."""

    matrix: Callable
    deriv: Callable


@dataclass(frozen=True)
class GroupActionDescriptor:
    """Action of Z_n or S^1 (or the trivial group) on a catalogue manifold.

    Group elements are reals: an integer ``k`` for Z_n, a parameter ``t`` in
    ``[0, circle_period)`` for the circle.  ``act`` and ``pushforward`` are
    vectorised in the points and broadcast the element.
    """

    group_kind: str
    act: Callable
    pushforward: Callable
    fundamental: Callable | None = None
    order: int = 1
    circle_period: float = 0.0

    @property
    def is_circle(self):
        return self.group_kind == "circle"

    @property
    def lie_dim(self):
        return 1 if self.is_circle else 0

    def compose(self, a, b):
        if self.is_circle:
            return np.mod(a + b, self.circle_period)
        return np.mod(np.round(a) + np.round(b), max(self.order, 1))

    def elements(self):
        """Finite groups: all elements.  Circle: not enumerable."""
        if self.is_circle:
            raise TypeError("circle group has no finite element list")
        return list(range(max(self.order, 1)))


class Scenario:
    """A catalogued manifold with invariant function, metric and action.

    Subclasses provide the chart models; the pipeline only talks to the
    vectorised evaluators and the geometric helpers below.
    """

    name: str = ""
    dimension: int = 0
    charts: tuple[CoordinateChart, ...] = ()

    def __init__(self, function: ScalarField, metric: MetricField,
                 action: GroupActionDescriptor, catalogue_params: dict | None = None):
        self.function = function
        self.metric = metric
        self.action = action
        self.catalogue_params = dict(catalogue_params or {})
        # label -> +-1, orientation of rank-0 negative normal bundles
        self.rank0_orientation: dict[str, int] = {}
        # scenario is G-Morse-Bott (False allows invariant Morse-Bott manifolds)
        self.g_morse_bott = True

    # -- evaluation -----------------------------------------------------
    def value(self, X, C):
        return self.function.value(X, C)

    def differential(self, X, C):
        return self.function.grad(X, C)

    def hessian(self, X, C):
        return self.function.hess(X, C)

    def metric_matrix(self, X, C):
        return self.metric.matrix(X, C)

    def gradient(self, X, C):
        """Metric gradient: solves ``G v = df`` at each point."""
        G = self.metric_matrix(X, C)
        return np.linalg.solve(G, self.differential(X, C)[..., None])[..., 0]

    def flow_field(self, X, C):
        return -self.gradient(X, C)

    def flow_jacobian(self, X, C):
        """Derivative of the negative gradient field, ``DV[i, j] = d_j V_i``."""
        G = self.metric_matrix(X, C)
        V = self.flow_field(X, C)
        dG = self.metric.deriv(X, C)
        H = self.hessian(X, C)
        # G dV_j = -(H[:, j] + dG_j V)
        rhs = -(H + np.einsum("nklj,nl->nkj", dG, V))
        return np.linalg.solve(G, rhs)

    def flow_field_and_jacobian(self, X, C):
        """``(V, DV)`` sharing one evaluation of the derivatives."""
        if self.function.jet is not None:
            g, H = self.function.jet(X, C)
        else:
            g, H = self.differential(X, C), self.hessian(X, C)
        G = self.metric_matrix(X, C)
        V = -np.linalg.solve(G, g[..., None])[..., 0]
        dG = self.metric.deriv(X, C)
        rhs = -(H + np.einsum("nklj,nl->nkj", dG, V))
        return V, np.linalg.solve(G, rhs)

    def inner(self, X, C, u, v):
        G = self.metric_matrix(X, C)
        return np.einsum("ni,nij,nj->n", u, G, v)

    # -- chart plumbing ---------------------------------------------------
    def canonicalize(self, X, C):
        return np.array(X, dtype=float), np.array(C, dtype=int)

    def canonical_tangent(self, X, C, V):
        """Pushes tangent vectors (``(n, d)`` or ``(n, d, k)``) along ``canonicalize``."""
        return np.array(V, dtype=float)

    def chart_switch(self, X, C):
        """Mask of integration states that should change chart, and the switch.

        Returns ``(mask, X', C', J)`` with ``J`` the Jacobian of the
        transition on the masked rows.  Single-chart models never switch.
        """
        mask = np.zeros(len(X), dtype=bool)
        return mask, X, C, None

    def in_domain(self, X, C):
        return np.all(np.isfinite(X), axis=-1)

    def distance(self, X, C, Y, D):
        """Approximate metric distance between canonical points (small separations)."""
        raise NotImplementedError

    def display(self, p: Point) -> tuple[float, ...]:
        return tuple(float(c) for c in p.coords)

    def displacement(self, X, C, Y, D):
        """Chart vector at ``Y`` pointing to the nearby point ``X`` (both canonical)."""
        return np.asarray(X, dtype=float) - np.asarray(Y, dtype=float)

    # -- group helpers ------------------------------------------------------
    def act(self, a, X, C):
        return self.action.act(a, X, C)

    def push(self, a, X, C, V):
        return self.action.pushforward(a, X, C, V)

    def fundamental(self, X, C):
        if self.action.fundamental is None:
            return np.zeros((len(X), 0, self.dimension))
        return self.action.fundamental(X, C)[:, None, :]

    def orbit_representative(self, p: Point) -> tuple[Point, float]:
        """Canonical point on the orbit of ``p`` and the element carrying it to ``p``."""
        return p, 0.0

    def orbit_distance(self, X, C, rep: Point):
        """Distance from each point to the group orbit of ``rep``."""
        if self.action.is_circle:
            return _circle_orbit_distance(self, X, C, rep)
        best = np.full(len(X), np.inf)
        for a in self.action.elements():
            Y, D = self.act(a, *rep.batch())
            d = self.distance(X, C, np.repeat(Y, len(X), 0), np.repeat(D, len(X)))
            best = np.minimum(best, d)
        return best

    def orbit_parameter(self, rep: Point, q: Point) -> float:
        """Group element ``a`` with ``a . rep`` closest to ``q``."""
        if not self.action.is_circle:
            X, C = q.batch()
            best, arg = np.inf, 0
            for a in self.action.elements():
                Y, D = self.act(a, *rep.batch())
                d = self.distance(X, C, Y, D)[0]
                if d < best - 1e-14:
                    best, arg = d, a
            return float(arg)
        return _circle_orbit_argmin(self, q, rep)

    # -- catalogue metadata -------------------------------------------------
    def reference_vectors(self, X, C):
        """Ordered reference directions ``(n, d, m)`` used to orient frames."""
        return np.broadcast_to(np.eye(self.dimension), (len(X), self.dimension, self.dimension)).copy()

    def landmarks(self) -> list[tuple[str, Point]]:
        return []

    def label_for(self, p: Point, tol: float = 2e-2) -> str | None:
        X, C = p.batch()
        best, label = tol, None
        for name, q in self.landmarks():
            d = self.orbit_distance(X, C, q)[0]
            if d < best:
                best, label = d, name
        return label

    def sample_grid(self, density: int):
        raise NotImplementedError

    def extra_seeds(self) -> list[Point]:
        return []


# -- circle orbit search -------------------------------------------------------

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _circle_orbit_profile(s: Scenario, X, C, rep: Point, t):
    """Distances from each point in ``X`` to ``t . rep``; ``t`` has shape (n,)."""
    R, D = s.act(t, np.repeat(rep.coords[None], len(t), 0), np.repeat(rep.chart, len(t)))
    return s.distance(X, C, R, D)


def _circle_orbit_search(s: Scenario, X, C, rep: Point, nodes: int = 64, iters: int = 60):
    T = s.action.circle_period
    n = len(X)
    grid = np.linspace(0.0, T, nodes, endpoint=False)
    d = np.stack([_circle_orbit_profile(s, X, C, rep, np.full(n, g)) for g in grid], axis=1)
    k = np.argmin(d, axis=1)
    h = T / nodes
    lo = grid[k] - h
    hi = grid[k] + h
    a = hi - _GOLDEN * (hi - lo)
    b = lo + _GOLDEN * (hi - lo)
    fa = _circle_orbit_profile(s, X, C, rep, a)
    fb = _circle_orbit_profile(s, X, C, rep, b)
    for _ in range(iters):
        left = fa < fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        na = hi - _GOLDEN * (hi - lo)
        nb = lo + _GOLDEN * (hi - lo)
        a_new = np.where(left, na, b)
        b_new = np.where(left, a, nb)
        fa_new = np.where(left, _circle_orbit_profile(s, X, C, rep, na), fb)
        fb_new = np.where(left, fa, _circle_orbit_profile(s, X, C, rep, nb))
        a, b, fa, fb = a_new, b_new, fa_new, fb_new
    t = 0.5 * (lo + hi)
    dist = _circle_orbit_profile(s, X, C, rep, t)
    return np.mod(t, T), np.minimum(dist, d.min(axis=1))


def _circle_orbit_distance(s, X, C, rep):
    return _circle_orbit_search(s, X, C, rep)[1]


def _circle_orbit_argmin(s, q: Point, rep: Point):
    X, C = q.batch()
    return float(_circle_orbit_search(s, X, C, rep)[0][0])


def _wrap(d, period):
    return d - period * np.round(d / period)


def _canon_periodic(x, period):
    y = x - period * np.floor(x / period)
    return np.where(y >= period, 0.0, y)


# -- round sphere with rotation about the z-axis --------------------------------

def _h(s):
    return (1.0 - s) / (1.0 + s)


def _dh(s):
    return -2.0 / (1.0 + s) ** 2


def _d2h(s):
    return 4.0 / (1.0 + s) ** 3


def _radial_field(q, dq, d2q):
    """Scalar field ``F(u) = q(|u|^2)`` with derivatives from those of ``q``."""

    def value(X, C):
        return q(np.einsum("ni,ni->n", X, X), C)

    def grad(X, C):
        s = np.einsum("ni,ni->n", X, X)
        return 2.0 * dq(s, C)[:, None] * X

    def hess(X, C):
        s = np.einsum("ni,ni->n", X, X)
        d = X.shape[1]
        return (4.0 * d2q(s, C)[:, None, None] * np.einsum("ni,nj->nij", X, X)
                + 2.0 * dq(s, C)[:, None, None] * np.eye(d))

    return ScalarField(value, grad, hess)


def _zsign(C):
    return np.where(np.asarray(C) == 0, 1.0, -1.0)


def _rotate(t, X):
    c, s = np.cos(t), np.sin(t)
    return np.stack([c * X[:, 0] - s * X[:, 1], s * X[:, 0] + c * X[:, 1]], axis=1)


def _rotate_vectors(t, V):
    t = np.broadcast_to(np.asarray(t, dtype=float), V.shape[:1])
    c, s = np.cos(t), np.sin(t)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    if V.ndim == 2:
        return np.einsum("nij,nj->ni", R, V)
    return np.einsum("nij,njk->nik", R, V)


class SphereScenario(Scenario):
    """Unit sphere, stereographic charts ``N`` (around the north pole) and ``S``.

    Chart ``N`` uses ``(x, y) / (1 + z)``, chart ``S`` uses ``(x, y) / (1 - z)``.
    A point is canonical in the chart where ``|u| <= 1`` (equator in ``N``).
    """

    dimension = 2
    charts = (
        CoordinateChart("N", ("u", "v"), ((-1.0, 1.0), (-1.0, 1.0)), (False, False)),
        CoordinateChart("S", ("u", "v"), ((-1.0, 1.0), (-1.0, 1.0)), (False, False)),
    )

    def __init__(self, name: str, kind: str):
        self.name = name
        self.kind = kind
        if kind == "height":
            function = _radial_field(
                lambda s, C: _zsign(C) * _h(s),
                lambda s, C: _zsign(C) * _dh(s),
                lambda s, C: _zsign(C) * _d2h(s),
            )
        elif kind == "one_minus_z2":
            function = _radial_field(
                lambda s, C: 1.0 - _h(s) ** 2,
                lambda s, C: -2.0 * _h(s) * _dh(s),
                lambda s, C: -2.0 * (_dh(s) ** 2 + _h(s) * _d2h(s)),
            )
        else:
            raise ConfigurationError(f"unknown sphere function {kind!r}")

        def metric(X, C):
            s = np.einsum("ni,ni->n", X, X)
            return (4.0 / (1.0 + s) ** 2)[:, None, None] * np.eye(2)

        def metric_deriv(X, C):
            s = np.einsum("ni,ni->n", X, X)
            dc = -8.0 / (1.0 + s) ** 3
            return np.einsum("n,kl,nj->nklj", 2.0 * dc, np.eye(2), X)

        def act(t, X, C):
            t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
            return _rotate(t, X), np.array(C, dtype=int)

        def pushforward(t, X, C, V):
            return _rotate_vectors(t, V)

        def fundamental(X, C):
            # rotation about +z reads the same in both charts
            return np.stack([-X[:, 1], X[:, 0]], axis=1)

        action = GroupActionDescriptor("circle", act, pushforward, fundamental,
                                       circle_period=TWO_PI)
        super().__init__(function, MetricField(metric, metric_deriv), action, {})

    # ambient coordinates ----------------------------------------------------
    def to_ambient(self, X, C):
        s = np.einsum("ni,ni->n", X, X)
        xy = 2.0 * X / (1.0 + s)[:, None]
        return np.column_stack([xy, _zsign(C) * _h(s)])

    def from_ambient(self, P) -> Point:
        x, y, z = (float(c) for c in np.asarray(P, dtype=float) / np.linalg.norm(P))
        if z >= 0:
            return Point(0, np.array([x, y]) / (1.0 + z))
        return Point(1, np.array([x, y]) / (1.0 - z))

    def ambient_jacobian(self, X, C):
        s = np.einsum("ni,ni->n", X, X)
        a = 2.0 / (1.0 + s)
        J = np.zeros((len(X), 3, 2))
        J[:, :2, :] = a[:, None, None] * np.eye(2) - (4.0 / (1.0 + s) ** 2)[:, None, None] * np.einsum("ni,nj->nij", X, X)
        J[:, 2, :] = (_zsign(C) * _dh(s) * 2.0)[:, None] * X
        return J

    def chart_vector(self, X, C, A):
        """Tangential projection of ambient vectors ``A`` (n, 3) into chart coordinates."""
        J = self.ambient_jacobian(X, C)
        G = self.metric_matrix(X, C)
        return np.linalg.solve(G, np.einsum("nai,na->ni", J, A)[..., None])[..., 0]

    def display(self, p):
        return tuple(float(c) for c in self.to_ambient(*p.batch())[0])

    # chart plumbing -----------------------------------------------------------
    def canonicalize(self, X, C):
        X = np.array(X, dtype=float)
        C = np.array(C, dtype=int)
        s = np.einsum("ni,ni->n", X, X)
        flip = (s > 1.0) | ((s == 1.0) & (C == 1))
        X[flip] = X[flip] / s[flip, None]
        C[flip] = 1 - C[flip]
        return X, C

    def _inversion_jacobian(self, X):
        s = np.einsum("ni,ni->n", X, X)
        return (np.eye(2)[None] * s[:, None, None] - 2.0 * np.einsum("ni,nj->nij", X, X)) / (s ** 2)[:, None, None]

    def canonical_tangent(self, X, C, V):
        V = np.array(V, dtype=float)
        s = np.einsum("ni,ni->n", X, X)
        flip = (s > 1.0) | ((s == 1.0) & (np.asarray(C) == 1))
        if np.any(flip):
            J = self._inversion_jacobian(X[flip])
            V[flip] = np.einsum("nij,nj...->ni...", J, V[flip])
        return V

    def chart_switch(self, X, C):
        s = np.einsum("ni,ni->n", X, X)
        mask = s > 4.0
        if not np.any(mask):
            return mask, X, C, None
        J = self._inversion_jacobian(X[mask])
        X2 = np.array(X)
        C2 = np.array(C)
        X2[mask] = X[mask] / s[mask, None]
        C2[mask] = 1 - C2[mask]
        return mask, X2, C2, J

    def in_domain(self, X, C):
        return np.all(np.isfinite(X), axis=-1) & np.isin(C, (0, 1))

    def distance(self, X, C, Y, D):
        return np.linalg.norm(self.to_ambient(X, C) - self.to_ambient(Y, D), axis=1)

    def displacement(self, X, C, Y, D):
        X = np.array(X, dtype=float)
        other = np.asarray(C) != np.asarray(D)
        s = np.einsum("ni,ni->n", X[other], X[other])
        X[other] = X[other] / s[:, None]
        return X - np.asarray(Y, dtype=float)

    def orbit_distance(self, X, C, rep):
        # orbits are latitude circles: compare polar angles
        za = np.clip(self.to_ambient(X, C)[:, 2], -1.0, 1.0)
        zr = np.clip(self.to_ambient(*rep.batch())[0, 2], -1.0, 1.0)
        return np.abs(np.arccos(za) - np.arccos(zr))

    def orbit_parameter(self, rep, q):
        a = self.to_ambient(*q.batch())[0]
        b = self.to_ambient(*rep.batch())[0]
        if np.hypot(b[0], b[1]) < 1e-14 or np.hypot(a[0], a[1]) < 1e-14:
            return 0.0
        return float(np.mod(np.arctan2(a[1], a[0]) - np.arctan2(b[1], b[0]), TWO_PI))

    def orbit_representative(self, p):
        a = self.to_ambient(*p.batch())[0]
        if np.hypot(a[0], a[1]) < 1e-14:
            return p, 0.0
        ang = float(np.arctan2(a[1], a[0]))
        X, C = self.act(-ang, *p.batch())
        X, C = self.canonicalize(X, C)
        X[0, 1] = 0.0
        return Point(int(C[0]), X[0]), float(np.mod(ang, TWO_PI))

    def reference_vectors(self, X, C):
        refs = [np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
        cols = [self.chart_vector(X, C, np.broadcast_to(r, (len(X), 3))) for r in refs]
        return np.stack(cols, axis=2)

    def landmarks(self):
        marks = [("N", Point(0, [0.0, 0.0])), ("S", Point(1, [0.0, 0.0]))]
        if self.kind == "one_minus_z2":
            marks.append(("N'", Point(0, [1.0, 0.0])))
        return marks

    def sample_grid(self, density):
        polar = np.linspace(0.0, np.pi, density)
        azim = np.linspace(0.0, TWO_PI, density, endpoint=False)
        P, A = np.meshgrid(polar, azim, indexing="ij")
        amb = np.column_stack([np.sin(P.ravel()) * np.cos(A.ravel()),
                               np.sin(P.ravel()) * np.sin(A.ravel()),
                               np.cos(P.ravel())])
        pts = [self.from_ambient(a) for a in amb]
        return as_batch(pts)


# -- mapping torus T^2 x [0,1] / (t1, t2, 0) ~ (-t1, t2, 1) -------------------------

class MappingTorusScenario(Scenario):
    """Mapping torus of the reflection ``t1 -> -t1`` with the circle acting by ``d/dtau``.

    Coordinates ``(t1, t2, tau)``; the lift to R^3 is used during integration
    (the field is invariant under the deck maps), canonical points have all
    coordinates in ``[0, 1)``.  A full turn of the circle takes parameter 2.
    """

    dimension = 3
    charts = (
        CoordinateChart("T", ("theta1", "theta2", "tau"), ((0.0, 1.0),) * 3, (True, True, True),
                        identification="(theta1, theta2, 0) ~ (-theta1, theta2, 1)"),
    )

    def __init__(self, name="mapping_torus", theta2_scale: float = 1.0):
        self.name = name
        k = TWO_PI

        def value(X, C):
            return (3.0 + np.cos(k * X[:, 0])) * np.sin(k * X[:, 1])

        def grad(X, C):
            a, b = k * X[:, 0], k * X[:, 1]
            g = np.zeros_like(X)
            g[:, 0] = -k * np.sin(a) * np.sin(b)
            g[:, 1] = k * (3.0 + np.cos(a)) * np.cos(b)
            return g

        def hess(X, C):
            a, b = k * X[:, 0], k * X[:, 1]
            H = np.zeros((len(X), 3, 3))
            H[:, 0, 0] = -k * k * np.cos(a) * np.sin(b)
            H[:, 0, 1] = H[:, 1, 0] = -k * k * np.sin(a) * np.cos(b)
            H[:, 1, 1] = -k * k * (3.0 + np.cos(a)) * np.sin(b)
            return H

        G0 = np.diag([1.0, float(theta2_scale), 1.0])

        def metric(X, C):
            return np.broadcast_to(G0, (len(X), 3, 3)).copy()

        def metric_deriv(X, C):
            return np.zeros((len(X), 3, 3, 3))

        def act(t, X, C):
            t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
            Y = np.array(X, dtype=float)
            Y[:, 2] = Y[:, 2] + t
            return self.canonicalize(Y, C)

        def pushforward(t, X, C, V):
            t = np.broadcast_to(np.asarray(t, dtype=float), (len(X),))
            wraps = np.floor(np.asarray(X)[:, 2] + t)
            sign = np.where(np.mod(wraps, 2) == 1, -1.0, 1.0)
            W = np.array(V, dtype=float)
            W[:, 0] = W[:, 0] * (sign if W.ndim == 2 else sign[:, None])
            return W

        def fundamental(X, C):
            F = np.zeros((len(X), 3))
            F[:, 2] = 1.0
            return F

        action = GroupActionDescriptor("circle", act, pushforward, fundamental, circle_period=2.0)
        super().__init__(ScalarField(value, grad, hess), MetricField(metric, metric_deriv), action,
                         {"theta2_scale": float(theta2_scale)})

    def canonicalize(self, X, C):
        Y = np.array(X, dtype=float)
        wraps = np.floor(Y[:, 2])
        Y[:, 2] = _canon_periodic(Y[:, 2], 1.0)
        odd = np.mod(wraps, 2) == 1
        Y[odd, 0] = -Y[odd, 0]
        Y[:, 0] = _canon_periodic(Y[:, 0], 1.0)
        Y[:, 1] = _canon_periodic(Y[:, 1], 1.0)
        return Y, np.zeros(len(Y), dtype=int)

    def canonical_tangent(self, X, C, V):
        wraps = np.floor(np.asarray(X)[:, 2])
        sign = np.where(np.mod(wraps, 2) == 1, -1.0, 1.0)
        W = np.array(V, dtype=float)
        W[:, 0] = W[:, 0] * (sign if W.ndim == 2 else sign[:, None])
        return W

    def distance(self, X, C, Y, D):
        X, _ = self.canonicalize(X, C)
        Y, _ = self.canonicalize(Y, D)
        G = self.metric_matrix(X, C)

        def norm(d):
            return np.sqrt(np.einsum("ni,nij,nj->n", d, G, d))

        d0 = np.column_stack([_wrap(X[:, 0] - Y[:, 0], 1.0), _wrap(X[:, 1] - Y[:, 1], 1.0), X[:, 2] - Y[:, 2]])
        # through the gluing: compare with (-t1, t2, tau +- 1)
        shift = np.where(X[:, 2] >= Y[:, 2], 1.0, -1.0)
        d1 = np.column_stack([_wrap(X[:, 0] + Y[:, 0], 1.0), d0[:, 1], X[:, 2] - Y[:, 2] - shift])
        return np.minimum(norm(d0), norm(d1))

    def displacement(self, X, C, Y, D):
        X = np.asarray(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        d0 = np.column_stack([_wrap(X[:, 0] - Y[:, 0], 1.0), _wrap(X[:, 1] - Y[:, 1], 1.0), X[:, 2] - Y[:, 2]])
        shift = np.where(X[:, 2] >= Y[:, 2], 1.0, -1.0)
        d1 = np.column_stack([_wrap(-X[:, 0] - Y[:, 0], 1.0), d0[:, 1], X[:, 2] - Y[:, 2] - shift])
        use = np.linalg.norm(d1, axis=1) < np.linalg.norm(d0, axis=1)
        return np.where(use[:, None], d1, d0)

    def orbit_distance(self, X, C, rep):
        X, _ = self.canonicalize(X, C)
        G = self.metric_matrix(X, C)[:, :2, :2]
        a, b = rep.coords[0], rep.coords[1]
        out = np.full(len(X), np.inf)
        for s in (1.0, -1.0):
            d = np.column_stack([_wrap(X[:, 0] - s * a, 1.0), _wrap(X[:, 1] - b, 1.0)])
            out = np.minimum(out, np.sqrt(np.einsum("ni,nij,nj->n", d, G, d)))
        return out

    def orbit_parameter(self, rep, q):
        # a . rep = (+-t1, t2, tau): parameter tau or tau + 1
        t = float(q.coords[2] - rep.coords[2])
        cand = [np.mod(t, 2.0), np.mod(t + 1.0, 2.0)]
        X, C = q.batch()
        d = [self.distance(X, C, *self.act(c, *rep.batch()))[0] for c in cand]
        return float(cand[int(np.argmin(d))])

    def orbit_representative(self, p):
        X, C = p.batch()
        tau = float(X[0, 2])
        Y, D = self.act(-tau, X, C)
        t = -tau
        if Y[0, 0] > 0.5:
            Y, D = self.act(1.0, Y, D)
            t += 1.0
        # the element carrying the representative back to p
        return Point(0, Y[0]), float(np.mod(-t, 2.0))

    def reference_vectors(self, X, C):
        R = np.zeros((len(X), 3, 3))
        R[:, 1, 0] = 1.0   # +theta2
        R[:, 0, 1] = -1.0  # -theta1
        R[:, 2, 2] = 1.0   # +tau
        return R

    def landmarks(self):
        return [("P2", Point(0, [0.0, 0.25, 0.0])), ("Q1", Point(0, [0.5, 0.25, 0.0])),
                ("R1", Point(0, [0.5, 0.75, 0.0])), ("S0", Point(0, [0.0, 0.75, 0.0]))]

    def sample_grid(self, density):
        g = np.linspace(0.0, 1.0, density, endpoint=False)
        A, B, T = np.meshgrid(g, g, g, indexing="ij")
        X = np.column_stack([A.ravel(), B.ravel(), T.ravel()])
        return self.canonicalize(X, np.zeros(len(X), dtype=int))


# -- torus with legs ------------------------------------------------------------------

class TorusWithLegsScenario(Scenario):
    """2-torus ``(phi, psi)`` with ``h_n = -(2 + cos n phi)(1 + cos psi)``.

    The metric is pulled back from the doughnut of radii R = 2, r = 1 and
    Z_n rotates ``phi`` by ``2 pi / n``.  The circle ``psi = pi`` is a
    critical manifold that is not a single group orbit.
    """

    dimension = 2
    charts = (
        CoordinateChart("T2", ("phi", "psi"), ((0.0, TWO_PI), (0.0, TWO_PI)), (True, True)),
    )
    R_MAJOR = 2.0
    R_MINOR = 1.0

    def __init__(self, n: int):
        self.name = "torus_with_legs"
        self.n = n
        R, r = self.R_MAJOR, self.R_MINOR

        def value(X, C):
            return -(2.0 + np.cos(n * X[:, 0])) * (1.0 + np.cos(X[:, 1]))

        def grad(X, C):
            p, q = X[:, 0], X[:, 1]
            return np.column_stack([n * np.sin(n * p) * (1.0 + np.cos(q)),
                                    (2.0 + np.cos(n * p)) * np.sin(q)])

        def hess(X, C):
            p, q = X[:, 0], X[:, 1]
            H = np.zeros((len(X), 2, 2))
            H[:, 0, 0] = n * n * np.cos(n * p) * (1.0 + np.cos(q))
            H[:, 0, 1] = H[:, 1, 0] = -n * np.sin(n * p) * np.sin(q)
            H[:, 1, 1] = (2.0 + np.cos(n * p)) * np.cos(q)
            return H

        def metric(X, C):
            G = np.zeros((len(X), 2, 2))
            G[:, 0, 0] = (R + r * np.cos(X[:, 1])) ** 2
            G[:, 1, 1] = r * r
            return G

        def metric_deriv(X, C):
            dG = np.zeros((len(X), 2, 2, 2))
            dG[:, 0, 0, 1] = -2.0 * r * (R + r * np.cos(X[:, 1])) * np.sin(X[:, 1])
            return dG

        def act(k, X, C):
            k = np.broadcast_to(np.asarray(k, dtype=float), (len(X),))
            Y = np.array(X, dtype=float)
            Y[:, 0] = Y[:, 0] + TWO_PI * np.round(k) / n
            return self.canonicalize(Y, C)

        def pushforward(k, X, C, V):
            return np.array(V, dtype=float)

        action = GroupActionDescriptor("finite_cyclic", act, pushforward, None, order=n)
        super().__init__(ScalarField(value, grad, hess), MetricField(metric, metric_deriv), action, {"n": n})
        self.g_morse_bott = False

    def canonicalize(self, X, C):
        Y = _canon_periodic(np.array(X, dtype=float), TWO_PI)
        return Y, np.zeros(len(Y), dtype=int)

    def distance(self, X, C, Y, D):
        d = _wrap(np.asarray(X) - np.asarray(Y), TWO_PI)
        G = self.metric_matrix(X, C)
        return np.sqrt(np.einsum("ni,nij,nj->n", d, G, d))

    def displacement(self, X, C, Y, D):
        return _wrap(np.asarray(X, dtype=float) - np.asarray(Y, dtype=float), TWO_PI)

    def orbit_representative(self, p):
        step = TWO_PI / self.n
        k = int(np.floor(p.coords[0] / step + 1e-12))
        Y, _ = self.act(-k, *p.batch())
        return Point(0, Y[0]), float(np.mod(k, self.n))

    def reference_vectors(self, X, C):
        R = np.zeros((len(X), 2, 2))
        R[:, 1, 0] = 1.0  # +psi
        R[:, 0, 1] = 1.0  # +phi
        return R

    def landmarks(self):
        n = self.n
        return [("S", Point(0, [0.0, np.pi])), ("p", Point(0, [np.pi / n, 0.0])),
                ("q", Point(0, [0.0, 0.0]))]

    def sample_grid(self, density):
        g = np.linspace(0.0, TWO_PI, density, endpoint=False)
        A, B = np.meshgrid(g, g, indexing="ij")
        X = np.column_stack([A.ravel(), B.ravel()])
        return self.canonicalize(X, np.zeros(len(X), dtype=int))


# -- catalogue ---------------------------------------------------------------------------

CATALOGUE = ("sphere_height", "sphere_stabilized", "torus_with_legs", "mapping_torus",
             "mapping_torus_stabilized")


def build_scenario(name: str, params: dict | None = None) -> Scenario:
    """Constructs a catalogue scenario by name."""
    params = dict(params or {})
    if name == "sphere_height":
        _no_params(name, params)
        return SphereScenario(name, "height")
    if name == "sphere_stabilized":
        _no_params(name, params)
        s = SphereScenario(name, "one_minus_z2")
        # basis sign of the south-pole generator, see README (orientation conventions)
        s.rank0_orientation["S"] = -1
        return s
    if name == "torus_with_legs":
        n = params.pop("n", 3)
        if params:
            raise ConfigurationError(f"unknown parameters for {name}: {sorted(params)}")
        if int(n) != n or n < 1:
            raise ConfigurationError(f"n must be a positive integer, got {n!r}")
        return TorusWithLegsScenario(int(n))
    if name == "mapping_torus":
        scale = params.pop("theta2_scale", 1.0)
        if params:
            raise ConfigurationError(f"unknown parameters for {name}: {sorted(params)}")
        if scale <= 0:
            raise ConfigurationError("theta2_scale must be positive")
        return MappingTorusScenario(name, float(scale))
    if name == "mapping_torus_stabilized":
        from .stabilize import mapping_torus_stabilized
        return mapping_torus_stabilized(**params)
    raise ConfigurationError(f"unknown scenario {name!r}; expected one of {CATALOGUE}")


def _no_params(name, params):
    if params:
        raise ConfigurationError(f"{name} takes no parameters, got {sorted(params)}")


# -- operations ------------------------------------------------------------------------

def evaluate_gradient(s: Scenario, x: Point) -> np.ndarray:
    """Metric gradient of the scenario function at ``x`` (chart components)."""
    X, C = x.batch()
    if not s.in_domain(X, C)[0]:
        raise DomainError(f"{x!r} is outside every chart of {s.name}")
    return s.gradient(X, C)[0]


def act_on_tangent(s: Scenario, a: float, x: Point, v) -> tuple[Point, np.ndarray]:
    """Pushforward of ``v`` at ``x`` by the group element ``a``; returns ``(a.x, da v)``."""
    X, C = x.batch()
    if not s.in_domain(X, C)[0]:
        raise DomainError(f"{x!r} is outside every chart of {s.name}")
    Y, D = s.act(a, X, C)
    W = s.push(a, X, C, np.asarray(v, dtype=float)[None])
    return Point(int(D[0]), Y[0]), W[0]


def sample_points(s: Scenario, density: int) -> list[Point]:
    """Deterministic grid over the chart domains, canonical and deduplicated."""
    if density < 2:
        raise ValueError("density must be at least 2")
    X, C = s.sample_grid(density)
    X, C = s.canonicalize(X, C)
    seen = set()
    out = []
    for x, c in zip(X, C):
        key = (int(c),) + tuple(np.round(x, 10) + 0.0)
        if key not in seen:
            seen.add(key)
            out.append(Point(int(c), x))
    return out


# -- invariance diagnostics ------------------------------------------------------------

def _group_samples(s: Scenario, count: int = 7):
    if s.action.is_circle:
        return list(np.linspace(0.0, s.action.circle_period, count, endpoint=False) + 0.37)
    return s.action.elements()


def invariance_residuals(s: Scenario, points: Sequence[Point], elements=None) -> dict:
    """Worst residuals of function and metric invariance over points x elements."""
    X, C = as_batch(points)
    elements = _group_samples(s) if elements is None else elements
    rng = np.random.default_rng(0)
    U = rng.standard_normal((len(X), s.dimension))
    V = rng.standard_normal((len(X), s.dimension))
    f0 = s.value(X, C)
    g0 = s.inner(X, C, U, V)
    fres = gres = 0.0
    for a in elements:
        Y, D = s.act(a, X, C)
        fres = max(fres, float(np.max(np.abs(s.value(Y, D) - f0))))
        gres = max(gres, float(np.max(np.abs(s.inner(Y, D, s.push(a, X, C, U), s.push(a, X, C, V)) - g0))))
    eig = np.linalg.eigvalsh(s.metric_matrix(X, C))
    return {"function": fres, "metric": gres, "min_metric_eigenvalue": float(eig.min())}


def action_residuals(s: Scenario, points: Sequence[Point]) -> dict:
    """Identity, composition and fundamental-field residuals of the action."""
    X, C = as_batch(points)
    Y, D = s.act(0.0, X, C)
    ident = float(np.max(s.distance(X, C, Y, D)))
    els = _group_samples(s, 5)
    comp = 0.0
    for a in els:
        for b in els:
            Z1 = s.act(a, *s.act(b, X, C))
            Z2 = s.act(s.action.compose(a, b), X, C)
            comp = max(comp, float(np.max(s.distance(*Z1, *Z2))))
    fund = 0.0
    if s.action.is_circle:
        # second-order match: a.x against x + a X(x) for a small a
        h = 1e-5
        F = s.fundamental(X, C)[:, 0, :]
        Xp, Cp = s.act(h, X, C)
        Xm, Cm = s.act(-h, X, C)
        Yp, Dp = s.canonicalize(X + h * F, C)
        Ym, Dm = s.canonicalize(X - h * F, C)
        fund = float(max(np.max(s.distance(Xp, Cp, Yp, Dp)), np.max(s.distance(Xm, Cm, Ym, Dm)))) / h
    return {"identity": ident, "composition": comp, "fundamental_field": fund}


def derivative_residuals(s: Scenario, points: Sequence[Point], h: float = 1e-5) -> dict:
    """Relative mismatch of analytic derivatives against central differences."""
    X, C = as_batch(points)
    g = s.differential(X, C)
    H = s.hessian(X, C)
    dG = s.metric.deriv(X, C)
    g_fd = np.zeros_like(g)
    H_fd = np.zeros_like(H)
    dG_fd = np.zeros_like(dG)
    for j in range(s.dimension):
        e = np.zeros(s.dimension)
        e[j] = h
        g_fd[:, j] = (s.value(X + e, C) - s.value(X - e, C)) / (2 * h)
        H_fd[:, :, j] = (s.differential(X + e, C) - s.differential(X - e, C)) / (2 * h)
        dG_fd[:, :, :, j] = (s.metric_matrix(X + e, C) - s.metric_matrix(X - e, C)) / (2 * h)

    def rel(a, b):
        scale = np.maximum(1.0, np.abs(b))
        return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0

    return {"gradient": rel(g, g_fd), "hessian": rel(H, H_fd), "metric": rel(dG, dG_fd)}
