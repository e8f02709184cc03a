"""Local stabilization of an unstable critical orbit.

The radial profile ``Phi`` turns the squared norm of the stabilized
coordinates into a function with a minimum at the origin and a maximum on a
small sphere of radius ``t0``; ``Psi`` is a plateau bump used to add a small
multiple of a sphere function ``h``.  Both are assembled from the quintic
smoothstep ``B(s) = 6 s^5 - 15 s^4 + 10 s^3``.

In closed-form Morse coordinates ``f = f(p) - |x_-|^2 + sum sigma_i x_i^2``
so adding ``excess(|x_-|) = Phi(|x_-|) + |x_-|^2 + eps Psi(|x_-|) h`` gives the
local model exactly.  A cutoff in the passive coordinates keeps the change
inside the slice neighbourhood.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import ConfigurationError, Point, ScalarField, Scenario, build_scenario
from . import critstruct as cs

log = logging.getLogger(__name__)


# -- quintic smoothstep ------------------------------------------------------------------

def blend(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def blend_d(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s * s * (s - 1.0) ** 2, 0.0)


def blend_dd(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 60.0 * s * (s - 1.0) * (2.0 * s - 1.0), 0.0)


# -- profiles ------------------------------------------------------------------------------

class ProfileError(RuntimeError):
    """The radial profile does not have the required critical points."""


@dataclass
class BumpProfile:
    lam: float
    delta: float
    t0: float = field(init=False)

    def __post_init__(self):
        if not (self.lam > 0 and self.delta > 0):
            raise ConfigurationError("lambda and delta must be positive")
        if not self.delta < self.lam / 4:
            raise ConfigurationError(f"delta={self.delta} must be below lambda/4={self.lam / 4}")
        self.t0 = locate_t0(self)

    @property
    def support(self):
        """Radius beyond which the profiles leave ``f`` unchanged."""
        return 3.0 * self.lam + self.delta


def _phi_parts(lam, t):
    t = np.asarray(t, dtype=float)
    u = (t - lam) / (2.0 * lam)
    return t, u


def phi(p: BumpProfile | float, t):
    """``t^2`` up to ``lam``, ``-t^2`` from ``3 lam``, blended in between."""
    lam = p.lam if isinstance(p, BumpProfile) else float(p)
    t, u = _phi_parts(lam, t)
    mid = (1.0 - 2.0 * blend(u)) * t * t
    return np.where(t <= lam, t * t, np.where(t >= 3.0 * lam, -t * t, mid))


def phi_prime(p, t):
    lam = p.lam if isinstance(p, BumpProfile) else float(p)
    t, u = _phi_parts(lam, t)
    mid = -blend_d(u) / lam * t * t + 2.0 * (1.0 - 2.0 * blend(u)) * t
    return np.where(t <= lam, 2.0 * t, np.where(t >= 3.0 * lam, -2.0 * t, mid))


def phi_second(p, t):
    lam = p.lam if isinstance(p, BumpProfile) else float(p)
    t, u = _phi_parts(lam, t)
    mid = (-blend_dd(u) / (2.0 * lam * lam) * t * t - 4.0 * blend_d(u) / lam * t
           + 2.0 * (1.0 - 2.0 * blend(u)))
    return np.where(t <= lam, 2.0, np.where(t >= 3.0 * lam, -2.0, mid))


def excess(p: BumpProfile, t):
    """``Phi(t) + t^2``, exactly zero from ``3 lam`` on."""
    t, u = _phi_parts(p.lam, t)
    return np.where(t <= p.lam, 2.0 * t * t, np.where(t >= 3.0 * p.lam, 0.0, 2.0 * (1.0 - blend(u)) * t * t))


def excess_prime(p: BumpProfile, t):
    t, u = _phi_parts(p.lam, t)
    mid = -blend_d(u) / p.lam * t * t + 4.0 * (1.0 - blend(u)) * t
    return np.where(t <= p.lam, 4.0 * t, np.where(t >= 3.0 * p.lam, 0.0, mid))


def excess_second(p: BumpProfile, t):
    t, u = _phi_parts(p.lam, t)
    mid = (-blend_dd(u) / (2.0 * p.lam ** 2) * t * t - 4.0 * blend_d(u) / p.lam * t
           + 4.0 * (1.0 - blend(u)))
    return np.where(t <= p.lam, 4.0, np.where(t >= 3.0 * p.lam, 0.0, mid))


def locate_t0(p: BumpProfile, grid: int = 4001) -> float:
    """Interior critical point of ``Phi`` by bisection on ``Phi'`` over ``(lam, 3 lam)``."""
    lam = p.lam
    ts = np.linspace(lam, 3.0 * lam, grid)[1:-1]
    d = phi_prime(lam, ts)
    changes = np.nonzero(np.sign(d[:-1]) != np.sign(d[1:]))[0]
    if len(changes) != 1:
        raise ProfileError(f"phi' has {len(changes)} sign changes on (lambda, 3 lambda)")
    a, b = ts[changes[0]], ts[changes[0] + 1]
    fa = phi_prime(lam, a)
    for _ in range(200):
        m = 0.5 * (a + b)
        fm = phi_prime(lam, m)
        if fm == 0 or b - a < 1e-15 * lam:
            break
        if np.sign(fm) == np.sign(fa):
            a, fa = m, fm
        else:
            b = m
    t0 = float(0.5 * (a + b))
    h = 1e-4 * lam
    curv = (phi(lam, t0 + h) - 2 * phi(lam, t0) + phi(lam, t0 - h)) / (h * h)
    if not (lam < t0 < 2 * lam) or not curv < 0:
        raise ProfileError(f"t0={t0} outside (lambda, 2 lambda) or not a maximum")
    return t0


def _psi_ramps(p: BumpProfile, t):
    lo = p.lam - p.delta
    up_w = p.t0 - p.lam
    down_start = p.t0 + p.delta
    down_w = 3.0 * p.lam - p.t0
    return (np.asarray(t, dtype=float) - lo) / up_w, (np.asarray(t, dtype=float) - down_start) / down_w, up_w, down_w


def _psi_flat(p: BumpProfile, t):
    """Masks of the exact plateaus (the ramp coordinates round at their ends)."""
    top = (t >= p.t0 - p.delta) & (t <= p.t0 + p.delta)
    off = (t <= p.lam - p.delta) | (t >= 3.0 * p.lam + p.delta)
    return top, off


def psi(p: BumpProfile, t):
    """Plateau: 0 up to ``lam - delta``, 1 on ``[t0 - delta, t0 + delta]``, 0 from ``3 lam + delta``."""
    t = np.asarray(t, dtype=float)
    u, v, _, _ = _psi_ramps(p, t)
    top, off = _psi_flat(p, t)
    ramp = np.where(t <= p.t0, blend(u), 1.0 - blend(v))
    return np.where(top, 1.0, np.where(off, 0.0, ramp))


def psi_prime(p: BumpProfile, t):
    t = np.asarray(t, dtype=float)
    u, v, uw, vw = _psi_ramps(p, t)
    top, off = _psi_flat(p, t)
    return np.where(top | off, 0.0, np.where(t <= p.t0, blend_d(u) / uw, -blend_d(v) / vw))


def psi_second(p: BumpProfile, t):
    t = np.asarray(t, dtype=float)
    u, v, uw, vw = _psi_ramps(p, t)
    top, off = _psi_flat(p, t)
    return np.where(top | off, 0.0, np.where(t <= p.t0, blend_dd(u) / uw ** 2, -blend_dd(v) / vw ** 2))


# -- closed-form Morse coordinates ---------------------------------------------------------

@dataclass
class MorseChart:
    """Invariant squared norms of the stabilized block ``D = |x_-|^2`` and the
    passive block ``E = |x_+|^2`` near one critical orbit, with derivatives.

    ``passive_signs`` lists the signs of the passive quadratic terms of ``f``.
    ``ray(r)`` is the point with ``|x_-| = r`` and ``x_+ = 0``.
    """

    target: str
    active: callable
    sq_active: callable   # X, C -> (D, dD, d2D)
    sq_passive: callable | None
    passive_signs: tuple
    stabilized_dim: int
    ray: callable
    max_radius: float          # largest |x_-| inside the chart
    max_passive_radius: float  # largest |x_+| inside the chart


def _zeros(n, d):
    return np.zeros(n), np.zeros((n, d)), np.zeros((n, d, d))


def _sphere_north_chart():
    def active(X, C):
        return np.asarray(C) == 0

    def sq(X, C):
        s = np.einsum("ni,ni->n", X, X)
        D = 2.0 * s / (1.0 + s)
        dD = 4.0 * X / ((1.0 + s) ** 2)[:, None]
        d2D = (4.0 / (1.0 + s) ** 2)[:, None, None] * np.eye(2) \
            - (16.0 / (1.0 + s) ** 3)[:, None, None] * np.einsum("ni,nj->nij", X, X)
        return D, dD, d2D

    def ray(r):
        s = r * r / (2.0 - r * r)
        return Point(0, [np.sqrt(s), 0.0])

    return MorseChart("N", active, sq, None, (), 2, ray, 1.0, np.inf)


def _mapping_torus_chart(target):
    k = 2.0 * np.pi
    if target == "P2":
        def active(X, C):
            return np.sin(k * X[:, 1]) > 0.5

        def sq(X, C):
            a, b = k * X[:, 0], k * X[:, 1]
            D = np.sin(b) * (1.0 - np.cos(a))
            dD = np.zeros((len(X), 3))
            dD[:, 0] = k * np.sin(b) * np.sin(a)
            dD[:, 1] = k * np.cos(b) * (1.0 - np.cos(a))
            H = np.zeros((len(X), 3, 3))
            H[:, 0, 0] = k * k * np.sin(b) * np.cos(a)
            H[:, 0, 1] = H[:, 1, 0] = k * k * np.cos(b) * np.sin(a)
            H[:, 1, 1] = -k * k * np.sin(b) * (1.0 - np.cos(a))
            return D, dD, H

        def sqp(X, C):
            b = k * X[:, 1]
            E = 4.0 * (1.0 - np.sin(b))
            dE = np.zeros((len(X), 3))
            dE[:, 1] = -4.0 * k * np.cos(b)
            H = np.zeros((len(X), 3, 3))
            H[:, 1, 1] = 4.0 * k * k * np.sin(b)
            return E, dE, H

        def ray(r):
            return Point(0, [np.arcsin(r / np.sqrt(2.0)) / np.pi, 0.25, 0.0])

        return MorseChart("P2", active, sq, sqp, (-1,), 1, ray, 1.0, 2.0 * np.sqrt(1.0 - 0.5))
    if target == "R1":
        def active(X, C):
            return np.sin(k * X[:, 1]) < 0.0

        def sq(X, C):
            a = k * X[:, 0]
            D = 1.0 + np.cos(a)
            dD = np.zeros((len(X), 3))
            dD[:, 0] = -k * np.sin(a)
            H = np.zeros((len(X), 3, 3))
            H[:, 0, 0] = -k * k * np.cos(a)
            return D, dD, H

        def sqp(X, C):
            a, b = k * X[:, 0], k * X[:, 1]
            E = (3.0 + np.cos(a)) * (1.0 + np.sin(b))
            dE = np.zeros((len(X), 3))
            dE[:, 0] = -k * np.sin(a) * (1.0 + np.sin(b))
            dE[:, 1] = k * (3.0 + np.cos(a)) * np.cos(b)
            H = np.zeros((len(X), 3, 3))
            H[:, 0, 0] = -k * k * np.cos(a) * (1.0 + np.sin(b))
            H[:, 0, 1] = H[:, 1, 0] = -k * k * np.sin(a) * np.cos(b)
            H[:, 1, 1] = -k * k * (3.0 + np.cos(a)) * np.sin(b)
            return E, dE, H

        def ray(r):
            return Point(0, [np.arccos(r / np.sqrt(2.0)) / np.pi, 0.75, 0.0])

        return MorseChart("R1", active, sq, sqp, (1,), 1, ray, 1.0, np.sqrt(2.0))
    raise ConfigurationError(f"no Morse chart for target {target!r}")


def morse_chart(s: Scenario, target: str) -> MorseChart:
    base = getattr(s, "base_name", s.name)
    if base == "sphere_height" and target == "N":
        return _sphere_north_chart()
    if base == "mapping_torus" and target in ("P2", "R1"):
        if s.catalogue_params.get("theta2_scale", 1.0) != 1.0:
            raise ConfigurationError("closed-form Morse chart assumes the product metric")
        return _mapping_torus_chart(target)
    raise ConfigurationError(f"no closed-form slice coordinates for {target!r} on {s.name}")


# -- recipes -------------------------------------------------------------------------------

@dataclass
class StabilizationRecipe:
    target: str
    profile: BumpProfile
    epsilon: float
    chart: MorseChart
    sphere_constant: float = 1.0
    passive_cutoff: float = 0.0

    @property
    def sphere_index(self):
        # a positive constant on the sphere: its critical set is the whole sphere, index 0
        return 0


def make_recipe(s: Scenario, target: str, lam: float, delta: float | None = None,
                epsilon: float | None = None, sphere_constant: float = 1.0) -> StabilizationRecipe:
    """Recipe with defaults ``delta = lam / 8`` and ``epsilon = lam^2 / 4``, validated."""
    delta = lam / 8.0 if delta is None else float(delta)
    epsilon = lam * lam / 4.0 if epsilon is None else float(epsilon)
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    if not sphere_constant > 0:
        raise ConfigurationError("sphere constant must be positive")
    profile = BumpProfile(float(lam), delta)
    chart = morse_chart(s, target)
    if profile.support >= chart.max_radius:
        raise ConfigurationError(f"slice support {profile.support:.3g} exceeds the chart radius {chart.max_radius}")
    o = _target_orbit(s, target)
    nd = cs.normal_decomposition(s, o)
    gap = float(np.min(np.abs(nd.eigvals)))
    if not epsilon * sphere_constant < min(0.1, lam * lam) * gap:
        raise ConfigurationError(f"epsilon={epsilon} too large for Hessian gap {gap:.3g}")
    # passive cutoff radius: padded slice radius, kept inside the chart
    rho = min(1.2 * (4.0 * lam + 2.0 * delta), 0.45 * chart.max_passive_radius)
    r = StabilizationRecipe(target, profile, epsilon, chart, float(sphere_constant), rho)
    if chart.sq_passive is not None and any(sg > 0 for sg in chart.passive_signs):
        # shell condition: 2|x+| beats the cutoff slope times the largest excess
        top = 2.0 * profile.support ** 2 + epsilon * sphere_constant
        if not 2.0 * rho > 1.875 / rho * top:
            log.warning("passive cutoff shell may carry spurious critical points (lambda=%g)", lam)
    return r


def _target_orbit(s: Scenario, target: str) -> cs.CriticalOrbit:
    marks = dict(s.landmarks())
    if target not in marks:
        raise ConfigurationError(f"unknown target orbit {target!r} on {s.name}")
    return cs.analyse_point(s, marks[target])


# -- the stabilized function ------------------------------------------------------------------

def _cutoff(rho, E):
    """``chi(sqrt(E))``: 1 up to ``rho``, 0 from ``2 rho``; derivatives in ``E``."""
    r = np.sqrt(np.maximum(E, 0.0))
    u = (r - rho) / rho
    inside = (r > rho) & (r < 2.0 * rho)
    rs = np.where(inside, r, 1.0)
    c = np.where(r <= rho, 1.0, np.where(r >= 2.0 * rho, 0.0, 1.0 - blend(u)))
    dr = -blend_d(u) / rho
    ddr = -blend_dd(u) / rho ** 2
    c1 = np.where(inside, dr / (2.0 * rs), 0.0)
    c2 = np.where(inside, (ddr - dr / rs) / (4.0 * rs * rs), 0.0)
    return c, c1, c2


def _radial(r: StabilizationRecipe, D):
    """``q(D) = excess(sqrt D) + eps c Psi(sqrt D)`` with derivatives in ``D``."""
    p = r.profile
    ec = r.epsilon * r.sphere_constant
    t = np.sqrt(np.maximum(D, 0.0))
    small = t < 0.5 * p.lam
    ts = np.where(small, 1.0, t)
    g = excess(p, t) + ec * psi(p, t)
    g1 = excess_prime(p, ts) + ec * psi_prime(p, ts)
    g2 = excess_second(p, ts) + ec * psi_second(p, ts)
    q = np.where(small, 2.0 * D, g)
    q1 = np.where(small, 2.0, g1 / (2.0 * ts))
    q2 = np.where(small, 0.0, (g2 - g1 / ts) / (4.0 * ts * ts))
    return q, q1, q2


def local_correction(r: StabilizationRecipe, X, C, order: int = 2):
    """``F - f`` with gradient and Hessian (up to ``order``) in chart coordinates."""
    n, d = X.shape
    val, grad, hess = _zeros(n, d)
    act = np.nonzero(r.chart.active(X, C))[0]
    if len(act) == 0:
        return val, grad, hess
    D, dD, d2D = r.chart.sq_active(X[act], np.asarray(C)[act])
    keep = D < r.profile.support ** 2
    if r.chart.sq_passive is not None:
        E, dE, d2E = r.chart.sq_passive(X[act], np.asarray(C)[act])
        keep &= E < (2.0 * r.passive_cutoff) ** 2
    if not np.any(keep):
        return val, grad, hess
    act, D, dD, d2D = act[keep], D[keep], dD[keep], d2D[keep]
    q, q1, q2 = _radial(r, D)
    if r.chart.sq_passive is None:
        E, dE, d2E = _zeros(len(act), d)
        c, c1, c2 = np.ones(len(act)), np.zeros(len(act)), np.zeros(len(act))
    else:
        E, dE, d2E = E[keep], dE[keep], d2E[keep]
        c, c1, c2 = _cutoff(r.passive_cutoff, E)
    val[act] = c * q
    if order >= 1:
        grad[act] = (c1 * q)[:, None] * dE + (c * q1)[:, None] * dD
    if order >= 2:
        outer = lambda a, b: np.einsum("ni,nj->nij", a, b)
        hess[act] = ((c2 * q)[:, None, None] * outer(dE, dE)
                     + (c1 * q1)[:, None, None] * (outer(dE, dD) + outer(dD, dE))
                     + (c1 * q)[:, None, None] * d2E
                     + (c * q2)[:, None, None] * outer(dD, dD)
                     + (c * q1)[:, None, None] * d2D)
    return val, grad, hess


def stabilized_local_function(r: StabilizationRecipe, x_minus, x_plus=(), h=None):
    """Local model ``sum sigma x_+^2 + Phi(|x_-|) + eps Psi(|x_-|) h`` in slice coordinates.

    Returns ``(value, gradient)`` with the gradient ordered as ``(x_-, x_+)``.
    """
    xm = np.atleast_1d(np.asarray(x_minus, dtype=float))
    xp = np.atleast_1d(np.asarray(x_plus, dtype=float))
    t = float(np.linalg.norm(xm))
    if t > r.profile.support + 4 * r.profile.lam or (xp.size and np.linalg.norm(xp) > 2 * r.passive_cutoff):
        raise ValueError("point outside the slice ball")
    hv = r.sphere_constant if h is None else float(h)
    p = r.profile
    signs = np.asarray(r.chart.passive_signs[: xp.size] if r.chart.passive_signs else [1] * xp.size, dtype=float)
    val = float(np.sum(signs * xp * xp) + phi(p, t) + r.epsilon * psi(p, t) * hv)
    if t < 0.5 * p.lam:
        gm = 2.0 * xm  # Phi = t^2 and Psi = 0 near the origin
    else:
        gm = (phi_prime(p, t) + r.epsilon * hv * psi_prime(p, t)) * xm / t
    return val, np.concatenate([gm, 2.0 * signs * xp])


class _StabilizedMixin:
    def landmarks(self):
        return self._stab_landmarks

    def extra_seeds(self):
        return self._stab_seeds


_CLASSES: dict = {}


def _stabilized_class(cls):
    if cls not in _CLASSES:
        _CLASSES[cls] = type("Stabilized" + cls.__name__, (_StabilizedMixin, cls), {})
    return _CLASSES[cls]


def _stem(label):
    return "".join(ch for ch in label if ch.isalpha())


def apply_stabilization(s: Scenario, recipes, name: str | None = None) -> Scenario:
    """New scenario whose function is ``f`` plus the local corrections."""
    if isinstance(recipes, StabilizationRecipe):
        recipes = [recipes]
    for r in recipes:
        o = _target_orbit(s, r.target)
        if o.stable:
            raise ConfigurationError(f"orbit {r.target} is already stable; stabilization refused")
    old = s.function

    def total(X, C, order):
        X = np.asarray(X, dtype=float)
        v, g, h = (np.zeros(len(X)), np.zeros(X.shape), np.zeros(X.shape + (X.shape[1],)))
        for r in recipes:
            a, b, c = local_correction(r, X, C, order)
            v, g, h = v + a, g + b, h + c
        return v, g, h

    def jet(X, C):
        _, g, h = total(X, C, 2)
        return old.grad(X, C) + g, old.hess(X, C) + h

    new = copy.copy(s)
    new.__class__ = _stabilized_class(type(s))
    new.function = ScalarField(
        lambda X, C: old.value(X, C) + total(X, C, 0)[0],
        lambda X, C: old.grad(X, C) + total(X, C, 1)[1],
        lambda X, C: old.hess(X, C) + total(X, C, 2)[2],
        jet,
    )
    new.base_name = getattr(s, "base_name", s.name)
    new.name = name or f"{s.name}_stabilized"
    new.recipes = list(recipes)
    new.catalogue_params = dict(s.catalogue_params)
    new.rank0_orientation = dict(s.rank0_orientation)
    marks = [(lab, p) for lab, p in s.landmarks() if lab not in {r.target for r in recipes}]
    seeds = list(s.extra_seeds())
    for r in recipes:
        npass = sum(1 for sg in r.chart.passive_signs if sg < 0)
        origin = f"{_stem(r.target)}bar{npass}"
        marks.append((origin, r.chart.ray(0.0)))
        marks.append((r.target + "'", r.chart.ray(r.profile.t0)))
        for t in np.linspace(0.0, r.profile.support, 13):
            seeds.append(r.chart.ray(float(t)))
        new.catalogue_params.update({f"{r.target}.lambda": r.profile.lam, f"{r.target}.delta": r.profile.delta,
                                     f"{r.target}.epsilon": r.epsilon})
    new._stab_landmarks = marks
    new._stab_seeds = seeds
    return new


def mapping_torus_stabilized(**params) -> Scenario:
    """Catalogue entry: the mapping torus stabilized at P2 and R1."""
    lam = float(params.pop("lambda", 0.1))
    delta = params.pop("delta", None)
    epsilon = params.pop("epsilon", None)
    if params:
        raise ConfigurationError(f"unknown parameters for mapping_torus_stabilized: {sorted(params)}")
    base = build_scenario("mapping_torus")
    recipes = [make_recipe(base, t, lam, delta, epsilon) for t in ("P2", "R1")]
    return apply_stabilization(base, recipes, name="mapping_torus_stabilized")


# -- verification -----------------------------------------------------------------------------

def verify_index_shift(s_old: Scenario, s_new: Scenario, r: StabilizationRecipe,
                       orbits_old=None, orbits_new=None) -> dict:
    """Checks the index of the new orbits created by one recipe.

    Orbits on the small sphere must have index ``index_h + 1`` plus the
    negative passive directions; the origin keeps only the passive negatives.
    """
    orbits_new = cs.find_critical_orbits(s_new) if orbits_new is None else orbits_new
    npass = sum(1 for sg in r.chart.passive_signs if sg < 0)
    rows = []
    ok = True
    for o in orbits_new:
        X, C = o.representative.batch()
        if not r.chart.active(X, C)[0]:
            continue
        D = r.chart.sq_active(X, C)[0][0]
        E = r.chart.sq_passive(X, C)[0][0] if r.chart.sq_passive else 0.0
        if E > 1e-12:
            continue
        rad = np.sqrt(max(D, 0.0))
        if rad < 1e-6:
            expected, where = npass, "origin"
        elif abs(rad - r.profile.t0) < 1e-6:
            expected, where = r.sphere_index + 1 + npass, "sphere"
        else:
            continue
        good = o.index == expected
        ok &= good
        rows.append({"orbit": o.label, "site": where, "index": o.index, "expected": expected, "ok": good})
    sites = {row["site"] for row in rows}
    ok &= sites == {"origin", "sphere"}
    return {"target": r.target, "ok": bool(ok), "rows": rows}


def c1_distance(s_old: Scenario, s_new: Scenario, X, C) -> float:
    """Sampled sup of ``|F - f| + |dF - df|``."""
    dv = np.abs(s_new.value(X, C) - s_old.value(X, C))
    dg = np.linalg.norm(s_new.differential(X, C) - s_old.differential(X, C), axis=1)
    return float(np.max(dv + dg))
