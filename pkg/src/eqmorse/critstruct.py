"""Critical orbits of an invariant function: Newton search, clustering into
orbits, normal Hessians, isotropy, the trivial/non-trivial split of the normal
space and frames of the negative normal bundle.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import MetricField, Point, Scenario, as_batch, sample_points

log = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-7
GRAD_TOL = 1e-11
CLUSTER_TOL = 1e-6


class DegenerateOrbitError(RuntimeError):
    """Normal Hessian has an eigenvalue inside the degeneracy band."""


class ConsistencyError(RuntimeError):
    """An internal linear-algebra identity failed."""


class FrameError(RuntimeError):
    """Frame requested on an orbit where it is not guaranteed to be trivial."""


@dataclass
class IsotropyDescriptor:
    kind: str  # "trivial", "cyclic", "full_circle"
    order: int = 1  # 0 for full_circle
    generators: list = field(default_factory=list)

    def __str__(self):
        if self.kind == "cyclic":
            return f"Z{self.order}"
        return {"trivial": "1", "full_circle": "S1"}[self.kind]

    def elements(self):
        if self.kind == "cyclic":
            g = self.generators[0]
            return [k * g for k in range(self.order)]
        return [0.0]


@dataclass
class NormalDecomposition:
    """Normal-space data at one point.  Column bases are g-orthonormal chart vectors."""

    point: Point
    tangent: np.ndarray          # (d, t) spans the critical set tangent
    normal_basis: np.ndarray     # (d, m)
    projector: np.ndarray        # (m, m) averaging projector in normal coordinates
    trivial_part: np.ndarray     # (d, a)
    nontrivial_part: np.ndarray  # (d, b)
    hessian_operator: np.ndarray  # (m, m) symmetric
    eigvals: np.ndarray
    eigvecs: np.ndarray          # (m, m), columns in normal coordinates
    neg: np.ndarray
    pos: np.ndarray
    zero: np.ndarray
    isotropy: IsotropyDescriptor

    def coords(self, V):
        """Normal coordinates of chart vectors (columns)."""
        return self.normal_basis.T @ self._G @ V

    _G: np.ndarray = None


@dataclass
class CriticalOrbit:
    id: str
    label: str
    representative: Point
    value: float
    orbit_dim: int
    index: int
    isotropy: IsotropyDescriptor
    stable: bool
    neg_frame: np.ndarray  # (d, index) at the representative
    orientation: int = 1   # sign attached to rank-0 bundles
    kind: str = "orbit"    # "orbit" or "critical_manifold"
    members: list = field(default_factory=list)  # finite orbits: all points
    curve: np.ndarray | None = None  # traced samples of a critical manifold
    nullity: int = 0

    @property
    def dim(self):
        """Dimension of the critical component."""
        return self.orbit_dim if self.kind == "orbit" else self.nullity + self.orbit_dim


# -- small linear algebra -----------------------------------------------------------

def _gram_schmidt(vectors, G, tol=1e-9):
    """Metric Gram-Schmidt over the columns; drops dependent ones."""
    out = []
    for v in vectors:
        w = np.array(v, dtype=float)
        for u in out:
            w = w - (u @ G @ w) * u
        nrm = np.sqrt(max(w @ G @ w, 0.0))
        if nrm > tol:
            out.append(w / nrm)
    d = G.shape[0]
    return np.array(out).T if out else np.zeros((d, 0))


def _single(s: Scenario, p: Point):
    X, C = p.batch()
    return X, C


def _fundamental_at(s: Scenario, p: Point):
    X, C = _single(s, p)
    return s.fundamental(X, C)[0]  # (k, d)


def orbit_dimension(s: Scenario, p: Point, tol: float = 1e-8) -> int:
    F = _fundamental_at(s, p)
    if F.shape[0] == 0:
        return 0
    G = s.metric_matrix(*_single(s, p))[0]
    return int(np.linalg.matrix_rank(F @ G @ F.T, tol=tol * tol))


# -- Newton search --------------------------------------------------------------------

def newton_batch(s: Scenario, X, C, iters: int = 80, max_step: float = 0.25):
    """Damped Newton on ``df = 0`` restricted to the metric complement of the
    fundamental fields.  Returns ``(X, C, converged)``."""
    X, C = s.canonicalize(X, C)
    done = np.zeros(len(X), dtype=bool)
    for _ in range(iters):
        g = s.differential(X, C)
        G = s.metric_matrix(X, C)
        gn = _grad_norm(s, X, C)
        done = gn < GRAD_TOL
        if np.all(done):
            break
        H = s.hessian(X, C)
        F = s.fundamental(X, C)  # (n, k, d)
        rows = np.einsum("nkd,nde->nke", F, G)
        A = np.concatenate([H, rows], axis=1)
        b = np.concatenate([-g, np.zeros((len(X), F.shape[1]))], axis=1)
        step = np.einsum("nij,nj->ni", np.linalg.pinv(A, rcond=1e-10), b)
        nrm = np.linalg.norm(step, axis=1)
        scale = np.where(nrm > max_step, max_step / np.maximum(nrm, 1e-300), 1.0)
        step = np.where(done[:, None], 0.0, step * scale[:, None])
        Xt, Ct = s.canonicalize(X + step, C)
        stalled = (_grad_norm(s, Xt, Ct) >= gn) & ~done
        if np.any(stalled):
            # Newton makes no progress where df lies in the kernel of the Hessian;
            # a short descent step moves the seed off such points
            gd = np.linalg.solve(G, g[..., None])[..., 0]
            gd = -0.1 * gd / np.maximum(np.linalg.norm(gd, axis=1, keepdims=True), 1e-300)
            Xs, Cs = s.canonicalize(X[stalled] + gd[stalled], C[stalled])
            Xt[stalled], Ct[stalled] = Xs, Cs
        X, C = Xt, Ct
    return X, C, _grad_norm(s, X, C) < 1e-10


def _grad_norm(s: Scenario, X, C):
    g = s.differential(X, C)
    G = s.metric_matrix(X, C)
    return np.sqrt(np.abs(np.einsum("ni,nij,nj->n", g, np.linalg.inv(G), g)))


def _newton_fixed(s: Scenario, p: Point, fixed: int, iters: int = 60) -> Point:
    """Newton in the coordinates other than ``fixed``."""
    X, C = p.batch()
    free = [i for i in range(s.dimension) if i != fixed]
    for _ in range(iters):
        g = s.differential(X, C)[0][free]
        if np.linalg.norm(g) < 1e-14:
            break
        H = s.hessian(X, C)[0][np.ix_(free, free)]
        X = X.copy()
        X[0, free] += np.linalg.lstsq(H, -g, rcond=None)[0]
        X, C = s.canonicalize(X, C)
    return Point(int(C[0]), X[0])


# -- isotropy and normal decomposition ------------------------------------------------

def isotropy_at(s: Scenario, p: Point, tol: float = 1e-10) -> IsotropyDescriptor:
    X, C = _single(s, p)
    if s.action.is_circle:
        if orbit_dimension(s, p) == 0:
            return IsotropyDescriptor("full_circle", 0, [])
        T = s.action.circle_period
        for m in range(12, 1, -1):
            Y, D = s.act(T / m, X, C)
            if s.distance(X, C, Y, D)[0] < tol:
                return IsotropyDescriptor("cyclic", m, [T / m])
        return IsotropyDescriptor("trivial", 1, [])
    fixing = []
    for a in s.action.elements():
        Y, D = s.act(a, X, C)
        if s.distance(X, C, Y, D)[0] < tol:
            fixing.append(a)
    if len(fixing) <= 1:
        return IsotropyDescriptor("trivial", 1, [])
    # subgroups of a cyclic group are cyclic: the smallest nonzero element generates
    gen = min(a for a in fixing if a != 0)
    return IsotropyDescriptor("cyclic", len(fixing), [gen])


def averaging_matrix(s: Scenario, p: Point, iso: IsotropyDescriptor, nodes: int = 64):
    """Average of the isotropy pushforwards at ``p`` as a chart matrix."""
    X, C = _single(s, p)
    d = s.dimension
    eye = np.eye(d)[None]
    if iso.kind == "full_circle":
        T = s.action.circle_period
        ts = np.linspace(0.0, T, nodes, endpoint=False)
        mats = [s.push(t, X, C, eye)[0] for t in ts]
    else:
        mats = [s.push(a, X, C, eye)[0] for a in iso.elements()]
    return np.mean(mats, axis=0)


def _tangent_directions(s: Scenario, p: Point, H, G, manifold: bool):
    F = _fundamental_at(s, p)
    vecs = [f for f in F if np.sqrt(abs(f @ G @ f)) > 1e-8]
    T = _gram_schmidt(vecs, G)
    if manifold:
        # add the kernel of the Hessian on the complement of the orbit
        comp = _complement(T, G)
        A = comp.T @ H @ comp
        w, V = np.linalg.eigh(0.5 * (A + A.T))
        ker = [comp @ V[:, i] for i in range(len(w)) if abs(w[i]) < DEGENERACY_TOL]
        T = _gram_schmidt(list(T.T) + ker, G)
    return T


def _complement(T, G):
    d = G.shape[0]
    return _gram_schmidt(list(T.T) + list(np.eye(d)), G)[:, T.shape[1]:]


def decompose_at(s: Scenario, p: Point, manifold: bool = False, iso: IsotropyDescriptor | None = None,
                 check: bool = True) -> NormalDecomposition:
    """Normal decomposition at an arbitrary critical point ``p``."""
    X, C = _single(s, p)
    G = s.metric_matrix(X, C)[0]
    H = s.hessian(X, C)[0]
    T = _tangent_directions(s, p, H, G, manifold)
    B = _complement(T, G)
    iso = isotropy_at(s, p) if iso is None else iso
    M = averaging_matrix(s, p, iso)
    P = B.T @ G @ M @ B
    if check and P.size and np.max(np.abs(P @ P - P)) > 1e-8:
        raise ConsistencyError(f"averaging projector at {p!r} is not idempotent")
    A = B.T @ H @ B
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A) if A.size else (np.zeros(0), np.zeros((0, 0)))
    Ps = 0.5 * (P + P.T)
    pw, PV = np.linalg.eigh(Ps) if Ps.size else (np.zeros(0), np.zeros((0, 0)))
    triv = B @ PV[:, pw > 0.5]
    nontriv = B @ PV[:, pw <= 0.5]
    nd = NormalDecomposition(
        point=p, tangent=T, normal_basis=B, projector=P, trivial_part=triv, nontrivial_part=nontriv,
        hessian_operator=A, eigvals=w, eigvecs=V,
        neg=B @ V[:, w < -DEGENERACY_TOL], pos=B @ V[:, w > DEGENERACY_TOL],
        zero=B @ V[:, np.abs(w) <= DEGENERACY_TOL], isotropy=iso,
    )
    nd._G = G
    return nd


def check_stability(nd: NormalDecomposition) -> bool:
    """Hessian operator positive definite on the non-trivial part."""
    if nd.nontrivial_part.shape[1] == 0:
        return True
    Q = nd.coords(nd.nontrivial_part)
    A = Q.T @ nd.hessian_operator @ Q
    return bool(np.linalg.eigvalsh(0.5 * (A + A.T)).min() > DEGENERACY_TOL)


def containment_residual(nd: NormalDecomposition) -> float:
    """How far the negative eigenspace sticks out of the trivial part."""
    if nd.neg.shape[1] == 0:
        return 0.0
    E = nd.coords(nd.neg)
    return float(np.max(np.abs(E - nd.projector @ E)))


def oriented_frame(s: Scenario, nd: NormalDecomposition) -> np.ndarray:
    """Orthonormal basis of the negative space, ordered and signed by the
    scenario reference directions."""
    k = nd.neg.shape[1]
    if k == 0:
        return nd.neg
    G = nd._G
    X, C = nd.point.batch()
    R = s.reference_vectors(X, C)[0]
    E = nd.neg
    out = []
    for j in range(R.shape[1]):
        if len(out) == k:
            break
        v = E @ (E.T @ G @ R[:, j])
        for u in out:
            v = v - (u @ G @ v) * u
        nrm = np.sqrt(max(v @ G @ v, 0.0))
        if nrm > 1e-6:
            out.append(v / nrm)
    for j in range(k):
        if len(out) == k:
            break
        v = E[:, j].copy()
        for u in out:
            v = v - (u @ G @ v) * u
        nrm = np.sqrt(max(v @ G @ v, 0.0))
        if nrm > 1e-6:
            out.append(v / nrm)
    return np.array(out).T


# -- critical manifolds that are not orbits ----------------------------------------------

def trace_critical_curve(s: Scenario, p: Point, step: float = 0.02, max_steps: int = 5000):
    """Follow a one-dimensional critical manifold through ``p`` until it closes."""
    X, C = p.batch()
    start = X.copy()
    pts = [X[0].copy()]
    prev = None
    for i in range(max_steps):
        nd = decompose_at(s, Point(int(C[0]), X[0]), manifold=True, iso=IsotropyDescriptor("trivial"),
                          check=False)
        t = nd.tangent[:, -1]
        if prev is not None and t @ prev < 0:
            t = -t
        prev = t
        Y = X + step * t[None] / max(np.linalg.norm(t), 1e-300)
        Y, C = s.canonicalize(Y, C)
        Y, C, _ = newton_batch(s, Y, C, iters=20)
        X = Y
        if i > 3 and s.distance(X, C, start, p.batch()[1])[0] < 0.75 * step:
            break
        pts.append(X[0].copy())
    return np.array(pts)


# -- main search ---------------------------------------------------------------------------

def default_seeds(s: Scenario, density: int = 8) -> list[Point]:
    return sample_points(s, density) + list(s.extra_seeds())


def _cluster(s: Scenario, X, C):
    order = np.lexsort(tuple(np.round(X.T[::-1], 9)) + (np.round(s.value(X, C), 9),))
    X, C = X[order], C[order]
    remaining = np.ones(len(X), dtype=bool)
    clusters = []
    for i in range(len(X)):
        if not remaining[i]:
            continue
        rep = Point(int(C[i]), X[i])
        idx = np.nonzero(remaining)[0]
        dist = s.orbit_distance(X[idx], C[idx], rep)
        hit = idx[dist <= CLUSTER_TOL]
        remaining[hit] = False
        remaining[i] = False
        clusters.append(rep)
    return clusters


def _dedupe(X, C, digits=7):
    keys = np.column_stack([C, np.round(X, digits)])
    _, first = np.unique(keys, axis=0, return_index=True)
    first = np.sort(first)
    return X[first], C[first]


def find_critical_orbits(s: Scenario, seeds: list[Point] | None = None) -> list[CriticalOrbit]:
    """All critical orbits reachable by Newton from the seeds, fully analysed."""
    seeds = default_seeds(s) if seeds is None else seeds
    if not seeds:
        raise ValueError("no seeds")
    X, C = as_batch(seeds)
    X, C, ok = newton_batch(s, X, C)
    if not np.all(ok):
        log.warning("%d of %d Newton seeds did not converge", int((~ok).sum()), len(ok))
    X, C = _dedupe(X[ok], C[ok])
    orbits: list[CriticalOrbit] = []
    curves = []
    for rep in _cluster(s, X, C):
        if any(_on_curve(s, rep, cv) for cv in curves):
            continue
        o = analyse_point(s, rep)
        if o.kind == "critical_manifold":
            curves.append(o.curve)
        orbits.append(o)
    orbits.sort(key=lambda o: (round(o.value, 9), o.label))
    seen: dict[str, int] = {}
    for o in orbits:
        n = seen.get(o.label, 0)
        seen[o.label] = n + 1
        o.id = o.label if n == 0 else f"{o.label}#{n}"
    return orbits


def _on_curve(s: Scenario, p: Point, curve, tol: float = 0.03):
    X, C = p.batch()
    Y = curve
    d = s.distance(np.repeat(X, len(Y), 0), np.repeat(C, len(Y)), Y, np.zeros(len(Y), dtype=int))
    return bool(d.min() < tol)


def analyse_point(s: Scenario, p: Point) -> CriticalOrbit:
    """Builds the :class:`CriticalOrbit` through the critical point ``p``."""
    rep, _ = s.orbit_representative(p)
    X, C = rep.batch()
    Xr, Cr, _ = newton_batch(s, X, C, iters=10)
    rep = Point(int(Cr[0]), Xr[0])
    nd = decompose_at(s, rep)
    kind = "orbit"
    curve = None
    nullity = 0
    if nd.zero.shape[1]:
        if s.g_morse_bott:
            raise DegenerateOrbitError(
                f"degenerate critical orbit at {s.display(rep)}: eigenvalues {nd.eigvals}")
        kind = "critical_manifold"
        nullity = nd.zero.shape[1]
        curve = trace_critical_curve(s, rep)
        rep = _curve_representative(s, curve)
        nd = decompose_at(s, rep, manifold=True)
        if nd.zero.shape[1]:
            raise DegenerateOrbitError("critical manifold is not Morse-Bott")
    label = s.label_for(rep) or f"C{s.display(rep)}"
    stable = check_stability(nd)
    members = []
    if not s.action.is_circle and kind == "orbit":
        for a in s.action.elements():
            Y, D = s.act(a, *rep.batch())
            q = Point(int(D[0]), Y[0])
            if all(s.distance(*q.batch(), *m.batch())[0] > 1e-9 for m in members):
                members.append(q)
    return CriticalOrbit(
        id=label, label=label, representative=rep, value=float(s.value(*rep.batch())[0]) + 0.0,
        orbit_dim=orbit_dimension(s, rep), index=int(nd.neg.shape[1]), isotropy=nd.isotropy,
        stable=stable, neg_frame=oriented_frame(s, nd), orientation=int(s.rank0_orientation.get(label, 1)),
        kind=kind, members=members, curve=curve, nullity=nullity,
    )


def _curve_representative(s: Scenario, curve) -> Point:
    """Point of a traced curve where the first coordinate is zero, if any."""
    x0 = curve[:, 0]
    period = s.charts[0].domain_box[0][1] - s.charts[0].domain_box[0][0]
    j = int(np.argmin(np.minimum(x0, period - x0)))
    p = Point(0, np.concatenate([[0.0], curve[j, 1:]]))
    return _newton_fixed(s, p, 0)


# -- public per-orbit operations ---------------------------------------------------------

def normal_decomposition(s: Scenario, o: CriticalOrbit, at: Point | None = None) -> NormalDecomposition:
    p = o.representative if at is None else at
    iso = o.isotropy if at is None else None
    return decompose_at(s, p, manifold=o.kind == "critical_manifold", iso=iso)


def negative_frame(s: Scenario, o: CriticalOrbit):
    """Frame at the representative plus the transport rule over the orbit."""
    if not o.stable:
        raise FrameError(f"frame not guaranteed trivial on unstable orbit {o.label}")
    return o.neg_frame, lambda q: frame_at(s, o, q)


def frame_at(s: Scenario, o: CriticalOrbit, q: Point):
    """Negative frame at the orbit point nearest ``q``, transported from the representative.

    Returns ``(point, frame)``.
    """
    if o.kind == "critical_manifold":
        X, C, _ = newton_batch(s, *q.batch(), iters=20)
        p = Point(int(C[0]), X[0])
        return p, oriented_frame(s, decompose_at(s, p, manifold=True))
    a = s.orbit_parameter(o.representative, q)
    X, C = o.representative.batch()
    Y, D = s.act(a, X, C)
    if o.neg_frame.shape[1] == 0:
        return Point(int(D[0]), Y[0]), o.neg_frame
    F = s.push(a, X, C, o.neg_frame[None])[0]
    return Point(int(D[0]), Y[0]), F


def orbit_points(s: Scenario, o: CriticalOrbit, count: int) -> list[Point]:
    """Evenly spaced points along the orbit (all members for finite orbits)."""
    if o.kind == "critical_manifold":
        idx = np.linspace(0, len(o.curve), count, endpoint=False).astype(int)
        return [Point(0, o.curve[i]) for i in idx]
    if not s.action.is_circle or o.orbit_dim == 0:
        return list(o.members) if o.members else [o.representative]
    X, C = o.representative.batch()
    # the orbit closes up after period / |isotropy|
    m = o.isotropy.order if o.isotropy.kind == "cyclic" else 1
    ts = np.linspace(0.0, s.action.circle_period / m, count, endpoint=False)
    Y, D = s.act(ts, np.repeat(X, count, 0), np.repeat(C, count))
    return [Point(int(c), y) for y, c in zip(Y, D)]


def with_metric(s: Scenario, metric: MetricField) -> Scenario:
    t = copy.copy(s)
    t.metric = metric
    return t


def check_stability_equivalences(s: Scenario, o: CriticalOrbit, metrics: list[MetricField]) -> list[dict]:
    """Per metric: stability verdict, containment verdict and whether they agree."""
    from .geometry import invariance_residuals
    out = []
    for m in metrics:
        t = with_metric(s, m)
        pts = orbit_points(t, o, 4)
        res = invariance_residuals(t, pts)
        if res["metric"] > 1e-8 or res["min_metric_eigenvalue"] <= 0:
            raise ValueError("metric is not invariant")
        nd = decompose_at(t, o.representative, iso=o.isotropy)
        stable = check_stability(nd)
        resid = containment_residual(nd)
        contained = resid <= 1e-8
        out.append({"stable": stable, "contained": contained, "residual": resid,
                    "agree": stable == contained})
    return out
