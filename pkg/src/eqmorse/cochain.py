"""Cochain complexes built from invariant forms on critical orbits.

Every orbit is a point or a homogeneous circle, so its invariant forms are
spanned by the constant 1 (degree 0) and, on circles, the 1-form ``dtau``
normalised so that it pairs to 1 with the fundamental field.  The ordinary
differential pulls forms back to the moduli spaces along the endpoint at the
lower orbit and pushes them forward to the upper one; the Cartan complex
tensors with powers of the generator ``theta`` of the symmetric algebra of
the dual Lie algebra and adds the contraction term.

All matrices are exact ``Fraction`` arrays (lists of lists).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from math import lcm

from . import critstruct as cs


class AssemblyError(RuntimeError):
    """A differential entry is inconsistent with the grading or ``d^2 != 0``."""


class TruncationError(RuntimeError):
    """Cohomology requested in degrees affected by the theta truncation."""


class UnstableComplexError(RuntimeError):
    """Complex requested while some critical orbit is not stable."""


# -- generators -------------------------------------------------------------------------------

def generator_stem(label: str) -> str:
    """``S0 -> s``, ``Rbar0 -> rbar``, ``R1' -> r'``, ``N -> n``."""
    stem = re.sub(r"\d+", "", label).lower()
    return stem.replace("#", "")


@dataclass(frozen=True)
class InvariantFormBasis:
    orbit: str
    index: int
    degrees: tuple        # (0,) on points, (0, 1) on circles
    pairing: Fraction     # <dtau, fundamental field>; 0 on points
    stem: str

    def name(self, j: int) -> str:
        return f"{self.stem}{self.index}{j}"


def form_basis(o: cs.CriticalOrbit) -> InvariantFormBasis:
    if o.kind != "orbit":
        raise AssemblyError(f"{o.id} is a critical manifold, not a single orbit")
    circle = o.orbit_dim == 1
    return InvariantFormBasis(o.id, o.index, (0, 1) if circle else (0,), Fraction(1 if circle else 0),
                              generator_stem(o.label))


@dataclass(frozen=True)
class CartanGenerator:
    orbit: str
    form_degree: int       # j
    theta_power: int       # k (0 in the ordinary complex)
    total_degree: int      # i + j + 2k
    name: str

    @property
    def key(self):
        return (self.orbit, self.form_degree, self.theta_power)


def _label(base: str, k: int, cartan: bool) -> str:
    return f"{base}*theta^{k}" if cartan else base


@dataclass
class CochainComplex:
    variant: str                       # "ordinary" or "cartan"
    K: int
    generators: dict                   # degree -> [CartanGenerator]
    differential: dict                 # degree p -> matrix (rows: degree p+1, cols: degree p)
    bases: dict                        # orbit id -> InvariantFormBasis
    truncated: set = field(default_factory=set)   # degrees whose cohomology is unreliable
    safe_max: int | None = None

    def degrees(self):
        return sorted(self.generators)

    def gens(self, p: int):
        return self.generators.get(p, [])

    def matrix(self, p: int):
        rows, cols = len(self.gens(p + 1)), len(self.gens(p))
        return self.differential.get(p, _zeros(rows, cols))

    def apply(self, gen_name: str) -> dict:
        """``d`` of one generator as ``{name: coefficient}`` (nonzero entries)."""
        for p, gs in self.generators.items():
            for c, g in enumerate(gs):
                if g.name == gen_name:
                    M = self.matrix(p)
                    return {h.name: M[r][c] for r, h in enumerate(self.gens(p + 1)) if M[r][c] != 0}
        raise KeyError(gen_name)

    def euler_characteristic(self) -> int:
        return sum((-1) ** p * len(g) for p, g in self.generators.items())

    def check_square_zero(self):
        for p in self.degrees():
            prod = matmul(self.matrix(p + 1), self.matrix(p))
            if any(x != 0 for row in prod for x in row):
                raise AssemblyError(f"d o d != 0 from degree {p}")


# -- exact linear algebra --------------------------------------------------------------------

def _zeros(r, c):
    return [[Fraction(0)] * c for _ in range(r)]


def matmul(A, B):
    if not A or not B:
        rows = len(A)
        cols = len(B[0]) if B else 0
        return _zeros(rows, cols)
    n = len(B)
    return [[sum((A[i][k] * B[k][j] for k in range(n)), Fraction(0)) for j in range(len(B[0]))]
            for i in range(len(A))]


def integer_rows(A):
    """Scales each row by the lcm of its denominators."""
    out = []
    for row in A:
        m = lcm(*[x.denominator for x in row]) if row else 1
        out.append([int(x * m) for x in row])
    return out


def bareiss_rank(A) -> int:
    """Rank by fraction-free (Bareiss) elimination on an integer copy."""
    M = integer_rows(A)
    if not M or not M[0]:
        return 0
    rows, cols = len(M), len(M[0])
    r, prev = 0, 1
    for c in range(cols):
        piv = next((i for i in range(r, rows) if M[i][c] != 0), None)
        if piv is None:
            continue
        M[r], M[piv] = M[piv], M[r]
        for i in range(r + 1, rows):
            for j in range(c + 1, cols):
                M[i][j] = (M[i][j] * M[r][c] - M[i][c] * M[r][j]) // prev
            M[i][c] = 0
        prev = M[r][c]
        r += 1
        if r == rows:
            break
    return r


def rref(A):
    """Reduced row echelon form over the rationals; returns (R, pivot columns)."""
    R = [list(row) for row in A]
    if not R:
        return R, []
    rows, cols = len(R), len(R[0])
    pivots, r = [], 0
    for c in range(cols):
        piv = next((i for i in range(r, rows) if R[i][c] != 0), None)
        if piv is None:
            continue
        R[r], R[piv] = R[piv], R[r]
        inv = 1 / R[r][c]
        R[r] = [x * inv for x in R[r]]
        for i in range(rows):
            if i != r and R[i][c] != 0:
                f = R[i][c]
                R[i] = [a - f * b for a, b in zip(R[i], R[r])]
        pivots.append(c)
        r += 1
        if r == rows:
            break
    return R, pivots


def nullspace(A, ncols: int):
    """Basis of the kernel, one vector per free column (free entry 1)."""
    if not A:
        return [[Fraction(int(i == j)) for i in range(ncols)] for j in range(ncols)]
    R, piv = rref(A)
    free = [c for c in range(ncols) if c not in piv]
    basis = []
    for fc in free:
        v = [Fraction(0)] * ncols
        v[fc] = Fraction(1)
        for r, pc in enumerate(piv):
            v[pc] = -R[r][fc]
        basis.append(v)
    return basis


def column_space(A, ncols: int):
    """Columns of ``A`` as vectors (in the row space of the target)."""
    if not A:
        return []
    return [[A[r][c] for r in range(len(A))] for c in range(ncols)]


def span_rank(vectors) -> int:
    return bareiss_rank(vectors) if vectors else 0


# -- assembly ---------------------------------------------------------------------------------

def _check_stable(orbits, allow_unstable: bool):
    bad = [o.id for o in orbits if not o.stable]
    if bad and not allow_unstable:
        raise UnstableComplexError(f"unstable orbits {', '.join(bad)}; complex skipped")


def _contribution(cover, j: int, src_basis: InvariantFormBasis):
    """Pushforward of the pulled-back degree-``j`` form, landing in degree ``j - fiber_dim``."""
    jj = j - cover.fiber_dim
    if cover.fiber_dim == 0:
        val = cover.coefficient
    elif cover.fiber_dim == 1:
        # integrating a 0-form over a 1-dimensional fiber gives nothing
        val = cover.coefficient if j == 1 else Fraction(0)
    else:
        raise AssemblyError(f"fiber dimension {cover.fiber_dim} for {cover.source_orbit}->{cover.target_orbit}")
    if jj not in src_basis.degrees:
        # a j-form pulls back to zero on a moduli space of dimension below j
        pulled_to_zero = cover.fiber_dim == 0 and jj > max(src_basis.degrees)
        if val != 0 and not pulled_to_zero:
            raise AssemblyError(f"nonzero entry into missing degree {jj} on {cover.source_orbit}")
        return jj, Fraction(0)
    return jj, Fraction(val)


def _ordinary_entries(orbits, covers, bases):
    """``{(target_key, source_key): value}`` with keys ``(orbit, j)``; value at row ``source``."""
    entries = {}
    by_id = {o.id: o for o in orbits}
    for (src, tgt), cov in sorted(covers.items()):
        r = by_id[src].index - by_id[tgt].index
        if r < 1 or cov.dim < 0:
            continue
        for j in bases[tgt].degrees:
            jj, val = _contribution(cov, j, bases[src])
            if val != 0:
                sign = -1 if j % 2 else 1
                entries[((src, jj), (tgt, j))] = entries.get(((src, jj), (tgt, j)), Fraction(0)) + sign * val
    return entries


def _grade(generators):
    out: dict = {}
    for g in generators:
        out.setdefault(g.total_degree, []).append(g)
    return out


def _build(variant, K, graded, entries, bases, truncated=(), safe_max=None):
    pos = {p: {g.key: c for c, g in enumerate(gs)} for p, gs in graded.items()}
    diff = {}
    for p in sorted(graded):
        rows = len(graded.get(p + 1, []))
        diff[p] = _zeros(rows, len(graded[p]))
    for (row_key, col_key), val in entries.items():
        p = next((q for q in pos if col_key in pos[q]), None)
        if p is None:
            continue
        if row_key not in pos.get(p + 1, {}):
            if val != 0:
                raise AssemblyError(f"entry {col_key}->{row_key} breaks the grading")
            continue
        diff[p][pos[p + 1][row_key]][pos[p][col_key]] += val
    c = CochainComplex(variant, K, graded, diff, bases, set(truncated), safe_max)
    c.check_square_zero()
    return c


def assemble_ordinary(orbits, covers, *, allow_unstable: bool = False) -> CochainComplex:
    """Morse-Bott complex of invariant forms; entries ``(-1)^j`` times the cover contribution."""
    _check_stable(orbits, allow_unstable)
    bases = {o.id: form_basis(o) for o in orbits}
    gens = [CartanGenerator(o.id, j, 0, o.index + j, bases[o.id].name(j)) for o in orbits for j in bases[o.id].degrees]
    ent = _ordinary_entries(orbits, covers, bases)
    entries = {((s[0], s[1], 0), (t[0], t[1], 0)): v for (s, t), v in ent.items()}
    return _build("ordinary", 0, _grade(gens), entries, bases)


def assemble_cartan(orbits, covers, K: int, *, lie_dim: int = 1, allow_unstable: bool = False) -> CochainComplex:
    """Cartan complex truncated at ``theta^K``.

    The ordinary part acts as ``d (x) id`` on each power of theta; the
    contraction sends ``dtau (x) theta^k`` to ``-pairing * 1 (x) theta^(k+1)``.
    Images that would need ``theta^(K+1)`` are dropped and their degrees
    marked unreliable.  With ``lie_dim = 0`` (finite groups) the complex is
    the ordinary one.
    """
    _check_stable(orbits, allow_unstable)
    if K < 1:
        raise ValueError("truncation K must be at least 1")
    if lie_dim == 0:
        c = assemble_ordinary(orbits, covers, allow_unstable=allow_unstable)
        c.variant, c.K = "cartan", K
        return c
    bases = {o.id: form_basis(o) for o in orbits}
    gens = []
    for k in range(K + 1):
        for o in orbits:
            for j in bases[o.id].degrees:
                gens.append(CartanGenerator(o.id, j, k, o.index + j + 2 * k, _label(bases[o.id].name(j), k, True)))
    ent = _ordinary_entries(orbits, covers, bases)
    entries = {}
    for k in range(K + 1):
        for (s, t), v in ent.items():
            entries[((s[0], s[1], k), (t[0], t[1], k))] = v
    truncated = set()
    for o in orbits:
        b = bases[o.id]
        if 1 not in b.degrees or b.pairing == 0:
            continue
        for k in range(K + 1):
            if k == K:
                p = o.index + 1 + 2 * k
                truncated.update({p, p + 1})
                continue
            key = ((o.id, 0, k + 1), (o.id, 1, k))
            entries[key] = entries.get(key, Fraction(0)) - b.pairing
    max_j = max((max(b.degrees) for b in bases.values()), default=0)
    safe = 2 * K - 2 + max_j
    graded = _grade(gens)
    # top degrees lose generators with theta^(K+1) as well
    truncated.update(p for p in graded if p > safe)
    return _build("cartan", K, graded, entries, bases, truncated, safe)


# -- cohomology -----------------------------------------------------------------------------

@dataclass
class CohomologyReport:
    variant: str
    ranks: dict                 # degree -> rank
    representatives: dict       # degree -> [{generator name: Fraction}]
    safe_max: int | None = None
    module_note: str = ""


def cohomology(c: CochainComplex, degrees=None, *, acknowledge_truncation: bool = False) -> CohomologyReport:
    """Exact ranks ``dim ker d^p - rank d^(p-1)`` and representatives.

    Representatives are kernel basis vectors kept when independent of the
    image plus the ones already chosen.
    """
    if degrees is None:
        top = max(c.generators, default=0) if c.safe_max is None else c.safe_max
        degrees = range(0, top + 1)
    degrees = list(degrees)
    bad = [p for p in degrees if p in c.truncated]
    if bad and not acknowledge_truncation:
        raise TruncationError(f"degrees {bad} are affected by the theta truncation at K={c.K}")
    ranks, reps = {}, {}
    for p in degrees:
        gs = c.gens(p)
        n = len(gs)
        if n == 0:
            ranks[p], reps[p] = 0, []
            continue
        D = c.matrix(p)
        ker = nullspace(D, n) if D else nullspace([], n)
        image = column_space(c.matrix(p - 1), len(c.gens(p - 1))) if c.gens(p - 1) else []
        rank_in = bareiss_rank(c.matrix(p - 1)) if c.gens(p - 1) and c.gens(p) else 0
        ranks[p] = len(ker) - rank_in
        chosen, span = [], list(image)
        base_rank = span_rank(span)
        for v in ker:
            r = span_rank(span + [v])
            if r > base_rank:
                span.append(v)
                base_rank = r
                chosen.append({gs[i].name: x for i, x in enumerate(v) if x != 0})
        if len(chosen) != ranks[p]:
            raise AssemblyError(f"representative count {len(chosen)} != rank {ranks[p]} in degree {p}")
        reps[p] = chosen
    note = ""
    if c.variant == "cartan":
        note = f"theta acts by the degree-2 shift; checked to commute with d up to degree {c.safe_max}"
    return CohomologyReport(c.variant, ranks, reps, c.safe_max, note)


def theta_module_action(c: CochainComplex) -> dict:
    """Shift matrices ``S_p: C^p -> C^(p+2)``, ``w theta^k -> w theta^(k+1)``.

    Asserts ``d S = S d`` wherever neither side touches the truncation.
    """
    if c.variant != "cartan":
        raise ValueError("theta acts on the Cartan complex only")
    shifts = {}
    for p in c.degrees():
        tgt = {g.key: r for r, g in enumerate(c.gens(p + 2))}
        M = _zeros(len(c.gens(p + 2)), len(c.gens(p)))
        for col, g in enumerate(c.gens(p)):
            key = (g.orbit, g.form_degree, g.theta_power + 1)
            if key in tgt:
                M[tgt[key]][col] = Fraction(1)
        shifts[p] = M
    safe = c.safe_max if c.safe_max is not None else -1
    for p in c.degrees():
        if p + 3 > safe:
            continue
        lhs = matmul(c.matrix(p + 2), shifts[p])
        rhs = matmul(shifts.get(p + 1, _zeros(len(c.gens(p + 3)), len(c.gens(p + 1)))), c.matrix(p))
        if lhs != rhs:
            raise AssemblyError(f"theta shift does not commute with d in degree {p}")
    return shifts


# -- text form -------------------------------------------------------------------------------

def format_fraction(x: Fraction) -> str:
    return f"{x.numerator}" if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def format_complex(c: CochainComplex, max_degree: int | None = None) -> list[str]:
    """One line per generator: ``d(name) = sum``."""
    lines = [f"complex {c.variant}" + (f" K={c.K}" if c.variant == "cartan" else "")]
    for p in c.degrees():
        if max_degree is not None and p > max_degree:
            break
        lines.append(f"degree {p}: " + " ".join(g.name for g in c.gens(p)))
        for g in c.gens(p):
            img = c.apply(g.name)
            terms = " ".join(_term(v, n, i == 0) for i, (n, v) in enumerate(img.items()))
            lines.append(f"  d({g.name}) = {terms if terms else '0'}")
    return lines


def _term(v: Fraction, name: str, first: bool) -> str:
    mag = abs(v)
    coef = "" if mag == 1 else format_fraction(mag) + " "
    if first:
        return f"{'-' if v < 0 else ''}{coef}{name}"
    return f"{'-' if v < 0 else '+'} {coef}{name}"


def format_report(r: CohomologyReport) -> list[str]:
    lines = [f"cohomology {r.variant}"]
    for p in sorted(r.ranks):
        reps = "; ".join(" ".join(_term(v, n, i == 0) for i, (n, v) in enumerate(rep.items())) for rep in r.representatives[p])
        lines.append(f"  H^{p} rank {r.ranks[p]}" + (f"  [{reps}]" if reps else ""))
    if r.module_note:
        lines.append(f"  {r.module_note}")
    return lines
