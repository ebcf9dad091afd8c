"""Exact subset and set-partition combinatorics on small ground sets.

Subsets of ``{0, .., n-1}`` are bitmasks (``int``), partitions are tuples of
disjoint masks in canonical order.  Everything here is exact: identity checks
use ``fractions.Fraction`` and the formal-polynomial class below; floating
point is deliberately absent.

The canonical block order compares ``(min element, cardinality, mask)``; any
total order works for the indexing conventions used elsewhere, this one is
cheap and stable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from math import comb, factorial
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

MAX_GROUND = 12

Mask = int
Partition = Tuple[Mask, ...]


class GroundSetError(ValueError):
    """Raised when a subset argument violates an operation's domain."""


def full_mask(n: int) -> Mask:
    if not 1 <= n <= MAX_GROUND:
        raise GroundSetError(f"ground set size must be in 1..{MAX_GROUND}, got {n}")
    return (1 << n) - 1

def mask_of(elements: Iterable[int]) -> Mask:
    m = 0
    for e in elements:
        if not 0 <= e < MAX_GROUND:
            raise GroundSetError(f"element {e} out of range 0..{MAX_GROUND - 1}")
        m |= 1 << e
    return m

def elements_of(mask: Mask) -> List[int]:
    return [i for i in range(MAX_GROUND) if mask >> i & 1]

def card(mask: Mask) -> int:
    return bin(mask).count("1")


def subset_key(mask: Mask) -> Tuple[int, int, int]:
    """Canonical sort key: (minimum element, cardinality, mask value)."""
    if mask == 0:
        return (-1, 0, 0)
    return ((mask & -mask).bit_length() - 1, card(mask), mask)


def subsets_of(mask: Mask, nonempty: bool = True) -> List[Mask]:
    """All subsets of ``mask`` in canonical order."""
    out = []
    sub = mask
    while True:
        out.append(sub)
        if sub == 0:
            break
        sub = (sub - 1) & mask
    if nonempty:
        out = [s for s in out if s]
    out.sort(key=subset_key)
    return out


def canonical(blocks: Iterable[Mask]) -> Partition:
    return tuple(sorted(blocks, key=subset_key))


def validate_partition(sigma: Sequence[Mask], ground: Mask) -> None:
    union = 0
    for b in sigma:
        if b == 0:
            raise GroundSetError("partition contains an empty block")
        if union & b:
            raise GroundSetError("partition blocks are not disjoint")
        union |= b
    if union != ground:
        raise GroundSetError("partition blocks do not cover the ground subset")
    if tuple(sigma) != canonical(sigma):
        raise GroundSetError("partition blocks are not in canonical order")


def enumerate_partitions(mask: Mask) -> Iterator[Partition]:
    """Yield every partition of the nonempty subset ``mask`` exactly once.

    Recursion pins the lowest remaining element into each possible block, so
    the count equals the Bell number of ``|mask|``.
    """
    if mask == 0:
        raise GroundSetError("cannot partition the empty set")

    def rec(rest: Mask) -> Iterator[Tuple[Mask, ...]]:
        if rest == 0:
            yield ()
            return
        low = rest & -rest
        others = rest ^ low
        for extra in subsets_of(others, nonempty=False):
            block = low | extra
            for tail in rec(rest ^ block):
                yield (block,) + tail

    for blocks in rec(mask):
        yield canonical(blocks)


def bell_number(n: int) -> int:
    if n == 0:
        return 1
    row = [1]
    for _ in range(n - 1):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[-1]


ABSENT = None


def restrict_partition(sigma: Sequence[Mask], b: Mask) -> Optional[Partition]:
    """Blocks of ``sigma`` whose union is exactly ``b``, else ``None``.

    ``None`` is the marker for "no such decomposition exists": some block of
    ``sigma`` straddles the boundary of ``b``.
    """
    ground = 0
    for blk in sigma:
        ground |= blk
    if b & ~ground:
        raise GroundSetError("restriction target is not inside the partition's ground set")
    picked = []
    covered = 0
    for blk in sigma:
        inter = blk & b
        if inter == blk:
            picked.append(blk)
            covered |= blk
        elif inter:
            return ABSENT
    if covered != b:
        return ABSENT
    return canonical(picked)


def alternating_interval_sum(a: Mask, c: Mask) -> int:
    """Sum of (-1)^|B| over the interval a <= B <= c, evaluated directly."""
    if a & ~c:
        raise GroundSetError("lower set is not contained in upper set")
    total = 0
    free = c ^ a
    for extra in subsets_of(free, nonempty=False):
        total += (-1) ** card(a | extra)
    return total


# ---------------------------------------------------------------------------
# Formal multivariate polynomials over Fractions

@dataclass(frozen=True)
class FormalPoly:
    """Sparse polynomial with Fraction coefficients over named variables.

    Monomials are stored as sorted tuples of (variable, exponent) pairs; the
    zero polynomial has an empty term map.  Arithmetic is exact.
    """

    terms: Tuple[Tuple[Tuple[Tuple[str, int], ...], Fraction], ...]

    @staticmethod
    def _clean(d: Dict[Tuple[Tuple[str, int], ...], Fraction]) -> "FormalPoly":
        items = tuple(sorted((m, c) for m, c in d.items() if c != 0))
        return FormalPoly(items)

    @staticmethod
    def zero() -> "FormalPoly":
        return FormalPoly(())

    @staticmethod
    def const(c) -> "FormalPoly":
        c = Fraction(c)
        if c == 0:
            return FormalPoly.zero()
        return FormalPoly((((), c),))

    @staticmethod
    def var(name: str) -> "FormalPoly":
        return FormalPoly(((((name, 1),), Fraction(1)),))

    def _as_dict(self) -> Dict[Tuple[Tuple[str, int], ...], Fraction]:
        return dict(self.terms)

    def __add__(self, other: "FormalPoly") -> "FormalPoly":
        d = self._as_dict()
        for m, c in other.terms:
            d[m] = d.get(m, Fraction(0)) + c
        return self._clean(d)

    def __sub__(self, other: "FormalPoly") -> "FormalPoly":
        return self + other * Fraction(-1)

    def __mul__(self, other) -> "FormalPoly":
        if isinstance(other, (int, Fraction)):
            if other == 0:
                return FormalPoly.zero()
            return FormalPoly(tuple((m, c * Fraction(other)) for m, c in self.terms))
        d: Dict[Tuple[Tuple[str, int], ...], Fraction] = {}
        for m1, c1 in self.terms:
            for m2, c2 in other.terms:
                e: Dict[str, int] = {}
                for v, p in m1:
                    e[v] = e.get(v, 0) + p
                for v, p in m2:
                    e[v] = e.get(v, 0) + p
                mono = tuple(sorted(e.items()))
                d[mono] = d.get(mono, Fraction(0)) + c1 * c2
        return self._clean(d)

    __rmul__ = __mul__

    def is_zero(self) -> bool:
        return not self.terms

    def evaluate(self, values: Dict[str, Fraction]) -> Fraction:
        total = Fraction(0)
        for m, c in self.terms:
            acc = c
            for v, p in m:
                acc *= values[v] ** p
            total += acc
        return total

    def __repr__(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.terms:
            mono = "*".join(f"{v}^{p}" if p > 1 else v for v, p in m) or "1"
            parts.append(f"{c}*{mono}")
        return " + ".join(parts)


def product_expansion_identity(weights: Dict[Mask, Fraction]) -> bool:
    """Check prod_i (1 - w_i) == 1 + sum_{C nonempty} (-1)^|C| prod_{i in C} w_i.

    Verified both as a formal polynomial identity in one variable per element
    and numerically on the supplied rational weights.
    """
    for m in weights:
        if card(m) != 1:
            raise GroundSetError("weights must be keyed by singleton masks")
    ground = 0
    for m in weights:
        ground |= m

    lhs = FormalPoly.const(1)
    for m in weights:
        lhs = lhs * (FormalPoly.const(1) - FormalPoly.var(f"w{elements_of(m)[0]}"))
    rhs = FormalPoly.const(1)
    for c_mask in subsets_of(ground):
        term = FormalPoly.const((-1) ** card(c_mask))
        for i in elements_of(c_mask):
            term = term * FormalPoly.var(f"w{i}")
        rhs = rhs + term
    formal_ok = (lhs - rhs).is_zero()

    num_l = Fraction(1)
    for m, w in weights.items():
        num_l *= 1 - w
    num_r = Fraction(1)
    for c_mask in subsets_of(ground):
        p = Fraction((-1) ** card(c_mask))
        for i in elements_of(c_mask):
            p *= weights[1 << i]
        num_r += p
    return formal_ok and num_l == num_r


def inclusion_exclusion_transform(values: Dict[Mask, Fraction], a: Mask) -> Dict[Mask, Fraction]:
    """Apply t^B = -sum_{0 != C <= B} (-1)^|C| s^C for every nonempty B <= a.

    The transform converts union-hit rates into joint-hit rates and back; it
    is its own inverse, which the tests exercise on random rational inputs.
    """
    out: Dict[Mask, Fraction] = {}
    for b in subsets_of(a):
        total = Fraction(0)
        for c in subsets_of(b):
            if c not in values:
                raise GroundSetError(f"missing value for subset mask {c:#x}")
            total -= Fraction((-1) ** card(c)) * values[c]
        out[b] = total
    return out


def enumerate_cover_pairs(a: Mask, proper_only: bool = False) -> List[Tuple[Mask, Mask, int]]:
    """Ordered pairs (B, C) with B u C = a, both nonempty, tagged by |B n C| parity.

    With ``proper_only`` the pairs with B = a or C = a are dropped; the count
    is then 3^|a| - 2*2^|a| + 1, versus 3^|a| - 2 unfiltered.
    """
    if a == 0:
        raise GroundSetError("cover pairs need a nonempty ground subset")
    out = []
    for b in subsets_of(a):
        rest = a & ~b
        # C must contain rest and may contain any subset of b
        for extra in subsets_of(b, nonempty=False):
            c = rest | extra
            if c == 0:
                continue
            if proper_only and (b == a or c == a):
                continue
            out.append((b, c, card(b & c) & 1))
    return out


# ---------------------------------------------------------------------------
# Formal semilinear identities for the subset-indexed hit rates

def _formal_v_family(n: int, miss_constrained: bool) -> Dict[Mask, FormalPoly]:
    """Joint-hit rates as polynomials in the formal union-hit variables u^B."""
    ground = full_mask(n)
    fam: Dict[Mask, FormalPoly] = {}
    for a in subsets_of(ground):
        acc = FormalPoly.zero()
        for b in subsets_of(a):
            sign = (-1) ** (card(a) + card(b)) if miss_constrained else -((-1) ** card(b))
            acc = acc + FormalPoly.var(f"u{b}") * Fraction(sign)
        fam[a] = acc
    return fam


def _laplacian_halved(poly_in_u: FormalPoly, miss_constrained: bool) -> FormalPoly:
    """(1/2)Delta applied formally: each union-hit variable satisfies
    (1/2)Delta u^B = 2 (u^B)^2 (miss-constrained variant: the generating
    variables are u - u_B with (1/2)Delta u = 2u^2 and (1/2)Delta u_B = 2u_B^2).
    """
    out = FormalPoly.zero()
    for mono, coef in poly_in_u.terms:
        if len(mono) == 0:
            continue
        if len(mono) != 1 or mono[0][1] != 1:
            raise GroundSetError("formal Laplacian is only applied to linear expressions")
        (vname, _p) = mono[0]
        b = int(vname[1:])
        ub = FormalPoly.var(f"u{b}")
        if not miss_constrained:
            out = out + ub * ub * (2 * coef)
        else:
            # u^B = u - u_B: (1/2)Delta(u - u_B) = 2u^2 - 2(u - u^B)^2
            u = FormalPoly.var("u")
            diff = u * u - (u - ub) * (u - ub)
            out = out + diff * (2 * coef)
    return out


def verify_semilinear_identity(n: int, variant: str) -> Dict[str, bool]:
    """Exact polynomial check of the semilinear equation for joint-hit rates.

    ``variant='hit_only'``: with every union-hit rate solving
    (1/2)Delta u = 2u^2, the joint-hit rate of A satisfies

        (1/2)Delta v^A = -2 sum_{B u C = A, B,C nonempty} (-1)^{|B n C|} v^B v^C
                       = 2((2u^A + (-1)^{|A|} v^A) v^A
                            - sum_{B u C = A, B,C proper} (-1)^{|B n C|} v^B v^C).

    ``variant='miss_constrained'``: hit-each-and-miss-the-rest rates satisfy

        (1/2)Delta v^A = 4u v^A - 2 sum_{B u C = A} v^B v^C
                       = 2(2(u - u^A) + v^A) v^A - 2 sum_{proper} v^B v^C.

    Returns per-identity booleans; each residual must be the zero polynomial.
    """
    if variant not in ("hit_only", "miss_constrained"):
        raise GroundSetError(f"unknown variant {variant!r}")
    miss = variant == "miss_constrained"
    ground = full_mask(n)
    fam = _formal_v_family(n, miss)
    results: Dict[str, bool] = {}
    for a in [ground]:
        lhs = _laplacian_halved(fam[a], miss)

        # primary form of the right-hand side
        rhs1 = FormalPoly.zero()
        for b, c, par in enumerate_cover_pairs(a):
            coef = Fraction(-2) if miss else Fraction(-2) * ((-1) ** par)
            rhs1 = rhs1 + fam[b] * fam[c] * coef
        if miss:
            u = FormalPoly.var("u")
            rhs1 = rhs1 + u * fam[a] * Fraction(4)
        results["primary"] = (lhs - rhs1).is_zero()

        # separated form with the proper-pair sum pulled out
        va = fam[a]
        ua_poly = FormalPoly.var(f"u{a}")
        rhs2 = FormalPoly.zero()
        for b, c, par in enumerate_cover_pairs(a, proper_only=True):
            if miss:
                coef = Fraction(-2)
            else:
                coef = Fraction(-2) * ((-1) ** par)
            rhs2 = rhs2 + fam[b] * fam[c] * coef
        if miss:
            u = FormalPoly.var("u")
            rhs2 = rhs2 + (((u - ua_poly) * Fraction(2) + va) * va) * Fraction(2)
        else:
            rhs2 = rhs2 + ((ua_poly * Fraction(2) + va * Fraction((-1) ** card(a))) * va) * Fraction(2)
        results["separated"] = (lhs - rhs2).is_zero()
    return results


# ---------------------------------------------------------------------------
# Indicator identities for hit / miss events on synthetic sample spaces

def verify_hit_event_identities(n: int, trials: int, seed: int = 0) -> Dict[str, bool]:
    """Exhaustive indicator checks for the hit-each / miss-rest event algebra.

    Outcomes are labelled by (set of targets hit, complement-region hit flag).
    With U^A = {hit inside A only, complement missed}, V^A = {hit exactly the
    targets of A, complement missed}, U_A = {hit outside A}, U = {hit anything}:

      (a) U^A is the disjoint union of V^B over nonempty B <= A,
      (b) 1_{U^A} = 1_U - 1_{U_A},
      (c) 1_{V^A} = sum_{B <= A} (-1)^{|A|+|B|} 1_{U^B},

    checked outcome-by-outcome (exact), and in expectation with random
    rational outcome weights.
    """
    import random as _random

    rnd = _random.Random(seed)
    ground = full_mask(n)
    outcomes = [(h, c) for h in range(1 << n) for c in (0, 1)]

    def ind_U_upper(a: Mask, h: Mask, c: int) -> int:
        return 1 if (h & a) and not (h & ~a & ground) and c == 0 else 0

    def ind_V(a: Mask, h: Mask, c: int) -> int:
        return 1 if (h & a) == a and not (h & ~a & ground) and c == 0 and a != 0 else 0

    def ind_U_lower(a: Mask, h: Mask, c: int) -> int:
        return 1 if (h & ~a & ground) or c == 1 else 0

    def ind_U(h: Mask, c: int) -> int:
        return 1 if h or c else 0

    ok_a = ok_b = ok_c = True
    for a in subsets_of(ground):
        for (h, c) in outcomes:
            vs = [ind_V(b, h, c) for b in subsets_of(a)]
            if sum(vs) != ind_U_upper(a, h, c) or max(vs) > 1:
                ok_a = False
            if ind_U_upper(a, h, c) != ind_U(h, c) - ind_U_lower(a, h, c):
                ok_b = False
            alt = sum((-1) ** (card(a) + card(b)) * ind_U_upper(b, h, c) for b in subsets_of(a))
            if alt != ind_V(a, h, c):
                ok_c = False

    ok_weighted = True
    for _ in range(trials):
        weights = {oc: Fraction(rnd.randrange(0, 20), rnd.randrange(1, 20)) for oc in outcomes}
        for a in subsets_of(ground):
            ua = sum(w for oc, w in weights.items() if ind_U_upper(a, *oc))
            vsum = sum(
                sum(w for oc, w in weights.items() if ind_V(b, *oc))
                for b in subsets_of(a)
            )
            if ua != vsum:
                ok_weighted = False
    return {"disjoint_union": ok_a, "complement_split": ok_b, "alternating": ok_c, "weighted": ok_weighted}


# ---------------------------------------------------------------------------
# Exit-mass moment bound sequence

@dataclass(frozen=True)
class MomentSequence:
    """Dominating sequence for exit-mass moments, exact rationals.

    ``terms[k]`` is a_{k+1} with a_1 = c1 and
    a_{n+1} = c1 (2 c1^2)^n (2n)!/n!; the same sequence satisfies the
    convolution recursion a_n = 2 c1 sum_j C(n,j) a_{n-j} a_j.
    """

    c1: Fraction
    terms: Tuple[Fraction, ...]

    def a(self, n: int) -> Fraction:
        return self.terms[n - 1]


def moment_sequence(c1, n_max: int) -> MomentSequence:
    c1 = Fraction(c1)
    if c1 <= 0:
        raise GroundSetError("leading moment must be positive")
    if n_max > 20:
        raise GroundSetError("moment sequence capped at n_max = 20")
    terms = [c1]
    for n in range(1, n_max):
        terms.append(c1 * (2 * c1 ** 2) ** n * Fraction(factorial(2 * n), factorial(n)))
    seq = MomentSequence(c1, tuple(terms))
    for n in range(2, n_max + 1):
        conv = 2 * c1 * sum(Fraction(comb(n, j)) * seq.a(n - j) * seq.a(j) for j in range(1, n))
        if conv != seq.a(n):
            raise AssertionError(f"closed form and recursion disagree at n={n}")
    return seq


def dominated_sequence(c1_small, reference: MomentSequence) -> bool:
    """Propagate the recursion with a smaller seed and check domination.

    If c_1 <= a_1 and c_n = 2 c_1 sum C(n,j) c_{n-j} c_j, then c_n <= a_n
    term by term; this is the exact upper-bound structure used to control
    exit-mass moments.
    """
    c1 = Fraction(c1_small)
    if c1 > reference.c1:
        raise GroundSetError("seed must not exceed the reference leading term")
    n_max = len(reference.terms)
    cs = [c1]
    for n in range(2, n_max + 1):
        cs.append(2 * c1 * sum(Fraction(comb(n, j)) * cs[n - j - 1] * cs[j - 1] for j in range(1, n)))
    return all(cs[k] <= reference.terms[k] for k in range(n_max))


def growth_witness(seq: MomentSequence) -> float:
    """max_n a_n^{1/n} / n; finite because a_n <= n! M^n for fixed M."""
    import math

    best = 0.0
    for n, a in enumerate(seq.terms, start=1):
        val = math.exp(math.log(float(a)) / n) / n if a > 0 else 0.0
        best = max(best, val)
    return best
