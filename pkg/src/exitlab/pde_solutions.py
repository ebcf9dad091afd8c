"""Nonlinear fields, killed potentials, and subset-indexed potential families.

The semilinear equation here is always ``Laplacian(u)/2 = 2 u^2``.  Three
concrete nonnegative solutions are provided: zero, the exact half-space
solution ``(3/2) x_d^{-2}``, and the radial boundary blow-up solution of a
ball obtained by shooting.

``build_potential_family`` assembles the subset-indexed family used by the
conditioned backbone: singletons are Martin kernels (or user-supplied
positive harmonic fields), larger subsets are built bottom-up from the
ordered-pair recursion

    v_A = 2 * sum over ordered proper nonempty B of  U( v_B * v_{A minus B} )

where ``U`` is the Green potential of the killed motion.  Pair fields with
antipodal targets in d = 4 are built by deterministic quadrature with the
closed-form ring-averaged Green kernel; everything else falls back to a
coarse Monte Carlo grid build (kept for structural experiments only).
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels as K
from . import geometry as geo
from .geometry import BoundaryTarget, DomainModel, DomainError
from .partitions import Mask, card, subsets_of


class FieldError(ValueError):
    pass


_EMPTY = np.zeros(1)
_EMPTY_GRID = (np.zeros(2), np.zeros(2))


# ---------------------------------------------------------------------------
# nonlinear fields g with Laplacian(g)/2 = 2 g^2

@dataclass(frozen=True)
class NonlinearField:
    """Nonnegative solution of the quadratic semilinear equation on a domain.

    ``variant`` is one of "zero", "half_space", "radial_blowup".  Radial
    profiles carry (r, u, u') tables; evaluation off the table uses cubic
    Hermite interpolation so the interpolant inherits the solver accuracy.
    """

    variant: str
    coef: float = 0.0
    dimension: int = 0
    radius: float = 0.0
    r_table: Optional[np.ndarray] = None
    u_table: Optional[np.ndarray] = None
    du_table: Optional[np.ndarray] = None

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.variant == "zero":
            return np.zeros(len(pts))
        if self.variant == "half_space":
            h = pts[:, -1]
            if np.any(h <= 0):
                raise FieldError("half-space field evaluated at nonpositive height")
            return self.coef / h ** 2
        r = np.linalg.norm(pts, axis=1)
        return self._hermite(r)

    def _hermite(self, r: np.ndarray) -> np.ndarray:
        rt, ut, dut = self.r_table, self.u_table, self.du_table
        r = np.clip(r, rt[0], rt[-1])
        idx = np.clip(np.searchsorted(rt, r) - 1, 0, len(rt) - 2)
        h = rt[idx + 1] - rt[idx]
        s = (r - rt[idx]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * ut[idx] + h10 * h * dut[idx] + h01 * ut[idx + 1] + h11 * h * dut[idx + 1]

    def kernel_pack(self) -> Tuple[int, float, np.ndarray, np.ndarray]:
        """(code, p0, radial grid, radial values) for the jitted kernels."""
        if self.variant == "zero":
            return K.GF_NONE, 0.0, _EMPTY, _EMPTY
        if self.variant == "half_space":
            return K.GF_HALFSPACE, self.coef, _EMPTY, _EMPTY
        return K.GF_RADIAL, 0.0, self.r_table, self.u_table

    def pde_residual(self, r: np.ndarray) -> np.ndarray:
        """|Laplacian(u)/2 - 2 u^2| / (1 + u^2) of the interpolant, radially."""
        if self.variant != "radial_blowup":
            raise FieldError("residual profile is defined for radial fields")
        d = self.dimension
        eps = 1e-5 * self.radius
        up = self._hermite(r + eps)
        um = self._hermite(r - eps)
        u0 = self._hermite(r)
        d2 = (up - 2 * u0 + um) / eps ** 2
        d1 = (up - um) / (2 * eps)
        resid = 0.5 * (d2 + (d - 1) * d1 / r) - 2.0 * u0 ** 2
        return np.abs(resid) / (1.0 + u0 ** 2)


def zero_field() -> NonlinearField:
    return NonlinearField("zero")


def half_space_solution() -> NonlinearField:
    """u(x) = (3/2) x_d^{-2} on the upper half-space; Laplacian u = 4 u^2."""
    return NonlinearField("half_space", coef=1.5)


def _blowup_radius(u0: float, d: int, r_stop: float, u_big: float = 1e10) -> float:
    """Radius at which the radial solution crosses u_big (proxy for blow-up)."""

    def rhs(r, y):
        u, du = y
        return [du, 4.0 * u * u - (d - 1) * du / r]

    r0 = 1e-6
    c = 2.0 * u0 * u0 / d
    y0 = [u0 + c * r0 * r0, 2.0 * c * r0]

    def hit(r, y):
        return y[0] - u_big

    hit.terminal = True
    hit.direction = 1
    sol = solve_ivp(rhs, (r0, r_stop), y0, rtol=1e-11, atol=1e-12, events=hit, max_step=r_stop / 50)
    if sol.t_events[0].size:
        return float(sol.t_events[0][0])
    return math.inf


def radial_blowup_solution(d: int, R: float = 1.0, tol: float = 1e-6, n_nodes: int = 60000) -> NonlinearField:
    """Radial boundary blow-up solution of the ball by bisection shooting.

    Larger central values blow up earlier, so the target radius is monotone
    in u(0) and plain bisection brackets it.  The returned table is refined
    geometrically toward the boundary; the Hermite interpolant keeps the
    normalized equation residual below ``tol`` on r <= 0.95 R.
    """
    if not 3 <= d <= 6:
        raise DomainError("dimension must be between 3 and 6")
    lo, hi = 0.1 / R ** 2, 1000.0 / R ** 2
    while _blowup_radius(lo, d, 3 * R) < R:
        lo *= 0.5
    while _blowup_radius(hi, d, 3 * R) > R:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _blowup_radius(mid, d, 3 * R) > R:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * hi:
            break
    u0 = 0.5 * (lo + hi)

    def rhs(r, y):
        u, du = y
        return [du, 4.0 * u * u - (d - 1) * du / r]

    r0 = 1e-6 * R
    c = 2.0 * u0 * u0 / d
    y0 = [u0 + c * r0 * r0, 2.0 * c * r0]
    r_max = R * (1.0 - 1e-4)
    # uniform inner section, geometric refinement toward the boundary
    n_in = n_nodes // 3
    inner = np.linspace(r0, 0.5 * R, n_in, endpoint=False)
    outer = R - np.geomspace(0.5 * R, R - r_max, n_nodes - n_in)
    grid = np.concatenate([inner, outer])
    sol = solve_ivp(rhs, (r0, r_max), y0, rtol=1e-11, atol=1e-12, t_eval=grid, max_step=R / 100)
    if not sol.success or sol.t[-1] < r_max * 0.9999:
        raise FieldError("radial blow-up integration failed to reach the boundary layer")
    return NonlinearField(
        "radial_blowup",
        dimension=d,
        radius=R,
        r_table=sol.t.copy(),
        u_table=sol.y[0].copy(),
        du_table=sol.y[1].copy(),
    )


# ---------------------------------------------------------------------------
# radial profiles for constant-boundary nonlinear data and linear companions

@dataclass(frozen=True)
class RadialTable:
    """Piecewise-linear radial profile on [0, R]; kernel-ready arrays."""

    r: np.ndarray
    v: np.ndarray

    def __call__(self, rr):
        return np.interp(rr, self.r, self.v)


def radial_nonlinear_profile(d: int, R: float, lam: float, n_nodes: int = 4001) -> RadialTable:
    """Solution of Laplacian(w)/2 = 2 w^2 on the ball with w = lam on the sphere.

    Radially symmetric, found by shooting on w(0); w is increasing so the
    boundary value is monotone in the central one.
    """
    grid = np.linspace(0.0, R, n_nodes)
    if lam == 0.0:
        return RadialTable(grid, np.zeros(n_nodes))
    if lam < 0.0:
        raise FieldError("boundary value must be nonnegative")

    def boundary_value(w0: float) -> float:
        def rhs(r, y):
            w, dw = y
            return [dw, 4.0 * w * w - (d - 1) * dw / r]

        r0 = 1e-9 * R
        c = 2.0 * w0 * w0 / d
        sol = solve_ivp(rhs, (r0, R), [w0 + c * r0 ** 2, 2 * c * r0], rtol=1e-11, atol=1e-13, dense_output=False, t_eval=[R])
        if not sol.success or sol.y[0].size == 0:
            return math.inf
        return float(sol.y[0][-1])

    lo, hi = 0.0, lam
    # w(0) < lam strictly; bisection on the increasing map w0 -> w(R)
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if boundary_value(mid) < lam:
            lo = mid
        else:
            hi = mid
    w0 = 0.5 * (lo + hi)

    def rhs(r, y):
        w, dw = y
        return [dw, 4.0 * w * w - (d - 1) * dw / r]

    r0 = 1e-9 * R
    c = 2.0 * w0 * w0 / d
    sol = solve_ivp(rhs, (r0, R), [w0 + c * r0 ** 2, 2 * c * r0], rtol=1e-11, atol=1e-13, t_eval=np.clip(grid, r0, R))
    vals = sol.y[0]
    vals[0] = w0
    return RadialTable(grid, vals)


def radial_killed_harmonic(d: int, R: float, rate: RadialTable, n_nodes: int = 4001) -> RadialTable:
    """F with Laplacian(F)/2 = 4 * rate * F, F'(0) = 0, normalized F(R) = 1.

    This is the Feynman-Kac value E[ exp(-int 4*rate) ] of the exit problem,
    solved as a linear radial ODE (solution scaled after integration).
    """
    grid = np.linspace(0.0, R, n_nodes)

    def rhs(r, y):
        f, df = y
        return [df, 8.0 * float(rate(r)) * f - (d - 1) * df / r]

    r0 = 1e-9 * R
    w0 = float(rate(0.0))
    c = 4.0 * w0 / d
    sol = solve_ivp(rhs, (r0, R), [1.0 + c * r0 ** 2, 2 * c * r0], rtol=1e-11, atol=1e-13, t_eval=np.clip(grid, r0, R))
    vals = sol.y[0]
    vals[0] = 1.0
    return RadialTable(grid, vals / vals[-1])


def radial_killed_potential(d: int, R: float, rate: RadialTable, source: RadialTable, n_nodes: int = 4001) -> RadialTable:
    """Phi with Laplacian(Phi)/2 - 4*rate*Phi = -source, Phi(R) = 0, Phi'(0) = 0.

    Particular solution plus a multiple of the killed-harmonic homogeneous
    solution chosen to zero the boundary value.
    """
    grid = np.linspace(0.0, R, n_nodes)

    def rhs(r, y):
        f, df, h, dh = y
        s = float(source(r))
        w = float(rate(r))
        return [
            df,
            8.0 * w * f - 2.0 * s - (d - 1) * df / r,
            dh,
            8.0 * w * h - (d - 1) * dh / r,
        ]

    r0 = 1e-9 * R
    s0 = float(source(0.0))
    w0 = float(rate(0.0))
    cpart = (4.0 * w0 * 0.0 - 2.0 * s0) / (2.0 * d)
    chom = 4.0 * w0 / d
    y0 = [cpart * r0 ** 2, 2 * cpart * r0, 1.0 + chom * r0 ** 2, 2 * chom * r0]
    sol = solve_ivp(rhs, (r0, R), y0, rtol=1e-10, atol=1e-13, t_eval=np.clip(grid, r0, R))
    part = sol.y[0]
    hom = sol.y[2]
    cmix = -part[-1] / hom[-1]
    vals = part + cmix * hom
    vals[0] = vals[1] if n_nodes > 1 else vals[0]
    return RadialTable(grid, vals)


# ---------------------------------------------------------------------------
# scalar fields over the domain

class MartinField:
    """Positive harmonic field with a boundary pole, normalized at the base point."""

    def __init__(self, dom: DomainModel, x0, pole):
        self.dom = dom
        self.x0 = np.asarray(x0, dtype=float)
        self.pole = np.asarray(pole, dtype=float)
        x0t = self.x0 - dom.center_array
        R = dom.radius
        self._invnorm = float(np.linalg.norm(self.x0 - self.pole)) ** dom.dimension / (R * R - float(x0t @ x0t))

    @property
    def invnorm(self) -> float:
        return self._invnorm

    def value(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.dom.dimension
        ct = pts - self.dom.center_array
        dist = np.linalg.norm(pts - self.pole, axis=1)
        surf = self.dom.radius ** 2 - np.einsum("ij,ij->i", ct, ct)
        with np.errstate(divide="ignore"):
            return self._invnorm * surf / dist ** d

    def gradient(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.dom.dimension
        ct = pts - self.dom.center_array
        dz = pts - self.pole
        r2 = np.einsum("ij,ij->i", dz, dz)
        surf = self.dom.radius ** 2 - np.einsum("ij,ij->i", ct, ct)
        grad = -2.0 * ct * r2[:, None] ** (-d / 2) - d * surf[:, None] * r2[:, None] ** (-d / 2 - 1) * dz
        return self._invnorm * grad


class CallableField:
    """Adapter for a user-supplied positive field with optional gradient."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], grad: Optional[Callable] = None, h_fd: float = 1e-3):
        self._fn = fn
        self._grad = grad
        self.h_fd = h_fd

    def value(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(np.atleast_2d(points)), dtype=float)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        if self._grad is not None:
            return np.asarray(self._grad(np.atleast_2d(points)), dtype=float)
        return fd_gradient(self, points, self.h_fd)


def fd_gradient(fld, points: np.ndarray, h: float) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = pts.shape
    out = np.empty((n, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        out[:, j] = (fld.value(pts + e) - fld.value(pts - e)) / (2 * h)
    return out


class AxialGridField:
    """Axially symmetric field on (t, rho) with bilinear interpolation.

    ``t`` is the coordinate along ``axis`` (through the domain center), rho
    the transverse radius.  Nodal gradient tables make the interpolated
    log-gradient cheap inside jitted path kernels.
    """

    def __init__(self, dom: DomainModel, axis, tg: np.ndarray, pg: np.ndarray, V: np.ndarray):
        self.dom = dom
        self.axis = np.asarray(axis, dtype=float)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.tg = np.asarray(tg, dtype=float)
        self.pg = np.asarray(pg, dtype=float)
        self.V = np.asarray(V, dtype=float)
        gt, gp = np.gradient(self.V, self.tg, self.pg)
        self.Vt = gt
        self.Vp = gp

    def _coords(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - self.dom.center_array
        t = pts @ self.axis
        perp = pts - np.outer(t, self.axis)
        return t, np.linalg.norm(perp, axis=1)

    def _interp(self, M: np.ndarray, t: np.ndarray, p: np.ndarray) -> np.ndarray:
        ti = np.clip(np.searchsorted(self.tg, t) - 1, 0, len(self.tg) - 2)
        pi = np.clip(np.searchsorted(self.pg, p) - 1, 0, len(self.pg) - 2)
        wt = np.clip((t - self.tg[ti]) / (self.tg[ti + 1] - self.tg[ti]), 0.0, 1.0)
        wp = np.clip((p - self.pg[pi]) / (self.pg[pi + 1] - self.pg[pi]), 0.0, 1.0)
        return (
            M[ti, pi] * (1 - wt) * (1 - wp)
            + M[ti + 1, pi] * wt * (1 - wp)
            + M[ti, pi + 1] * (1 - wt) * wp
            + M[ti + 1, pi + 1] * wt * wp
        )

    def value(self, points: np.ndarray) -> np.ndarray:
        t, p = self._coords(points)
        return self._interp(self.V, t, p)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        t, p = self._coords(pts)
        dvt = self._interp(self.Vt, t, p)
        dvp = self._interp(self.Vp, t, p)
        ct = pts - self.dom.center_array
        perp = ct - np.outer(t, self.axis)
        safe = np.maximum(p, 1e-12)
        return dvt[:, None] * self.axis + (dvp / safe)[:, None] * perp

    def kernel_pack(self):
        return self.axis, self.tg, self.pg, self.V, self.Vt, self.Vp


class PlanarGridField:
    """Field reduced to (t1, t2, rho) coordinates over a 2-plane; trilinear."""

    def __init__(self, dom: DomainModel, a1, a2, g1, g2, g3, V):
        self.dom = dom
        self.a1 = np.asarray(a1, dtype=float)
        self.a2 = np.asarray(a2, dtype=float)
        self.g1, self.g2, self.g3 = (np.asarray(g, dtype=float) for g in (g1, g2, g3))
        self.V = np.asarray(V, dtype=float)

    def _coords(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float)) - self.dom.center_array
        t1 = pts @ self.a1
        t2 = pts @ self.a2
        perp = pts - np.outer(t1, self.a1) - np.outer(t2, self.a2)
        return t1, t2, np.linalg.norm(perp, axis=1)

    def value(self, points):
        from scipy.interpolate import RegularGridInterpolator

        if not hasattr(self, "_interp"):
            self._interp = RegularGridInterpolator(
                (self.g1, self.g2, self.g3), self.V, bounds_error=False, fill_value=None
            )
        t1, t2, p = self._coords(points)
        return np.asarray(self._interp(np.stack([t1, t2, p], axis=1)), dtype=float)

    def gradient(self, points, h: float = 1e-3):
        return fd_gradient(self, points, h)


# ---------------------------------------------------------------------------
# Monte Carlo killed potential

@dataclass
class PotentialEstimate:
    value: float
    se: float
    reps: int
    unfinished: int


def potential_estimate(
    dom: DomainModel,
    g: Optional[NonlinearField],
    f: Callable[[np.ndarray], np.ndarray],
    x,
    reps: int = 2000,
    master_seed: int = 0,
    tag: int = 301,
    level: int = -1,
    dt: float = 1e-3,
    max_steps: int = 200_000,
) -> PotentialEstimate:
    """Monte Carlo estimate of the killed potential applied to ``f`` at ``x``.

    Paths carry the multiplicative survival weight exp(-int 4 g) instead of
    being killed, and accumulate weight * f along the way; the estimator is
    the path average of those integrals with a batch-free standard error.
    """
    x = dom.require_interior(x, level)
    d = dom.dimension
    R = dom.level_radius(level)
    gcode, gp0, grg, grv = (g or zero_field()).kernel_pack()
    exp_steps = int(geo.expected_exit_time(dom, x, level) / dt) + 10
    cap = max(reps * exp_steps * 4, 100_000)
    cap = min(cap, 60_000_000)
    pos = np.empty((cap, d))
    w = np.empty(cap)
    pid = np.empty(cap, dtype=np.int64)
    used = np.zeros(1, dtype=np.int64)
    ok = np.zeros(reps, dtype=np.int64)
    bdry = 3.0 * math.sqrt(d * dt)
    K.killed_occupation(
        master_seed, tag, reps, d, dom.center_array, R,
        np.asarray(x, dtype=float), dt, bdry, max_steps,
        gcode, gp0, grg, grv,
        pos, w, pid, used, ok,
    )
    n = int(used[0])
    if n >= cap:
        raise FieldError("occupation buffer overflow; lower reps or raise dt")
    vals = np.asarray(f(pos[:n]), dtype=float) * w[:n]
    per_path = np.bincount(pid[:n].astype(int), weights=vals, minlength=reps)
    mean = float(per_path.mean())
    se = float(per_path.std(ddof=1) / math.sqrt(reps))
    return PotentialEstimate(mean, se, reps, int(reps - ok.sum()))


# ---------------------------------------------------------------------------
# potential family indexed by nonempty subsets of the target set

@dataclass
class PotentialFamily:
    """Subset-indexed potentials driving the conditioned backbone.

    ``fields[mask]`` supports ``.value(points)`` and ``.gradient(points)``;
    infinite members (coincident targets) are flagged rather than stored.
    """

    dom: DomainModel
    x0: np.ndarray
    targets: Tuple[BoundaryTarget, ...]
    g: NonlinearField
    fields: Dict[Mask, object]
    infinite: Tuple[Mask, ...] = ()
    build_kind: str = "quadrature"

    @property
    def n(self) -> int:
        return len(self.targets)

    @property
    def ground(self) -> Mask:
        return (1 << self.n) - 1

    def finite(self, mask: Mask) -> bool:
        return mask not in self.infinite

    def field(self, mask: Mask):
        if mask in self.infinite:
            raise FieldError(f"potential for subset {mask:#x} is infinite")
        return self.fields[mask]

    def value(self, mask: Mask, points: np.ndarray) -> np.ndarray:
        return self.field(mask).value(points)

    def gradient(self, mask: Mask, points: np.ndarray) -> np.ndarray:
        return self.field(mask).gradient(points)

    def source_value(self, mask: Mask, points: np.ndarray) -> np.ndarray:
        """The ordered-pair source 2 sum v_B v_{A-B} feeding the recursion."""
        pts = np.atleast_2d(points)
        total = np.zeros(len(pts))
        for b in subsets_of(mask):
            if b == mask:
                continue
            total += self.value(b, pts) * self.value(mask ^ b, pts)
        return 2.0 * total


def _is_axial_pair(dom: DomainModel, t1: BoundaryTarget, t2: BoundaryTarget, tol=1e-10) -> bool:
    z1 = t1.center_array - dom.center_array
    z2 = t2.center_array - dom.center_array
    return bool(np.linalg.norm(z1 + z2) < tol * dom.radius)


def _axial_pair_grid(
    dom: DomainModel,
    x0,
    t1: BoundaryTarget,
    t2: BoundaryTarget,
    nt: int = 101,
    npg: int = 51,
    ns: int = 260,
    nq: int = 130,
    refine: int = 9,
) -> AxialGridField:
    """Quadrature build of the antipodal pair potential (d = 4 only)."""
    if dom.dimension != 4:
        raise FieldError("quadrature pair build requires dimension 4")
    R = dom.radius
    axis = (t1.center_array - dom.center_array) / R
    m1 = MartinField(dom, x0, t1.center_array)
    m2 = MartinField(dom, x0, t2.center_array)
    tg = np.linspace(-R, R, nt)
    pg = np.linspace(0.0, R, npg)
    TT, PP = np.meshgrid(tg, pg, indexing="ij")
    inside = TT ** 2 + PP ** 2 < R * R * (1 - 1e-12)
    nodes_t = TT[inside]
    nodes_p = PP[inside]
    out = np.zeros(nodes_t.size)
    K.pair_potential_axial_d4(R, m1.invnorm, m2.invnorm, nodes_t, nodes_p, ns, nq, refine, out)
    V = np.zeros_like(TT)
    V[inside] = out
    return AxialGridField(dom, axis, tg, pg, V)


def _mc_pair_grid(
    dom: DomainModel,
    x0,
    t1: BoundaryTarget,
    t2: BoundaryTarget,
    g: NonlinearField,
    master_seed: int,
    n1: int = 17,
    n2: int = 17,
    n3: int = 9,
    reps: int = 400,
    dt: float = 2e-3,
) -> PlanarGridField:
    """Coarse Monte Carlo grid for a general pair; structural use only."""
    R = dom.radius
    z1 = (t1.center_array - dom.center_array) / R
    z2 = (t2.center_array - dom.center_array) / R
    a1 = z1
    a2 = z2 - (z2 @ a1) * a1
    n_a2 = np.linalg.norm(a2)
    if n_a2 < 1e-12:
        # collinear: use any perpendicular
        probe = np.zeros(dom.dimension)
        probe[1 if abs(a1[0]) > 0.5 else 0] = 1.0
        a2 = probe - (probe @ a1) * a1
        n_a2 = np.linalg.norm(a2)
    a2 = a2 / n_a2
    m1 = MartinField(dom, x0, t1.center_array)
    m2 = MartinField(dom, x0, t2.center_array)

    def f(pts):
        return 4.0 * m1.value(pts) * m2.value(pts)

    g1 = np.linspace(-R, R, n1)
    g2 = np.linspace(-R, R, n2)
    g3 = np.linspace(0.0, R, n3)
    V = np.zeros((n1, n2, n3))
    emb_perp = _perp_unit(dom.dimension, a1, a2)
    tag = 311
    idx = 0
    for i, s in enumerate(g1):
        for j, u in enumerate(g2):
            for k3, p in enumerate(g3):
                if s * s + u * u + p * p >= R * R * (1 - 1e-9):
                    continue
                y = dom.center_array + s * a1 + u * a2 + p * emb_perp
                est = potential_estimate(dom, g, f, y, reps=reps, master_seed=master_seed, tag=tag + idx, dt=dt)
                V[i, j, k3] = est.value
                idx += 1
    return PlanarGridField(dom, a1, a2, g1, g2, g3, V)


def _perp_unit(d: int, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    for j in range(d):
        probe = np.zeros(d)
        probe[j] = 1.0
        v = probe - (probe @ a1) * a1 - (probe @ a2) * a2
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            return v / nv
    raise FieldError("could not build a perpendicular direction")


def _detect_divergence(dom: DomainModel, x0, t1, t2) -> bool:
    """Coincident-target screen: the pair integral grows without bound under
    refinement, so compare two quadrature resolutions at the base point."""
    if np.linalg.norm(t1.center_array - t2.center_array) > 1e-12:
        return False
    return True


def build_potential_family(
    dom: DomainModel,
    x0,
    targets: Sequence[BoundaryTarget],
    g: Optional[NonlinearField] = None,
    harmonic_fields: Optional[Dict[int, object]] = None,
    master_seed: int = 0,
    cache_dir: Optional[str] = None,
    rebuild: bool = False,
    grid: Optional[Dict[str, int]] = None,
) -> PotentialFamily:
    """Assemble the subset-indexed potential family for the given targets.

    Singleton fields default to Martin kernels with poles at the targets
    (valid when g = 0); with nonzero g the caller must supply positive
    killed-harmonic fields via ``harmonic_fields``.  At most three targets
    are supported by the gridded builders.
    """
    g = g or zero_field()
    x0 = dom.require_interior(x0)
    targets = tuple(targets)
    n = len(targets)
    if n < 1 or n > 3:
        raise FieldError("gridded families support 1..3 targets")
    geo.validate_targets(dom, targets)
    fields: Dict[Mask, object] = {}
    infinite: List[Mask] = []

    if harmonic_fields is None:
        if g.variant != "zero":
            raise FieldError("nonzero g requires user-supplied killed-harmonic singleton fields")
        for i, t in enumerate(targets):
            fields[1 << i] = MartinField(dom, x0, t.center_array)
    else:
        for i in range(n):
            fields[1 << i] = harmonic_fields[i]

    # coincident targets make the pair potential (and every superset) infinite
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(targets[i].center_array - targets[j].center_array) < 1e-12:
                pair = (1 << i) | (1 << j)
                for m in subsets_of((1 << n) - 1):
                    if m & pair == pair:
                        infinite.append(m)

    build_kind = "quadrature"
    cache_path = None
    if cache_dir is not None:
        key = _family_cache_key(dom, x0, targets, g, grid, master_seed)
        cache_path = os.path.join(cache_dir, f"potential_family_{key}.npz")

    pair_masks = [m for m in subsets_of((1 << n) - 1) if card(m) == 2 and m not in infinite]
    cached = {}
    if cache_path and os.path.exists(cache_path) and not rebuild:
        data = np.load(cache_path, allow_pickle=False)
        if int(data["version"]) == 1:
            cached = {int(k.split("_")[1], 16): k for k in data.files if k.startswith("V_")}

    gspec = grid or {}
    for m in pair_masks:
        i, j = [b for b in range(n) if m >> b & 1]
        axial = _is_axial_pair(dom, targets[i], targets[j]) and dom.dimension == 4 and g.variant == "zero"
        if m in cached:
            data = np.load(cache_path, allow_pickle=False)
            if axial:
                axis = (targets[i].center_array - dom.center_array) / dom.radius
                fields[m] = AxialGridField(dom, axis, data[f"tg_{m:x}"], data[f"pg_{m:x}"], data[f"V_{m:x}"])
            continue
        if axial:
            fields[m] = _axial_pair_grid(
                dom, x0, targets[i], targets[j],
                nt=gspec.get("nt", 101), npg=gspec.get("np", 51),
                ns=gspec.get("ns", 260), nq=gspec.get("nq", 130),
                refine=gspec.get("refine", 9),
            )
        else:
            build_kind = "mc"
            fields[m] = _mc_pair_grid(dom, x0, targets[i], targets[j], g, master_seed)

    ground = (1 << n) - 1
    if n == 3 and ground not in infinite:
        build_kind = "mc"
        fields[ground] = _mc_triple_grid(dom, x0, targets, g, fields, master_seed)

    fam = PotentialFamily(dom, x0, targets, g, fields, tuple(sorted(set(infinite))), build_kind)
    if cache_path and (rebuild or not os.path.exists(cache_path)):
        _save_family_cache(cache_path, fam)
    return fam


def _mc_triple_grid(dom, x0, targets, g, fields, master_seed, n1=13, n2=13, n3=7, reps=300, dt=2.5e-3):
    R = dom.radius
    z1 = (targets[0].center_array - dom.center_array) / R
    z2 = (targets[1].center_array - dom.center_array) / R
    a1 = z1
    a2 = z2 - (z2 @ a1) * a1
    a2 /= np.linalg.norm(a2)
    singles = [fields[1 << i] for i in range(3)]
    pairs = {m: fields[m] for m in (0b011, 0b101, 0b110)}

    def f(pts):
        total = np.zeros(len(pts))
        for i in range(3):
            m_pair = 0b111 ^ (1 << i)
            total += singles[i].value(pts) * np.clip(pairs[m_pair].value(pts), 0.0, None)
        return 4.0 * total

    g1 = np.linspace(-R, R, n1)
    g2 = np.linspace(-R, R, n2)
    g3 = np.linspace(0.0, R, n3)
    V = np.zeros((n1, n2, n3))
    emb_perp = _perp_unit(dom.dimension, a1, a2)
    idx = 0
    for i, s in enumerate(g1):
        for j, u in enumerate(g2):
            for k3, p in enumerate(g3):
                if s * s + u * u + p * p >= R * R * (1 - 1e-9):
                    continue
                y = dom.center_array + s * a1 + u * a2 + p * emb_perp
                est = potential_estimate(dom, g, f, y, reps=reps, master_seed=master_seed, tag=91000 + idx, dt=dt)
                V[i, j, k3] = max(est.value, 0.0)
                idx += 1
    return PlanarGridField(dom, a1, a2, g1, g2, g3, V)


def _family_cache_key(dom, x0, targets, g, grid, master_seed) -> str:
    blob = repr((
        dom.kind, dom.dimension, dom.radius, dom.center, dom.nested_fractions,
        tuple(np.round(np.asarray(x0), 12).tolist()),
        tuple((tuple(np.round(t.center_array, 12).tolist()), round(t.eps, 12), t.index) for t in targets),
        g.variant, g.coef,
        sorted((grid or {}).items()),
        master_seed,
    )).encode()
    return hashlib.sha1(blob).hexdigest()[:16]


def _save_family_cache(path: str, fam: PotentialFamily) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    payload = {"version": np.int64(1)}
    for m, fld in fam.fields.items():
        if isinstance(fld, AxialGridField):
            payload[f"V_{m:x}"] = fld.V
            payload[f"tg_{m:x}"] = fld.tg
            payload[f"pg_{m:x}"] = fld.pg
    np.savez(path, **payload)


# ---------------------------------------------------------------------------
# residual report

@dataclass
class ResidualReport:
    max_rel_residual: float
    per_probe: List[Tuple[float, float, float]]  # (family value, fresh MC, se)
    harmonic_max_err: float
    bound_violations: int


def family_residual_report(
    fam: PotentialFamily,
    probes: np.ndarray,
    reps: int = 4000,
    master_seed: int = 1,
    dt: float = 1e-3,
) -> ResidualReport:
    """Self-consistency of the recursion at off-grid probes by fresh Monte Carlo.

    Recomputes the right-hand side 2 sum U(v_B v_{A-B}) with new paths and
    compares to the interpolated family value; also checks the mean-value
    property of the singleton fields and the domination of the joint field
    by each singleton.
    """
    ground = fam.ground
    probes = np.atleast_2d(probes)
    per = []
    worst = 0.0
    for idx, y in enumerate(probes):
        est = potential_estimate(
            fam.dom, fam.g, lambda pts: fam.source_value(ground, pts), y,
            reps=reps, master_seed=master_seed, tag=500 + idx, dt=dt,
        )
        ref = float(fam.value(ground, y[None, :])[0])
        per.append((ref, est.value, est.se))
        denom = max(abs(ref), 1e-12)
        worst = max(worst, abs(est.value - ref) / denom)

    # mean-value property of the singleton fields (g = 0 case)
    harm_err = 0.0
    if fam.g.variant == "zero":
        rng = np.random.default_rng(master_seed)
        for i in range(fam.n):
            fld = fam.fields[1 << i]
            for y in probes[:3]:
                r = 0.25 * fam.dom.boundary_distance(y)
                dirs = rng.normal(size=(6000, fam.dom.dimension))
                dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
                mean = float(np.mean(fld.value(y + r * dirs)))
                ref = float(fld.value(y[None, :])[0])
                harm_err = max(harm_err, abs(mean - ref) / max(ref, 1e-12))

    # the joint potential never exceeds a singleton on the same probe
    viol = 0
    for y in probes:
        va = float(fam.value(ground, y[None, :])[0])
        for i in range(fam.n):
            if va > float(fam.value(1 << i, y[None, :])[0]) * (1 + 1e-9):
                viol += 1
    return ResidualReport(worst, per, harm_err, viol)
