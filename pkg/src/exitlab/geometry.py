"""Model domains with closed-form kernels for Brownian motion (generator Δ/2).

Both supported domains are Euclidean balls: the centered ball, and a ball
placed strictly inside the upper half-space (so that the explicit half-space
blow-up solution is finite on its closure).  Nested subdomains are concentric
scaled copies.  All kernels are for the *ball*; the half-space placement only
changes which nonlinear fields make sense on it.

Conventions: the Green function is normalized for the generator Δ/2, i.e.
``integral G(x, y) dy = E_x[exit time]``; boundary caps are chordal,
``cap(z, eps) = {w on the sphere : |w - z| <= eps}``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gamma, roots_jacobi

from . import rng as _rng


class DomainError(ValueError):
    pass


def sphere_area(d: int) -> float:
    """Surface area of the unit sphere in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / gamma(d / 2.0)


@dataclass(frozen=True)
class DomainModel:
    """A ball domain with a nested schedule of concentric subdomains.

    ``kind`` is "ball" (centered at the origin) or "half_space_cap" (a ball
    with center on the x_d axis, strictly above height ``radius``).  The
    nested schedule lists strictly increasing radius fractions < 1.
    """

    kind: str
    dimension: int
    radius: float
    center: Tuple[float, ...]
    nested_fractions: Tuple[float, ...] = (0.5, 0.75, 0.875, 0.9375)

    def __post_init__(self):
        if self.kind not in ("ball", "half_space_cap"):
            raise DomainError(f"unknown domain kind {self.kind!r}")
        if not 3 <= self.dimension <= 6:
            raise DomainError("dimension must be between 3 and 6")
        if self.radius <= 0:
            raise DomainError("radius must be positive")
        if len(self.center) != self.dimension:
            raise DomainError("center has wrong dimension")
        fr = self.nested_fractions
        if any(not 0 < a < 1 for a in fr) or any(a >= b for a, b in zip(fr, fr[1:])):
            raise DomainError("nested fractions must be strictly increasing in (0, 1)")
        if self.kind == "half_space_cap" and self.center[-1] <= self.radius:
            raise DomainError("half-space cap ball must lie strictly above the hyperplane")

    @staticmethod
    def ball(dimension: int, radius: float = 1.0, nested_fractions: Sequence[float] = (0.5, 0.75, 0.875, 0.9375)) -> "DomainModel":
        return DomainModel("ball", dimension, radius, (0.0,) * dimension, tuple(nested_fractions))

    @staticmethod
    def half_space_cap(dimension: int, height: float, radius: float, nested_fractions: Sequence[float] = (0.5, 0.75, 0.875, 0.9375)) -> "DomainModel":
        center = (0.0,) * (dimension - 1) + (height,)
        return DomainModel("half_space_cap", dimension, radius, center, tuple(nested_fractions))

    # -- geometry helpers ---------------------------------------------------

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center)

    @property
    def n_levels(self) -> int:
        return len(self.nested_fractions)

    def level_radius(self, level: int) -> float:
        """Radius of nested subdomain ``level`` (0-based); ``level=-1`` is D itself."""
        if level == -1:
            return self.radius
        return self.nested_fractions[level] * self.radius

    def contains(self, x: np.ndarray, level: int = -1) -> bool:
        return float(np.linalg.norm(np.asarray(x) - self.center_array)) < self.level_radius(level)

    def boundary_distance(self, x: np.ndarray, level: int = -1) -> float:
        return self.level_radius(level) - float(np.linalg.norm(np.asarray(x) - self.center_array))

    def require_interior(self, x: np.ndarray, level: int = -1) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.contains(x, level):
            raise DomainError("point is not interior to the requested domain level")
        return x


@dataclass(frozen=True)
class BoundaryTarget:
    """A chordal boundary cap: center on the sphere, Euclidean radius, label."""

    center: Tuple[float, ...]
    eps: float
    index: int = 0

    def __post_init__(self):
        if self.eps <= 0:
            raise DomainError("cap radius must be positive")

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.center)


def validate_targets(dom: DomainModel, targets: Sequence[BoundaryTarget], tol: float = 1e-9) -> None:
    seen = set()
    for t in targets:
        if abs(np.linalg.norm(t.center_array - dom.center_array) - dom.radius) > tol * max(1.0, dom.radius):
            raise DomainError(f"target {t.index} does not lie on the outer boundary")
        if t.index in seen:
            raise DomainError("duplicate target index")
        seen.add(t.index)
    for i, a in enumerate(targets):
        for b in targets[i + 1:]:
            if np.linalg.norm(a.center_array - b.center_array) < 1e-12:
                raise DomainError("targets must have pairwise distinct centers")


# ---------------------------------------------------------------------------
# Kernels

def expected_exit_time(dom: DomainModel, x, level: int = -1) -> float:
    x = dom.require_interior(x, level)
    R = dom.level_radius(level)
    a2 = float(np.sum((x - dom.center_array) ** 2))
    return (R * R - a2) / dom.dimension


def green_function(dom: DomainModel, x, y, level: int = -1) -> float:
    """Green function of Brownian motion (Δ/2) killed on the level sphere."""
    d = dom.dimension
    R = dom.level_radius(level)
    x = dom.require_interior(x, level)
    y = dom.require_interior(y, level)
    xt = x - dom.center_array
    yt = y - dom.center_array
    rxy = float(np.linalg.norm(xt - yt))
    if rxy == 0.0:
        return math.inf
    a = float(np.linalg.norm(xt))
    kd = 2.0 / ((d - 2) * sphere_area(d))
    if a == 0.0:
        image = R ** (2 - d)
    else:
        xstar = xt * (R * R / (a * a))
        image = ((a / R) * float(np.linalg.norm(yt - xstar))) ** (2 - d)
    return kd * (rxy ** (2 - d) - image)


def poisson_kernel(dom: DomainModel, x, z, level: int = -1) -> float:
    """Exit density at z (with respect to surface measure on the level sphere)."""
    d = dom.dimension
    R = dom.level_radius(level)
    x = dom.require_interior(x, level)
    xt = x - dom.center_array
    dist = float(np.linalg.norm(np.asarray(z) - x))
    return (R * R - float(xt @ xt)) / (sphere_area(d) * R * dist ** d)


def martin_kernel(dom: DomainModel, x0, y, z) -> float:
    """Boundary kernel normalized so that its value at the base point is 1."""
    d = dom.dimension
    R = dom.radius
    x0 = dom.require_interior(x0)
    y = dom.require_interior(y)
    z = np.asarray(z, dtype=float)
    ry = float(np.linalg.norm(y - z))
    if ry == 0.0:
        return math.inf
    x0t = x0 - dom.center_array
    yt = y - dom.center_array
    num = (R * R - float(yt @ yt)) / ry ** d
    den = (R * R - float(x0t @ x0t)) / float(np.linalg.norm(x0 - z)) ** d
    return num / den


def martin_kernel_gradient(dom: DomainModel, x0, y, z) -> np.ndarray:
    """Closed-form gradient in y of the normalized boundary kernel."""
    d = dom.dimension
    R = dom.radius
    y = dom.require_interior(y)
    z = np.asarray(z, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    yt = y - dom.center_array
    dy = y - z
    r2 = float(dy @ dy)
    num_grad = -2.0 * yt * r2 ** (-d / 2.0) - d * (R * R - float(yt @ yt)) * r2 ** (-d / 2.0 - 1.0) * dy
    x0t = x0 - dom.center_array
    den = (R * R - float(x0t @ x0t)) / float(np.linalg.norm(x0 - z)) ** d
    return num_grad / den


# ---------------------------------------------------------------------------
# Harmonic measure of boundary caps

def cap_polar_angle(dom: DomainModel, eps: float, level: int = -1) -> float:
    R = dom.level_radius(level)
    half = min(eps / (2.0 * R), 1.0)
    return 2.0 * math.asin(half)


def _axis_frame(dom: DomainModel, x: np.ndarray, z: np.ndarray, level: int) -> Tuple[float, float, float]:
    """Decompose x - center along the cap axis: (parallel, perpendicular, radius)."""
    R = dom.level_radius(level)
    zhat = (z - dom.center_array) / R
    xt = x - dom.center_array
    a_par = float(xt @ zhat)
    perp = xt - a_par * zhat
    return a_par, float(np.linalg.norm(perp)), R


def harmonic_measure_cap(
    dom: DomainModel,
    x,
    target: BoundaryTarget,
    level: int = -1,
    rel_tol: float = 1e-9,
    abs_tol: float = 1e-12,
    n_jacobi: int = 48,
) -> float:
    """Harmonic measure of a chordal boundary cap, by quadrature.

    The azimuthal integral over the cap's symmetry sphere is done exactly for
    polynomials with a Gauss-Jacobi rule matching the (1 - s^2)^{(d-4)/2}
    projection weight; the polar integral uses adaptive quadrature.
    """
    from scipy.integrate import quad

    d = dom.dimension
    x = dom.require_interior(x, level)
    z = np.asarray(target.center_array, dtype=float)
    a_par, a_perp, R = _axis_frame(dom, x, z, level)
    theta_eps = cap_polar_angle(dom, target.eps, level)
    xt2 = a_par * a_par + a_perp * a_perp

    alpha = (d - 4) / 2.0
    s_nodes, s_weights = roots_jacobi(n_jacobi, alpha, alpha)

    # slicing the azimuthal sphere S^{d-2}: integral of f(dot) over it equals
    # |S^{d-3}| * integral of f(s) (1-s^2)^{(d-4)/2} ds, and the Gauss-Jacobi
    # weights already carry the (1-s^2)^{(d-4)/2} factor.
    az_scale = sphere_area(d - 2)

    pref = (R * R - xt2) / (sphere_area(d) * R) * R ** (d - 1) * az_scale

    def polar_integrand(theta: float) -> float:
        A = xt2 + R * R - 2.0 * R * a_par * math.cos(theta)
        B = 2.0 * R * a_perp * math.sin(theta)
        vals = (A - B * s_nodes) ** (-d / 2.0)
        inner = float(vals @ s_weights)
        return math.sin(theta) ** (d - 2) * inner

    val, _err = quad(polar_integrand, 0.0, theta_eps, epsabs=abs_tol, epsrel=rel_tol, limit=200)
    return pref * val


# ---------------------------------------------------------------------------
# Exact exit-position sampling

def _unit_perp(axis: np.ndarray, raw: np.ndarray) -> np.ndarray:
    v = raw - (raw @ axis) * axis
    nv = np.linalg.norm(v)
    if nv < 1e-14:
        # pathological draw; perturb deterministically
        raw = raw + 1.0
        v = raw - (raw @ axis) * axis
        nv = np.linalg.norm(v)
    return v / nv


def sample_exit_point(
    dom: DomainModel,
    x,
    n: int,
    master_seed: int = 0,
    tag: int = 101,
    level: int = -1,
    grid_size: int = 4096,
) -> np.ndarray:
    """Exact (to CDF-grid tolerance) samples of the Brownian exit position.

    The cosine of the angle from the start-point axis has a closed-form
    unnormalized density; its CDF is tabulated on a grid geometrically refined
    toward the near pole and inverted.  Azimuths are uniform by symmetry.
    """
    d = dom.dimension
    R = dom.level_radius(level)
    x = dom.require_interior(x, level)
    xt = x - dom.center_array
    a = float(np.linalg.norm(xt))

    u = _rng.uniforms(master_seed, tag, 0, n)
    gauss = _rng.normals(master_seed, tag + 1, 0, n * d).reshape(n, d)

    if a < 1e-14:
        pts = gauss / np.linalg.norm(gauss, axis=1, keepdims=True)
        return dom.center_array + R * pts

    # density of mu = cos(angle from the x-axis direction):
    #   f(mu) ~ (1 - mu^2)^{(d-3)/2} (R^2 + a^2 - 2 a R mu)^{-d/2}
    t_lo, t_hi = (R - a) ** 2, (R + a) ** 2
    t = np.geomspace(t_lo, t_hi, grid_size)
    mu = (R * R + a * a - t) / (2.0 * a * R)
    order = np.argsort(mu)
    mu = mu[order]
    dens = np.clip(1.0 - mu * mu, 0.0, None) ** ((d - 3) / 2.0) * (R * R + a * a - 2 * a * R * mu) ** (-d / 2.0)
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(mu))])
    cdf /= cdf[-1]
    # strictly increasing for interpolation
    cdf, keep = np.unique(cdf, return_index=True)
    mu_keep = mu[keep]
    mus = np.interp(u, cdf, mu_keep)

    axis = xt / a
    out = np.empty((n, d))
    sin_part = np.sqrt(np.clip(1.0 - mus ** 2, 0.0, None))
    for i in range(n):
        vhat = _unit_perp(axis, gauss[i])
        out[i] = dom.center_array + R * (mus[i] * axis + sin_part[i] * vhat)
    return out


def cap_indicator(dom: DomainModel, points: np.ndarray, target: BoundaryTarget) -> np.ndarray:
    """1 if a boundary point lies in the chordal cap of the target."""
    diff = points - target.center_array
    return (np.einsum("ij,ij->i", diff, diff) <= target.eps ** 2).astype(float)
