"""Branching-particle exit measures and excursion-measure estimators.

A replica starts one particle of mass ``eps_mass``; particles diffuse,
branch critically (0 or 2 offspring) at rate ``4 / eps_mass``, and freeze on
the nested spheres.  Cluster-measure functionals are recovered through the
Poisson-cluster correspondence: joint cumulants of exit functionals, divided
by ``eps_mass``, estimate the excursion moments; hit probabilities invert
through ``-log(1 - p) / eps_mass``.

``palm_moments`` evaluates the same excursion moments through the recursive
Palm route instead: radial profiles for constant data (exact to ODE
tolerance) and Feynman-Kac path integrals elsewhere.  The two estimators are
deliberately independent; their agreement is one of the acceptance gates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels as K
from . import geometry as geo
from .diffusion import PathConfig
from .geometry import BoundaryTarget, DomainModel, DomainError
from .pde_solutions import (
    AxialGridField,
    NonlinearField,
    RadialTable,
    radial_killed_harmonic,
    radial_killed_potential,
    radial_nonlinear_profile,
    zero_field,
)


class EstimatorError(RuntimeError):
    pass


DEFAULT_POP_CAP = 100_000_000


@dataclass(frozen=True)
class ParticleCloud:
    positions: np.ndarray      # (n, d)
    eps_mass: float
    time: float = 0.0

    def __post_init__(self):
        if self.eps_mass <= 0:
            raise EstimatorError("particle mass must be positive")

    @property
    def total_mass(self) -> float:
        return self.eps_mass * len(self.positions)


@dataclass
class ExitMeasureSample:
    """Atomic measure on a level sphere produced by one replica."""

    positions: np.ndarray      # (m, d)
    eps_mass: float
    level: int
    replica: int = 0
    seed: int = 0
    weight_logs: Optional[np.ndarray] = None  # per-atom int 4 g along lineage
    aborted: bool = False

    @property
    def total_mass(self) -> float:
        return self.eps_mass * len(self.positions)

    def integrate(self, values: np.ndarray) -> float:
        return self.eps_mass * float(np.sum(values))

    def validate(self, dom: DomainModel, tol: float = 1e-7) -> None:
        R = dom.level_radius(self.level)
        radii = np.linalg.norm(self.positions - dom.center_array, axis=1)
        if self.positions.size and np.max(np.abs(radii - R)) > tol * max(R, 1.0):
            raise EstimatorError("exit atoms are off the level sphere")


@dataclass(frozen=True)
class EstimatorResult:
    value: float
    se: float
    reps: int
    kind: str

    def agrees(self, other: "EstimatorResult", n_se: float = 3.0) -> bool:
        comb = math.hypot(self.se, other.se)
        return abs(self.value - other.value) <= n_se * comb + 1e-12

    def zscore(self, target: float) -> float:
        return (self.value - target) / self.se if self.se > 0 else math.inf


def batch_se(values: np.ndarray, n_batches: int = 64) -> float:
    """Standard error from replica-ordered batch means (deterministic)."""
    n = len(values)
    if n < 2 * n_batches:
        return float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    m = n // n_batches * n_batches
    bm = values[:m].reshape(n_batches, -1).mean(axis=1)
    return float(bm.std(ddof=1) / math.sqrt(n_batches))


# ---------------------------------------------------------------------------
# raw replica runs

@dataclass
class ReplicaFunctionals:
    """Per-replica exit functionals recorded at every level of a run."""

    counts: np.ndarray     # (reps, L) atom counts
    gsums: np.ndarray      # (reps, L) sum of the functional field over atoms
    capmask: np.ndarray    # (reps,) bitmask of caps charged at the last level
    flags: np.ndarray      # (reps,)
    events: np.ndarray     # (reps,) branch events
    eps_mass: float
    levels: Tuple[int, ...]

    @property
    def reps(self) -> int:
        return len(self.counts)

    @property
    def ok(self) -> np.ndarray:
        return self.flags == K.STATUS_OK

    def mass(self, level_idx: int) -> np.ndarray:
        return self.eps_mass * self.counts[:, level_idx]


def run_exit_functionals(
    dom: DomainModel,
    x,
    levels: Sequence[int],
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 201,
    g_functional: Optional[NonlinearField] = None,
    prune: Optional[NonlinearField] = None,
    caps: Sequence[BoundaryTarget] = (),
    pop_cap: int = DEFAULT_POP_CAP,
) -> ReplicaFunctionals:
    """Run independent replicas from eps * delta_x, recording at each level."""
    d = dom.dimension
    x = dom.require_interior(x, levels[0])
    radii = np.array([dom.level_radius(k) for k in levels], dtype=float)
    if np.any(np.diff(radii) <= 0):
        raise DomainError("levels must be strictly increasing")
    gf = (g_functional or zero_field()).kernel_pack()
    pr = (prune or zero_field()).kernel_pack()
    caps_z = np.array([t.center_array for t in caps], dtype=float).reshape(len(caps), d)
    caps_e2 = np.array([t.eps ** 2 for t in caps], dtype=float)
    counts = np.zeros((reps, len(radii)))
    gsums = np.zeros((reps, len(radii)))
    capmask = np.zeros(reps, dtype=np.int64)
    flags = np.zeros(reps, dtype=np.int64)
    events = np.zeros(reps)
    K.cloud_counts(
        reps, master_seed, tag, d, dom.center_array, radii,
        np.asarray(x, dtype=float), 4.0 / eps_mass, cfg.dt, cfg.layer(d), pop_cap,
        pr[0], pr[1], pr[2], pr[3],
        gf[0], gf[1], gf[2], gf[3],
        caps_z, caps_e2,
        counts, gsums, capmask, flags, events,
    )
    return ReplicaFunctionals(counts, gsums, capmask, flags, events, eps_mass, tuple(levels))


def evolve_to_exit(
    dom: DomainModel,
    level: int,
    cloud: ParticleCloud,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 211,
    replica: int = 0,
    prune: Optional[NonlinearField] = None,
    track_weights: bool = False,
    pop_cap: int = DEFAULT_POP_CAP,
) -> ExitMeasureSample:
    """Evolve a finite cloud to the level sphere, returning the atom sample.

    With ``prune`` the motion is killed at rate 4 g (true thinning); with
    ``track_weights`` the g-integral is accumulated along lineages instead,
    for weighted comparisons against the pruned run.
    """
    starts = np.atleast_2d(np.asarray(cloud.positions, dtype=float))
    pos, arep, wlog, flags, _counts = _atoms_run(
        dom, (level,), starts, cloud.eps_mass, cfg, master_seed, tag + replica,
        prune, track_weights, pop_cap)
    return ExitMeasureSample(
        positions=pos,
        eps_mass=cloud.eps_mass,
        level=level,
        replica=replica,
        seed=master_seed,
        weight_logs=wlog if track_weights else None,
        aborted=bool(np.any(flags != K.STATUS_OK)),
    )


def _atoms_run(
    dom: DomainModel,
    levels: Sequence[int],
    starts: np.ndarray,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int,
    tag: int,
    prune: Optional[NonlinearField],
    track_weights: bool,
    pop_cap: int,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Two-pass cloud atom recording; returns flat atoms across all levels.

    The flat arrays are level-major within each replica; per-(replica, level)
    slices are recovered from the returned counts.
    """
    d = dom.dimension
    n = len(starts)
    L = len(levels)
    radii = np.array([dom.level_radius(k) for k in levels], dtype=float)
    pr = (prune or zero_field()).kernel_pack()
    counts = np.zeros((n, L), dtype=np.int64)
    flags = np.zeros(n, dtype=np.int64)
    dummy = np.zeros((1, d))
    dummy_r = np.zeros(1, dtype=np.int64)
    dummy_w = np.zeros(1)
    args = (
        n, master_seed, tag, d, dom.center_array, radii,
        starts, 4.0 / eps_mass, cfg.dt, cfg.layer(d), pop_cap,
        pr[0], pr[1], pr[2], pr[3],
        1 if track_weights else 0,
    )
    offsets = np.zeros(n * L + 1, dtype=np.int64)
    K.cloud_atoms(*args, 0, offsets, counts, flags, dummy, dummy_r, dummy_w)
    offsets[1:] = np.cumsum(counts.reshape(-1))
    total = int(offsets[-1])
    pos = np.zeros((max(total, 1), d))
    arep = np.zeros(max(total, 1), dtype=np.int64)
    wlog = np.zeros(max(total, 1))
    K.cloud_atoms(*args, 1, offsets, counts, flags, pos, arep, wlog)
    return pos[:total], arep[:total], wlog[:total], flags, counts


def atom_level_slices(counts: np.ndarray) -> np.ndarray:
    """Flat-buffer offsets per (replica, level) from the pass-1 counts."""
    off = np.zeros(counts.size + 1, dtype=np.int64)
    off[1:] = np.cumsum(counts.reshape(-1))
    return off


def replica_samples(
    dom: DomainModel,
    level: int,
    x,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 221,
    prune: Optional[NonlinearField] = None,
    track_weights: bool = False,
    pop_cap: int = DEFAULT_POP_CAP,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Atoms of many single-start replicas: (positions, replica ids, wlogs, flags)."""
    starts = np.tile(np.asarray(dom.require_interior(x, level), dtype=float), (reps, 1))
    pos, arep, wlog, flags, _ = _atoms_run(
        dom, (level,), starts, eps_mass, cfg, master_seed, tag,
        prune, track_weights, pop_cap)
    return pos, arep, wlog, flags


def replica_samples_levels(
    dom: DomainModel,
    levels: Sequence[int],
    x,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 222,
    pop_cap: int = DEFAULT_POP_CAP,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Atoms recorded at several nested levels from the same replicas.

    Returns (positions, replica ids, level index per atom, flags); the shared
    replicas make paired martingale-constancy comparisons much tighter than
    independent runs.
    """
    starts = np.tile(np.asarray(dom.require_interior(x, levels[0]), dtype=float), (reps, 1))
    pos, arep, _wlog, flags, counts = _atoms_run(
        dom, tuple(levels), starts, eps_mass, cfg, master_seed, tag,
        None, False, pop_cap)
    L = len(levels)
    lvl_col = np.zeros(len(pos), dtype=np.int64)
    off = atom_level_slices(counts)
    for rep in range(reps):
        for li in range(L):
            lvl_col[off[rep * L + li]:off[rep * L + li + 1]] = li
    return pos, arep, lvl_col, flags


# ---------------------------------------------------------------------------
# measurement functionals

PsiSpec = Union[Tuple[str, float], Tuple[str, BoundaryTarget], Tuple[str, object]]


def _psi_values(dom: DomainModel, psi: PsiSpec, points: np.ndarray) -> np.ndarray:
    kind, payload = psi
    if kind == "const":
        return np.full(len(points), float(payload))
    if kind == "cap":
        return geo.cap_indicator(dom, points, payload)
    if kind == "field":
        return np.asarray(payload.value(points), dtype=float)
    raise EstimatorError(f"unknown measurement kind {kind!r}")


def functionals_from_atoms(
    dom: DomainModel,
    psis: Sequence[PsiSpec],
    pos: np.ndarray,
    arep: np.ndarray,
    reps: int,
    eps_mass: float,
    wlog: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Per-replica values of <X, psi_j>: (reps, n_psi)."""
    out = np.zeros((reps, len(psis)))
    weights = np.exp(-wlog) if wlog is not None else None
    for j, psi in enumerate(psis):
        vals = _psi_values(dom, psi, pos)
        if weights is not None:
            vals = vals * weights
        out[:, j] = eps_mass * np.bincount(arep.astype(int), weights=vals, minlength=reps)
    return out


def _k_statistic(fun: np.ndarray, orders: Tuple[int, ...]) -> np.ndarray:
    """Per-replica products of centered functionals for a mixed cumulant.

    Returns the sequence whose mean is the (biased O(1/R)) joint cumulant;
    an unbiased small-sample correction factor is applied by the caller.
    """
    cols = [fun[:, j] for j in orders]
    centered = [c - c.mean() for c in cols]
    prod = np.ones(len(fun))
    for c in centered:
        prod = prod * c
    return prod


def excursion_cumulants(
    dom: DomainModel,
    level: int,
    x,
    psis: Sequence[PsiSpec],
    moments: Sequence[Tuple[int, ...]],
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 231,
) -> Dict[Tuple[int, ...], EstimatorResult]:
    """Excursion moments of exit functionals as Poisson-cluster cumulants.

    ``moments`` lists index tuples into ``psis``: (j,) is a first moment,
    (i, j) the second mixed moment, (i, j, k) third.  Orders above three are
    not supported (the k-statistic corrections grow unwieldy and no check
    needs them).
    """
    if any(len(m) > 3 for m in moments):
        raise EstimatorError("cumulant order above 3 is unsupported")
    pos, arep, _, flags = replica_samples(
        dom, level, x, reps, eps_mass, cfg, master_seed, tag)
    ok = flags == K.STATUS_OK
    fun = functionals_from_atoms(dom, psis, pos, arep, reps, eps_mass)
    fun = fun[ok]
    n = len(fun)
    out: Dict[Tuple[int, ...], EstimatorResult] = {}
    for m in moments:
        if len(m) == 1:
            series = fun[:, m[0]]
            corr = 1.0
        elif len(m) == 2:
            series = _k_statistic(fun, m)
            corr = n / (n - 1)
        else:
            series = _k_statistic(fun, m)
            corr = n * n / ((n - 1) * (n - 2))
        value = corr * float(series.mean()) / eps_mass
        se = corr * batch_se(series) / eps_mass
        out[tuple(m)] = EstimatorResult(value, se, n, "cumulant")
    return out


def weighted_excursion_moments(
    dom: DomainModel,
    level: int,
    x,
    lam: float,
    psis: Sequence[PsiSpec],
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 241,
    g_weight: Optional[NonlinearField] = None,
) -> Dict[Tuple[int, ...], EstimatorResult]:
    """Excursion moments carrying the weight exp(-<X, lam + g>).

    Inverts the Poisson-cluster relations
        E[W <X,psi>]        = E[W] eps N(w <X,psi>)
        E[W <X,psi1><X,psi2>] = E[W](eps^2 N1 N2 + eps N(w <X,psi1><X,psi2>))
    where W is the replica weight and w its single-cluster counterpart.
    """
    pos, arep, wlog, flags = replica_samples(
        dom, level, x, reps, eps_mass, cfg, master_seed, tag,
        prune=g_weight, track_weights=g_weight is not None)
    ok = flags == K.STATUS_OK
    fun = functionals_from_atoms(dom, psis, pos, arep, reps, eps_mass)
    mass = eps_mass * np.bincount(arep.astype(int), minlength=reps)
    gpart = np.zeros(reps)
    if g_weight is not None:
        gvals = g_weight.evaluate(pos) if len(pos) else np.zeros(0)
        gpart = eps_mass * np.bincount(arep.astype(int), weights=gvals, minlength=reps)
    W = np.exp(-lam * mass - gpart)[ok]
    fun = fun[ok]
    n = len(fun)
    e0 = float(W.mean())
    out: Dict[Tuple[int, ...], EstimatorResult] = {}
    first: Dict[int, float] = {}
    npsi = len(psis)
    for j in range(npsi):
        series = W * fun[:, j]
        val = float(series.mean()) / (e0 * eps_mass)
        first[j] = val
        out[(j,)] = EstimatorResult(val, batch_se(series) / (e0 * eps_mass), n, "weighted")
    for i in range(npsi):
        for j in range(i, npsi):
            series = W * fun[:, i] * fun[:, j]
            raw = float(series.mean()) / e0
            val = (raw - eps_mass ** 2 * first[i] * first[j]) / eps_mass
            se = batch_se(series) / (e0 * eps_mass)
            out[(i, j)] = EstimatorResult(val, se, n, "weighted")
    out[()] = EstimatorResult(e0, batch_se(W), n, "weighted")
    return out


# ---------------------------------------------------------------------------
# Palm-route evaluation

def cap_measure_axial_field(
    dom: DomainModel,
    level: int,
    target: BoundaryTarget,
    nt: int = 61,
    npg: int = 31,
) -> AxialGridField:
    """Harmonic measure of a level cap as an axial grid about the cap's axis."""
    R = dom.level_radius(level)
    axis = (target.center_array - dom.center_array)
    axis = axis / np.linalg.norm(axis)
    # project the cap center onto the level sphere along its own axis
    cap_on_level = BoundaryTarget(tuple(dom.center_array + R * axis), target.eps, target.index)
    tg = np.linspace(-R, R, nt)
    pg = np.linspace(0.0, R, npg)
    V = np.zeros((nt, npg))
    perp = _any_perp(axis)
    for i, t in enumerate(tg):
        for j, p in enumerate(pg):
            if t * t + p * p >= R * R * (1 - 1e-10):
                V[i, j] = 1.0 if t > 0 and t * t + p * p <= (R + target.eps) ** 2 and _on_cap(dom, t, p, axis, perp, cap_on_level) else 0.0
                continue
            y = dom.center_array + t * axis + p * perp
            V[i, j] = geo.harmonic_measure_cap(dom, y, cap_on_level, level=level, rel_tol=1e-8)
    return AxialGridField(dom, axis, tg, pg, V)


def _on_cap(dom, t, p, axis, perp, target) -> bool:
    y = dom.center_array + t * axis + p * perp
    return float(np.sum((y - target.center_array) ** 2)) <= target.eps ** 2


def _any_perp(axis: np.ndarray) -> np.ndarray:
    d = len(axis)
    probe = np.zeros(d)
    probe[int(np.argmin(np.abs(axis)))] = 1.0
    v = probe - (probe @ axis) * axis
    return v / np.linalg.norm(v)


def fk_terminal_field(
    dom: DomainModel,
    level: int,
    w: RadialTable,
    psi: PsiSpec,
    cfg: PathConfig,
    reps_per_node: int = 600,
    master_seed: int = 0,
    tag: int = 251,
    nt: int = 41,
    npg: int = 21,
    axis: Optional[np.ndarray] = None,
) -> AxialGridField:
    """Grid of E_y[ psi(exit) exp(-int 4 w) ] on the level ball (Monte Carlo).

    Axially symmetric whenever psi is (cap indicators about their own axis,
    or any radial psi); the caller passes the symmetry axis.
    """
    R = dom.level_radius(level)
    if axis is None:
        if psi[0] == "cap":
            axis = psi[1].center_array - dom.center_array
            axis = axis / np.linalg.norm(axis)
        else:
            axis = np.zeros(dom.dimension)
            axis[0] = 1.0
    perp = _any_perp(axis)
    tg = np.linspace(-R, R, nt)
    pg = np.linspace(0.0, R, npg)
    nodes = []
    idx = []
    for i, t in enumerate(tg):
        for j, p in enumerate(pg):
            if t * t + p * p < R * R * (1 - 1e-10):
                nodes.append(dom.center_array + t * axis + p * perp)
                idx.append((i, j))
    nodes = np.asarray(nodes)
    n = len(nodes)
    out_pos = np.zeros((n * reps_per_node, dom.dimension))
    out_w = np.zeros(n * reps_per_node)
    out_ok = np.zeros(n * reps_per_node, dtype=np.int64)
    K.fk_exit_batch(
        master_seed, tag, dom.dimension, dom.center_array, R,
        nodes, reps_per_node, cfg.dt, cfg.layer(dom.dimension), cfg.max_steps,
        w.r, w.v, out_pos, out_w, out_ok,
    )
    psi_vals = _psi_values(dom, psi, out_pos)
    contrib = (psi_vals * out_w * out_ok).reshape(n, reps_per_node)
    means = contrib.mean(axis=1)
    V = np.zeros((nt, npg))
    for (i, j), mval in zip(idx, means):
        V[i, j] = mval
    # boundary nodes carry the terminal data itself (weight 1 at the boundary)
    for i, t in enumerate(tg):
        for j, p in enumerate(pg):
            if t * t + p * p >= R * R * (1 - 1e-10):
                y = dom.center_array + np.clip(t, -R, R) * axis + p * perp
                r = np.linalg.norm(y - dom.center_array)
                if r > 0:
                    y = dom.center_array + (y - dom.center_array) * (R / r)
                V[i, j] = float(_psi_values(dom, psi, y[None, :])[0])
    return AxialGridField(dom, axis, tg, pg, V)


def palm_moments(
    dom: DomainModel,
    level: int,
    x,
    lam: float,
    psis: Sequence[PsiSpec],
    cfg: PathConfig,
    reps: int = 50_000,
    master_seed: int = 0,
    tag: int = 261,
) -> EstimatorResult:
    """N(e_lam * prod <X, psi_i>) by the recursive Palm representation.

    Constants reduce to radial two-point problems and are exact to ODE
    tolerance; caps use quadrature harmonic measure (lam = 0) or a
    Feynman-Kac terminal grid (lam > 0) inside a weighted occupation
    integral over an independent outer path family.
    """
    d = dom.dimension
    x = dom.require_interior(x, level)
    R = dom.level_radius(level)
    n = len(psis)
    if n == 0 or n > 3:
        raise EstimatorError("palm route supports 1..3 factors")
    all_const = all(p[0] == "const" for p in psis)
    w = radial_nonlinear_profile(d, R, lam)
    if all_const:
        cprod = float(np.prod([p[1] for p in psis]))
        F = radial_killed_harmonic(d, R, w)
        r0 = float(np.linalg.norm(np.asarray(x) - dom.center_array))
        if n == 1:
            return EstimatorResult(cprod * float(F(r0)), 0.0, 0, "palm-recursion")
        phi2 = radial_killed_potential(d, R, w, RadialTable(F.r, 4.0 * F.v ** 2))
        if n == 2:
            return EstimatorResult(cprod * float(phi2(r0)), 0.0, 0, "palm-recursion")
        src3 = RadialTable(F.r, 12.0 * F.v * phi2.v)
        phi3 = radial_killed_potential(d, R, w, src3)
        return EstimatorResult(cprod * float(phi3(r0)), 0.0, 0, "palm-recursion")

    if any(p[0] == "cap" for p in psis) and n > 2:
        raise EstimatorError("cap measurements supported for orders 1..2 only")

    # terminal fields per measurement
    fields = []
    for j, psi in enumerate(psis):
        if psi[0] == "const":
            F = radial_killed_harmonic(d, R, w)
            fields.append(("radial", F, float(psi[1])))
        elif lam == 0.0:
            fields.append(("grid", cap_measure_axial_field(dom, level, psi[1]), 1.0))
        else:
            fields.append((
                "grid",
                fk_terminal_field(dom, level, w, psi, cfg, master_seed=master_seed, tag=tag + 7 + j),
                1.0,
            ))

    def field_eval(spec, pts):
        kind, obj, scale = spec
        if kind == "radial":
            return scale * obj(np.linalg.norm(pts - dom.center_array, axis=1))
        return scale * obj.value(pts)

    if n == 1:
        # direct path estimate of E[psi(exit) exp(-int 4 w)]
        nodes = np.asarray(x, dtype=float)[None, :]
        out_pos = np.zeros((reps, d))
        out_w = np.zeros(reps)
        out_ok = np.zeros(reps, dtype=np.int64)
        K.fk_exit_batch(master_seed, tag, d, dom.center_array, R, nodes, reps,
                        cfg.dt, cfg.layer(d), cfg.max_steps, w.r, w.v,
                        out_pos, out_w, out_ok)
        vals = _psi_values(dom, psis[0], out_pos) * out_w * out_ok
        return EstimatorResult(float(vals.mean()), batch_se(vals), reps, "palm-recursion")

    # n = 2: 4 E int e^{-int 4w} F1 F2 along an outer path
    gx = NonlinearField("zero")
    grg, grv = w.r, w.v
    cap = min(max(reps * (int(geo.expected_exit_time(dom, x, level) / cfg.dt) + 10) * 4, 100_000), 60_000_000)
    pos = np.empty((cap, d))
    ww = np.empty(cap)
    pid = np.empty(cap, dtype=np.int64)
    used = np.zeros(1, dtype=np.int64)
    okp = np.zeros(reps, dtype=np.int64)
    K.killed_occupation(
        master_seed, tag + 1, reps, d, dom.center_array, R,
        np.asarray(x, dtype=float), cfg.dt, cfg.layer(d), cfg.max_steps,
        K.GF_RADIAL, 0.0, grg, grv,
        pos, ww, pid, used, okp,
    )
    m = int(used[0])
    if m >= cap:
        raise EstimatorError("occupation buffer overflow in the palm route")
    f1 = field_eval(fields[0], pos[:m])
    f2 = field_eval(fields[1], pos[:m])
    per = np.bincount(pid[:m].astype(int), weights=4.0 * f1 * f2 * ww[:m], minlength=reps)
    return EstimatorResult(float(per.mean()), batch_se(per), reps, "palm-recursion")


# ---------------------------------------------------------------------------
# log-Laplace contract

def log_laplace_check(
    dom: DomainModel,
    levels: Sequence[int],
    x,
    g: NonlinearField,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 271,
) -> List[EstimatorResult]:
    """-log E exp(-<X_level, g>) / eps at each level; equals g(x) for exact g."""
    run = run_exit_functionals(
        dom, x, levels, reps, eps_mass, cfg, master_seed, tag, g_functional=g)
    out = []
    ok = run.ok
    for li in range(len(levels)):
        W = np.exp(-eps_mass * run.gsums[ok, li])
        mean = float(W.mean())
        se_mean = batch_se(W)
        value = -math.log(mean) / eps_mass
        se = se_mean / (mean * eps_mass)
        out.append(EstimatorResult(value, se, int(ok.sum()), "direct"))
    return out
