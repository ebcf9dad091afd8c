"""Partition-sum martingale of the exit measure: evaluation and mean checks.

For a subset A of targets the martingale at level k is

    M_k(A) = sum over partitions sigma of A of
             exp(-<X_k, g>) * prod over blocks C of <X_k, v_C>

with the subset-indexed potentials v_C.  Its excursion mean equals v_A at
the start point, at every level; both facts are exercised statistically
through the cumulant correspondence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as K
from . import partitions as pt
from .diffusion import PathConfig
from .geometry import DomainModel
from .pde_solutions import (
    AxialGridField,
    MartinField,
    NonlinearField,
    PotentialFamily,
    RadialTable,
    radial_killed_harmonic,
    radial_nonlinear_profile,
    zero_field,
)
from .superprocess import (
    EstimatorResult,
    ExitMeasureSample,
    batch_se,
    replica_samples,
    replica_samples_levels,
    weighted_excursion_moments,
)


class MartingaleError(RuntimeError):
    pass


@dataclass(frozen=True)
class MartingaleSpec:
    family: PotentialFamily
    level: int
    mask: Optional[int] = None   # defaults to the family's full target set

    @property
    def subset(self) -> int:
        return self.mask if self.mask is not None else self.family.ground

    @property
    def g(self) -> NonlinearField:
        return self.family.g


def evaluate_partition_martingale(spec: MartingaleSpec, sample: ExitMeasureSample) -> float:
    """Exact partition-sum evaluation on one exit sample."""
    fam = spec.family
    a = spec.subset
    pos = sample.positions
    if len(pos) == 0:
        return 0.0
    gfac = 1.0
    if fam.g.variant != "zero":
        gfac = math.exp(-sample.eps_mass * float(np.sum(fam.g.evaluate(pos))))
    block_vals = {
        c: sample.eps_mass * float(np.sum(fam.value(c, pos)))
        for c in pt.subsets_of(a)
    }
    total = 0.0
    for sigma in pt.enumerate_partitions(a):
        prod = gfac
        for c in sigma:
            prod *= block_vals[c]
        total += prod
    return total


def _per_replica_blocks(
    fam: PotentialFamily,
    a: int,
    pos: np.ndarray,
    arep: np.ndarray,
    reps: int,
    eps_mass: float,
) -> Dict[int, np.ndarray]:
    out = {}
    for c in pt.subsets_of(a):
        vals = fam.value(c, pos) if len(pos) else np.zeros(0)
        out[c] = eps_mass * np.bincount(arep.astype(int), weights=vals, minlength=reps)
    return out


def _partition_series(
    blocks: Dict[int, np.ndarray],
    a: int,
    n_eff: int,
    eps_mass: float,
) -> np.ndarray:
    """Per-replica series whose mean estimates the excursion mean of M(A).

    Each partition contributes the k-statistic of its block functionals
    (joint cumulants of order = number of blocks), scaled by the standard
    small-sample correction and one power of the particle mass.
    """
    total = np.zeros(n_eff)
    for sigma in pt.enumerate_partitions(a):
        cols = [blocks[c] for c in sigma]
        order = len(cols)
        if order == 1:
            series = cols[0]
            corr = 1.0
        elif order == 2:
            series = (cols[0] - cols[0].mean()) * (cols[1] - cols[1].mean())
            corr = n_eff / (n_eff - 1)
        elif order == 3:
            series = (
                (cols[0] - cols[0].mean())
                * (cols[1] - cols[1].mean())
                * (cols[2] - cols[2].mean())
            )
            corr = n_eff * n_eff / ((n_eff - 1) * (n_eff - 2))
        else:
            raise MartingaleError("martingale estimation supports |A| <= 3")
        total = total + corr * series / eps_mass
    return total


def excursion_mean_estimate(
    spec: MartingaleSpec,
    x,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 401,
) -> EstimatorResult:
    """Estimate the excursion mean of the partition martingale at ``x``.

    g = 0 route: each partition term is a joint cumulant of its block
    functionals.  Nonzero exact g supports singletons only, through the
    weighted-moment inversion.
    """
    fam = spec.family
    a = spec.subset
    if pt.card(a) > 3:
        raise MartingaleError("martingale estimation supports |A| <= 3")
    dom = fam.dom
    if fam.g.variant != "zero":
        if pt.card(a) != 1:
            raise MartingaleError(
                "weighted route with nonzero g supports singleton subsets only")
        wm = weighted_excursion_moments(
            dom, spec.level, x, 0.0, [("field", fam.field(a))], reps, eps_mass,
            cfg, master_seed, tag, g_weight=fam.g)
        res = wm[(0,)]
        return EstimatorResult(res.value, res.se, res.reps, "martingale-mean")
    pos, arep, _, flags = replica_samples(
        dom, spec.level, x, reps, eps_mass, cfg, master_seed, tag)
    ok = flags == K.STATUS_OK
    blocks_all = _per_replica_blocks(fam, a, pos, arep, reps, eps_mass)
    blocks = {c: v[ok] for c, v in blocks_all.items()}
    n_eff = int(ok.sum())
    series = _partition_series(blocks, a, n_eff, eps_mass)
    return EstimatorResult(float(series.mean()), batch_se(series), n_eff, "martingale-mean")


def paired_level_estimates(
    spec_lo: MartingaleSpec,
    spec_hi: MartingaleSpec,
    x,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 411,
) -> Tuple[EstimatorResult, EstimatorResult, EstimatorResult]:
    """Martingale means at two nested levels from the same replicas.

    Returns (estimate at lo, estimate at hi, estimate of the difference);
    the difference uses common replicas, which is the sharp test of level
    constancy.
    """
    fam = spec_lo.family
    a = spec_lo.subset
    dom = fam.dom
    pos, arep, lvl, flags = replica_samples_levels(
        dom, (spec_lo.level, spec_hi.level), x, reps, eps_mass, cfg, master_seed, tag)
    ok = flags == K.STATUS_OK
    n_eff = int(ok.sum())
    results = []
    series_by_level = []
    for li in (0, 1):
        sel = lvl == li
        blocks_all = _per_replica_blocks(fam, a, pos[sel], arep[sel], reps, eps_mass)
        blocks = {c: v[ok] for c, v in blocks_all.items()}
        series = _partition_series(blocks, a, n_eff, eps_mass)
        series_by_level.append(series)
        results.append(EstimatorResult(float(series.mean()), batch_se(series), n_eff, "martingale-mean"))
    diff = series_by_level[1] - series_by_level[0]
    results.append(EstimatorResult(float(diff.mean()), batch_se(diff), n_eff, "martingale-diff"))
    return tuple(results)


def level_regression_diagnostic(
    spec_lo: MartingaleSpec,
    spec_hi: MartingaleSpec,
    x,
    reps: int,
    eps_mass: float,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 421,
) -> Dict[str, float]:
    """Regression of the deeper-level martingale on the shallow one.

    The tower property makes the conditional mean of M_{k+1} given the
    shallow record equal to M_k, so the least-squares line of the per-replica
    pairs should be consistent with slope 1, intercept 0.  Reported as a
    diagnostic; the gate-level check is mean constancy.
    """
    fam = spec_lo.family
    a = spec_lo.subset
    pos, arep, lvl, flags = replica_samples_levels(
        fam.dom, (spec_lo.level, spec_hi.level), x, reps, eps_mass, cfg, master_seed, tag)
    ok = flags == K.STATUS_OK
    vals = []
    for li in (0, 1):
        sel = lvl == li
        blocks = _per_replica_blocks(fam, a, pos[sel], arep[sel], reps, eps_mass)
        gfac = np.ones(reps)
        m = np.zeros(reps)
        for sigma in pt.enumerate_partitions(a):
            prod = gfac.copy()
            for c in sigma:
                prod *= blocks[c]
            m += prod
        vals.append(m[ok])
    mk, mk1 = vals
    X = np.stack([np.ones_like(mk), mk], axis=1)
    coef, *_ = np.linalg.lstsq(X, mk1, rcond=None)
    resid = mk1 - X @ coef
    dof = max(len(mk) - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return {
        "intercept": float(coef[0]),
        "slope": float(coef[1]),
        "intercept_se": math.sqrt(cov[0, 0]),
        "slope_se": math.sqrt(cov[1, 1]),
        "n": len(mk),
    }


# ---------------------------------------------------------------------------
# transformed Laplace functional (the analytic side of the backbone theorem)

@dataclass
class TransformedLaplace:
    value: float
    se: float
    per_partition: Dict[Tuple[int, ...], EstimatorResult]
    normalizer: float


def transformed_laplace(
    spec: MartingaleSpec,
    x,
    lam: float,
    cfg: PathConfig,
    reps: int = 200_000,
    master_seed: int = 0,
    tag: int = 431,
    inner_reps: int = 800,
    inner_grid: Tuple[int, int] = (41, 21),
) -> TransformedLaplace:
    """Laplace functional of the martingale-transformed exit measure.

    Computes N(e_lam M_k(N)) / N(M_k(N)) by the Palm route: the one-block
    partition term is a terminal Feynman-Kac average, the two-singleton term
    an occupation integral of two inner Feynman-Kac fields.  Self-normalizing
    by the lam = 0 run makes the lam = 0 value exactly one and cancels the
    grid scale.  Supports one or two targets with g = 0.
    """
    fam = spec.family
    if fam.g.variant != "zero":
        raise MartingaleError("transformed Laplace implemented for g = 0")
    n = fam.n
    if n > 2:
        raise MartingaleError("transformed Laplace supports 1..2 targets")
    dom = fam.dom
    d = dom.dimension
    x = dom.require_interior(x, spec.level)
    R = dom.level_radius(spec.level)

    values: Dict[float, Dict[Tuple[int, ...], EstimatorResult]] = {}
    for ll in ([0.0, lam] if lam != 0.0 else [0.0]):
        w = radial_nonlinear_profile(d, R, ll)
        if n == 1:
            m1 = fam.fields[1]
            term, integ, okv = _fk_outer_run(
                dom, R, x, cfg, w, None, False, m1, reps, master_seed, tag + int(ll * 1000))
            series = term
            vals = {(1,): EstimatorResult(float(series.mean()), batch_se(series), reps, "palm-recursion")}
        else:
            F = _inner_singleton_field(
                dom, spec.level, w, fam, cfg, inner_reps, inner_grid, master_seed, tag + 13 + int(ll * 1000))
            pair_field = fam.fields[3]
            if not isinstance(pair_field, AxialGridField):
                raise MartingaleError("two-target transform needs the gridded pair potential")
            term, integ, okv = _fk_outer_run(
                dom, R, x, cfg, w, F, True, pair_field, reps, master_seed, tag + int(ll * 1000))
            vals = {
                (3,): EstimatorResult(float(term.mean()), batch_se(term), reps, "palm-recursion"),
                (1, 2): EstimatorResult(float(integ.mean()), batch_se(integ), reps, "palm-recursion"),
            }
        values[ll] = vals

    norm = sum(v.value for v in values[0.0].values())
    if lam == 0.0:
        return TransformedLaplace(1.0, 0.0, values[0.0], norm)
    num_vals = values[lam]
    num = sum(v.value for v in num_vals.values())
    se_num = math.sqrt(sum(v.se ** 2 for v in num_vals.values()))
    se_norm = math.sqrt(sum(v.se ** 2 for v in values[0.0].values()))
    ratio = num / norm
    se = math.sqrt(se_num ** 2 + ratio ** 2 * se_norm ** 2) / norm
    return TransformedLaplace(ratio, se, num_vals, norm)


def _fk_outer_run(dom, R, x, cfg, w, F, use_pair, terminal, reps, master_seed, tag):
    d = dom.dimension
    if isinstance(terminal, MartinField):
        term_is_grid = 0
        pole = np.zeros(6)
        pole[:d] = terminal.pole
        invn = terminal.invnorm
        ax6, tg, pg, V, Vt, Vp = _pack_axial(F if F is not None else None, d)
        Vg = V
    else:
        term_is_grid = 1
        pole = np.zeros(6)
        invn = 1.0
        if F is not None:
            ax6, tg, pg, V, Vt, Vp = _pack_axial(F, d)
            if not np.allclose(F.axis, terminal.axis):
                raise MartingaleError("inner field and terminal grid must share the symmetry axis")
            Vg = _resample_on(F, terminal)
        else:
            ax6, tg, pg, V, Vt, Vp = _pack_axial(terminal, d)
            Vg = terminal.V
    out_term = np.zeros(reps)
    out_int = np.zeros(reps)
    out_ok = np.zeros(reps, dtype=np.int64)
    K.fk_outer(
        master_seed, tag, reps, d, dom.center_array, R,
        np.asarray(x, dtype=float), cfg.dt, cfg.layer(d), cfg.max_steps,
        w.r, w.v,
        ax6, tg, pg, V, 1 if use_pair else 0,
        1 if use_pair else 0,
        term_is_grid, Vt, Vp, Vg, pole, invn,
        out_term, out_int, out_ok,
    )
    return out_term, out_int, out_ok


def _pack_axial(field: Optional[AxialGridField], d: int):
    if field is None:
        z2 = np.zeros((2, 2))
        return np.zeros(6), np.zeros(2), np.zeros(2), z2, z2, z2
    ax, tg, pg, V, Vt, Vp = field.kernel_pack()
    ax6 = np.zeros(6)
    ax6[:d] = ax
    return ax6, tg, pg, V, Vt, Vp


def _resample_on(F: AxialGridField, terminal: AxialGridField) -> np.ndarray:
    """Terminal grid values resampled onto the inner field's lattice."""
    if (
        len(F.tg) == len(terminal.tg)
        and len(F.pg) == len(terminal.pg)
        and np.allclose(F.tg, terminal.tg)
        and np.allclose(F.pg, terminal.pg)
    ):
        return terminal.V
    tg, pg = F.tg, F.pg
    TT, PP = np.meshgrid(tg, pg, indexing="ij")
    vals = terminal._interp(terminal.V, TT.ravel(), PP.ravel())
    return vals.reshape(TT.shape)


def _inner_singleton_field(
    dom: DomainModel,
    level: int,
    w: RadialTable,
    fam: PotentialFamily,
    cfg: PathConfig,
    reps_per_node: int,
    grid: Tuple[int, int],
    master_seed: int,
    tag: int,
) -> AxialGridField:
    """Grid of N_y(e_lam <X_k, v_1>) = E_y[v_1(exit) exp(-int 4 w)].

    With antipodal targets the second singleton is the mirror image in the
    axial coordinate, which the outer kernel exploits.
    """
    m1 = fam.fields[1]
    if not isinstance(m1, MartinField):
        raise MartingaleError("inner fields need Martin-kernel singletons")
    R = dom.level_radius(level)
    d = dom.dimension
    axis = (m1.pole - dom.center_array) / dom.radius
    from .superprocess import _any_perp

    perp = _any_perp(axis)
    nt, npg = grid
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
    nn = len(nodes)
    out_pos = np.zeros((nn * reps_per_node, d))
    out_w = np.zeros(nn * reps_per_node)
    out_ok = np.zeros(nn * reps_per_node, dtype=np.int64)
    K.fk_exit_batch(
        master_seed, tag, d, dom.center_array, R,
        nodes, reps_per_node, cfg.dt, cfg.layer(d), cfg.max_steps,
        w.r, w.v, out_pos, out_w, out_ok,
    )
    vals = (m1.value(out_pos) * out_w * out_ok).reshape(nn, reps_per_node).mean(axis=1)
    V = np.zeros((nt, npg))
    for (i, j), mval in zip(idx, vals):
        V[i, j] = mval
    for i, t in enumerate(tg):
        for j, p in enumerate(pg):
            if t * t + p * p >= R * R * (1 - 1e-10):
                y = dom.center_array + t * axis + p * perp
                r = np.linalg.norm(y - dom.center_array)
                if r > 0:
                    y = dom.center_array + (y - dom.center_array) * (R / r)
                V[i, j] = float(m1.value(y[None, :])[0])
    return AxialGridField(dom, axis, tg, pg, V)
