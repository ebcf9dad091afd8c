"""Path samplers: plain Brownian exit, harmonic transforms, potential transforms.

The production samplers are jitted; the module also carries a plain-python
stepper for arbitrary drift/kill fields (used by the three-target structural
experiments and by user-supplied fields), with the simpler bridge-probability
boundary test.

A harmonic transform drifts by the log-gradient of a positive harmonic field
and exits on the boundary; a potential transform drifts by the log-gradient
of the potential and dies in the interior at rate source/potential.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import _kernels as K
from . import rng as _rng
from .geometry import DomainModel, DomainError
from .pde_solutions import (
    AxialGridField,
    MartinField,
    NonlinearField,
    PotentialFamily,
    zero_field,
)


class PathError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathConfig:
    """Time step, boundary-layer width, and a step cap.

    ``bdry_tol`` defaults to 3 sqrt(d dt) at use time so the overshoot test
    only fires where a single step can plausibly reach the boundary.
    """

    dt: float = 1e-3
    bdry_tol: Optional[float] = None
    max_steps: int = 2_000_000

    def layer(self, d: int, dt: Optional[float] = None) -> float:
        h = self.dt if dt is None else dt
        tol = self.bdry_tol if self.bdry_tol is not None else 3.0 * math.sqrt(d * h)
        if tol < math.sqrt(d * h):
            raise DomainError("boundary layer thinner than one step's spread")
        return tol


@dataclass(frozen=True)
class Plain:
    pass


@dataclass(frozen=True)
class Killed:
    g: NonlinearField


@dataclass(frozen=True)
class HarmonicH:
    """Positive harmonic drift field; exits on the boundary."""

    field: object  # .value / .gradient


@dataclass(frozen=True)
class PotentialH:
    """Potential drift field with its recursion source; dies in the interior."""

    family: PotentialFamily
    mask: int


@dataclass
class SampledPath:
    times: np.ndarray
    positions: np.ndarray
    terminal: str              # "exit" | "death"
    terminal_time: float
    terminal_point: np.ndarray
    weight_log: float = 0.0    # int 4 g dt along the path, when requested
    crossed_level: Optional[int] = None
    crossing_time: Optional[float] = None
    crossing_point: Optional[np.ndarray] = None

    @property
    def duration(self) -> float:
        return self.terminal_time


_OUT_LEN = 24


def _empty_axial():
    z = np.zeros(1)
    z2 = np.zeros((2, 2))
    return np.zeros(6), np.zeros(2), np.zeros(2), z2, z2, z2


def _run_kernel_path(
    dom: DomainModel,
    x,
    cfg: PathConfig,
    master_seed: int,
    tag: int,
    rid: int,
    *,
    level: int = -1,
    drift_code: int = K.DRIFT_NONE,
    pole: Optional[np.ndarray] = None,
    pole2: Optional[np.ndarray] = None,
    axial: Optional[AxialGridField] = None,
    kill_code: int = K.KILL_NONE,
    kg: Optional[NonlinearField] = None,
    kill_scale: float = 1.0,
    mark_level: Optional[int] = None,
    seed_rate: float = 0.0,
    seed_cap: int = 0,
    gweight: Optional[NonlinearField] = None,
    record: bool = False,
    dt: Optional[float] = None,
) -> Tuple[SampledPath, np.ndarray, np.ndarray]:
    d = dom.dimension
    x = dom.require_interior(x, level)
    dt = cfg.dt if dt is None else dt
    R_exit = dom.level_radius(level)
    if axial is not None:
        ax, tg, pg, V, Vt, Vp = axial.kernel_pack()
        ax6 = np.zeros(6)
        ax6[:d] = ax
    else:
        ax6, tg, pg, V, Vt, Vp = _empty_axial()
    p6 = np.zeros(6)
    p26 = np.zeros(6)
    if pole is not None:
        p6[:d] = pole
    if pole2 is not None:
        p26[:d] = pole2
    if kg is not None:
        kgc, kgp, kgr, kgv = kg.kernel_pack()
    else:
        kgc, kgp, kgr, kgv = K.GF_NONE, 0.0, np.zeros(1), np.zeros(1)
    if kill_code == K.KILL_PAIR_OVER_GRID:
        kgp = kill_scale
    if gweight is not None:
        gwc, gwp, gwr, gwv = gweight.kernel_pack()
    else:
        gwc, gwp, gwr, gwv = K.GF_NONE, 0.0, np.zeros(1), np.zeros(1)
    R_mark = dom.level_radius(mark_level) if mark_level is not None else -1.0
    seeds = np.zeros((max(seed_cap, 1), d))
    path_buf = np.zeros((cfg.max_steps if record else 1, d + 1))
    out = np.zeros(_OUT_LEN)
    K.path_run(
        master_seed, tag, rid,
        d, dom.center_array, R_exit,
        np.asarray(x, dtype=float),
        dt, cfg.layer(d, dt), cfg.max_steps,
        drift_code, p6, p26,
        ax6, tg, pg, V, Vt, Vp,
        kill_code, kgc, kgp, kgr, kgv,
        R_mark, seed_rate,
        gwc, gwp, gwr, gwv,
        1 if record else 0, path_buf,
        seeds,
        out,
    )
    status = int(out[0])
    if status == K.STATUS_MAXSTEPS:
        raise PathError("path exceeded the step cap before terminating")
    npts = int(out[20])
    times = path_buf[:npts, 0].copy() if record else np.zeros(0)
    positions = path_buf[:npts, 1:1 + d].copy() if record else np.zeros((0, d))
    crossed = out[9] > 0.5
    sp = SampledPath(
        times=times,
        positions=positions,
        terminal="exit" if int(out[1]) == K.TERM_EXIT else "death",
        terminal_time=float(out[2]),
        terminal_point=out[3:3 + d].copy(),
        weight_log=float(out[19]),
        crossed_level=mark_level if crossed else None,
        crossing_time=float(out[10]) if crossed else None,
        crossing_point=out[11:11 + d].copy() if crossed else None,
    )
    nseeds = int(out[18])
    return sp, seeds[:nseeds].copy(), out


def sample_brownian_path(
    dom: DomainModel,
    x,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 701,
    rid: int = 0,
    level: int = -1,
    record: bool = True,
) -> SampledPath:
    """Euler path of plain Brownian motion to its exit from the level sphere."""
    sp, _, _ = _run_kernel_path(dom, x, cfg, master_seed, tag, rid, level=level, record=record)
    return sp


def sample_harmonic_transform_path(
    dom: DomainModel,
    x,
    h: HarmonicH,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 702,
    rid: int = 0,
    record: bool = True,
    mark_level: Optional[int] = None,
    seed_rate: float = 0.0,
    seed_cap: int = 0,
) -> Tuple[SampledPath, np.ndarray]:
    """Exit-conditioned path: drift by the log-gradient of the harmonic field."""
    fld = h.field
    if isinstance(fld, MartinField):
        sp, seeds, _ = _run_kernel_path(
            dom, x, cfg, master_seed, tag, rid,
            drift_code=K.DRIFT_MARTIN, pole=fld.pole,
            mark_level=mark_level, seed_rate=seed_rate, seed_cap=seed_cap,
            record=record,
        )
        return sp, seeds
    if isinstance(fld, AxialGridField):
        sp, seeds, _ = _run_kernel_path(
            dom, x, cfg, master_seed, tag, rid,
            drift_code=K.DRIFT_AXIAL, axial=fld,
            mark_level=mark_level, seed_rate=seed_rate, seed_cap=seed_cap,
            record=record,
        )
        return sp, seeds
    return _python_path(dom, x, cfg, master_seed, tag, rid, drift_field=fld,
                        kill_rate=None, mark_level=mark_level,
                        seed_rate=seed_rate, record=record)


def sample_potential_transform_path(
    dom: DomainModel,
    x,
    spec: PotentialH,
    cfg: PathConfig,
    master_seed: int = 0,
    tag: int = 703,
    rid: int = 0,
    record: bool = True,
    mark_level: Optional[int] = None,
    seed_rate: float = 0.0,
    seed_cap: int = 0,
) -> Tuple[SampledPath, np.ndarray]:
    """Interior-death path: drift by the potential, die at rate source/potential.

    Discretized paths that reach the boundary before dying are a leakage
    artifact; callers must treat SampledPath.terminal == "exit" as a reject.
    """
    fam = spec.family
    mask = spec.mask
    if not fam.finite(mask):
        raise PathError("potential-transform field is infinite for this subset")
    fld = fam.fields[mask]
    singles = [b for b in range(fam.n) if mask >> b & 1]
    if isinstance(fld, AxialGridField) and len(singles) == 2 and all(
        isinstance(fam.fields[1 << b], MartinField) for b in singles
    ):
        m1 = fam.fields[1 << singles[0]]
        m2 = fam.fields[1 << singles[1]]
        sp, seeds, _ = _run_kernel_path(
            dom, x, cfg, master_seed, tag, rid,
            drift_code=K.DRIFT_AXIAL, axial=fld,
            pole=m1.pole, pole2=m2.pole,
            kill_code=K.KILL_PAIR_OVER_GRID,
            kill_scale=m1.invnorm * m2.invnorm,
            mark_level=mark_level, seed_rate=seed_rate, seed_cap=seed_cap,
            record=record,
        )
        return sp, seeds

    def rate(pts):
        return fam.source_value(mask, pts) / np.maximum(fam.value(mask, pts), 1e-300)

    return _python_path(dom, x, cfg, master_seed, tag, rid, drift_field=fld,
                        kill_rate=rate, mark_level=mark_level,
                        seed_rate=seed_rate, record=record)


def survival_weight(path: SampledPath, g: NonlinearField) -> float:
    """exp(-int 4 g) along a recorded path, trapezoidal in time."""
    if path.positions.shape[0] < 2:
        return 1.0
    vals = 4.0 * g.evaluate(path.positions)
    dts = np.diff(path.times)
    integral = float(np.sum(0.5 * (vals[1:] + vals[:-1]) * dts))
    return math.exp(-integral)


# ---------------------------------------------------------------------------
# python fallback stepper for arbitrary fields

def _python_path(
    dom: DomainModel,
    x,
    cfg: PathConfig,
    master_seed: int,
    tag: int,
    rid: int,
    drift_field=None,
    kill_rate=None,
    mark_level: Optional[int] = None,
    seed_rate: float = 0.0,
    record: bool = True,
) -> Tuple[SampledPath, np.ndarray]:
    d = dom.dimension
    x = np.asarray(dom.require_interior(x), dtype=float).copy()
    R = dom.radius
    R_mark = dom.level_radius(mark_level) if mark_level is not None else -1.0
    rs = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([master_seed & 0x7FFFFFFF, tag, rid])))
    dt = cfg.dt
    t = 0.0
    times = [0.0]
    pts = [x.copy()]
    seeds = []
    crossed = None
    cross_t = None
    cross_p = None
    terminal = None
    for _ in range(cfg.max_steps):
        mu = np.zeros(d)
        if drift_field is not None:
            v = float(drift_field.value(x[None, :])[0])
            gr = drift_field.gradient(x[None, :])[0]
            mu = gr / max(v, 1e-300)
        h = dt
        bn = float(np.linalg.norm(mu))
        distb = dom.boundary_distance(x)
        if bn > 0:
            cap = 0.2 * max(distb, 0.02 * R) / bn
            while h > cap and h > dt / 1024:
                h *= 0.5
        r = float(np.linalg.norm(x - dom.center_array))
        if R_mark > 0 and crossed is None and r < R_mark and seed_rate > 0:
            for _s in range(rs.poisson(seed_rate * h)):
                seeds.append(x.copy())
        if kill_rate is not None:
            rate = float(kill_rate(x[None, :])[0])
            if rate > 0 and rs.random() < -math.expm1(-rate * h):
                td = rs.exponential(1.0 / rate) if rate > 0 else h
                td = min(td, h)
                x = x + mu * td + math.sqrt(td) * rs.normal(size=d)
                t += td
                terminal = "death"
                break
        xn = x + mu * h + math.sqrt(h) * rs.normal(size=d)
        rn = float(np.linalg.norm(xn - dom.center_array))
        exited = rn >= R
        if not exited:
            # bridge crossing test against the outer sphere
            p = math.exp(-2.0 * max(R - r, 0.0) * max(R - rn, 0.0) / h)
            if rs.random() < p:
                exited = True
        t += h
        if exited:
            xr = xn if rn > 0 else x
            x = dom.center_array + (xr - dom.center_array) * (R / max(float(np.linalg.norm(xr - dom.center_array)), 1e-300))
            terminal = "exit"
            if record:
                times.append(t)
                pts.append(x.copy())
            break
        x = xn
        if R_mark > 0 and crossed is None:
            if float(np.linalg.norm(x - dom.center_array)) >= R_mark:
                crossed = mark_level
                cross_t = t
                cross_p = dom.center_array + (x - dom.center_array) * (R_mark / float(np.linalg.norm(x - dom.center_array)))
        if record:
            times.append(t)
            pts.append(x.copy())
    if terminal is None:
        raise PathError("fallback path exceeded the step cap")
    sp = SampledPath(
        times=np.asarray(times),
        positions=np.asarray(pts),
        terminal=terminal,
        terminal_time=t,
        terminal_point=x.copy(),
        crossed_level=crossed,
        crossing_time=cross_t,
        crossing_point=cross_p,
    )
    return sp, np.asarray(seeds).reshape(-1, d)
