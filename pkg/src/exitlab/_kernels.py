"""Jitted particle and path kernels shared by the simulation modules.

Everything here works on ball domains (center + radius) and uses per-replica
PCG32 streams, so results never depend on how work is split across workers.

Boundary handling: outside a layer of width ``bdry_tol`` steps are plain
Euler; inside the layer the normal component runs an exact half-space
first-passage test (exit time drawn as dist^2 / Z^2) and, when the step does
not exit, the normal increment is redrawn from the no-crossing conditional.
This removes the O(sqrt(dt)) exit bias of naive Euler stepping.

Fields are passed as packed arrays:

- radial tables   (rg, rv): piecewise-linear in |x - center|, clamped
- axial grids     (tg, pg, V, Vt, Vp) + axis: bilinear in (t, rho) with
                  precomputed nodal gradients for drift evaluation
- Martin poles    pole (d,) + inverse normalizer: closed-form kernel/gradient
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint64

from .rng import pcg_next, randn, rand_exp, stream, u01

STATUS_OK = 0
STATUS_ABORT = 1
STATUS_MAXSTEPS = 2

TERM_EXIT = 0
TERM_DEATH = 1

_EMPTY = np.zeros(1, dtype=np.float64)
_EMPTY2 = np.zeros((1, 1), dtype=np.float64)

# field codes for scalar rate / functional fields
GF_NONE = 0
GF_HALFSPACE = 1   # p0 / x_d^2
GF_RADIAL = 2      # radial table about the domain center

# drift codes
DRIFT_NONE = 0
DRIFT_MARTIN = 1   # del log K(., pole)
DRIFT_AXIAL = 2    # del log V for an axial grid field

# kill codes
KILL_NONE = 0
KILL_GFIELD = 1    # rate 4 g(x), g per gf-code
KILL_PAIR_OVER_GRID = 2  # rate 4 K1 K2 / V


@njit(inline="always", cache=True, fastmath=True)
def _norm2_centered(x, center, d):
    s = 0.0
    for j in range(d):
        t = x[j] - center[j]
        s += t * t
    return s


@njit(inline="always", cache=True, fastmath=True)
def _radial_interp(rg, rv, r):
    n = rg.shape[0]
    if r <= rg[0]:
        return rv[0]
    if r >= rg[n - 1]:
        return rv[n - 1]
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if rg[mid] <= r:
            lo = mid
        else:
            hi = mid
    w = (r - rg[lo]) / (rg[lo + 1] - rg[lo])
    return rv[lo] * (1.0 - w) + rv[lo + 1] * w


@njit(inline="always", cache=True, fastmath=True)
def _eval_gfun(code, p0, rg, rv, x, center, d):
    if code == GF_NONE:
        return 0.0
    if code == GF_HALFSPACE:
        h = x[d - 1]
        if h <= 0.0:
            return 1.0e300
        return p0 / (h * h)
    r = np.sqrt(_norm2_centered(x, center, d))
    return _radial_interp(rg, rv, r)


@njit(inline="always", cache=True, fastmath=True)
def _grid_locate(g, v):
    n = g.shape[0]
    if v <= g[0]:
        return 0, 0.0
    if v >= g[n - 1]:
        return n - 2, 1.0
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if g[mid] <= v:
            lo = mid
        else:
            hi = mid
    return lo, (v - g[lo]) / (g[lo + 1] - g[lo])


@njit(inline="always", cache=True, fastmath=True)
def _axial_coords(x, center, axis, d):
    t = 0.0
    for j in range(d):
        t += (x[j] - center[j]) * axis[j]
    s = 0.0
    for j in range(d):
        q = (x[j] - center[j]) - t * axis[j]
        s += q * q
    return t, np.sqrt(s)


@njit(inline="always", cache=True, fastmath=True)
def _axial_eval(tg, pg, V, t, rho):
    i, wt = _grid_locate(tg, t)
    j, wp = _grid_locate(pg, rho)
    return (
        V[i, j] * (1.0 - wt) * (1.0 - wp)
        + V[i + 1, j] * wt * (1.0 - wp)
        + V[i, j + 1] * (1.0 - wt) * wp
        + V[i + 1, j + 1] * wt * wp
    )


@njit(inline="always", cache=True, fastmath=True)
def _martin_raw(x, pole, center, R, d):
    # (R^2 - |x-c|^2) / |x - pole|^d, no normalization
    a2 = _norm2_centered(x, center, d)
    s = 0.0
    for j in range(d):
        t = x[j] - pole[j]
        s += t * t
    if s <= 0.0:
        return 1.0e300
    return (R * R - a2) * s ** (-0.5 * d)


@njit(inline="always", cache=True, fastmath=True)
def _martin_loggrad(x, pole, center, R, d, out):
    # del log K = -2 (x-c)/(R^2-|x-c|^2) - d (x-pole)/|x-pole|^2
    a2 = _norm2_centered(x, center, d)
    denom = R * R - a2
    s = 0.0
    for j in range(d):
        t = x[j] - pole[j]
        s += t * t
    for j in range(d):
        out[j] = -2.0 * (x[j] - center[j]) / denom - d * (x[j] - pole[j]) / s


# ---------------------------------------------------------------------------
# one diffusion sub-step against a sphere of radius R about `center`
#
# Moves x in place over time h (with optional drift already added by caller
# into mu), handling the boundary layer. Returns (state, status, tau) where
# status 0 = still inside, 1 = exited (x is on the sphere), and tau <= h is
# the elapsed time of this sub-step.

@njit(inline="always", cache=True, fastmath=True)
def _move_step(state, inc, x, center, R, d, h, bdry_tol, mu, scratch):
    # the exact stay/exit machinery only matters within a few 1-d standard
    # deviations of the sphere; crossings from farther than 3.5 sqrt(h) have
    # probability below exp(-24) and plain Euler suffices there
    sqh = np.sqrt(h)
    inner = R - 3.5 * sqh
    r2 = _norm2_centered(x, center, d)
    if r2 <= inner * inner:
        # free region: no square root needed on the hot path
        for j in range(d):
            state, g = randn(state, inc)
            x[j] += mu[j] * h + sqh * g
        if _norm2_centered(x, center, d) >= R * R:
            # rare overshoot from outside the layer: project
            rr = np.sqrt(_norm2_centered(x, center, d))
            for j in range(d):
                x[j] = center[j] + (x[j] - center[j]) * (R / rr)
            return state, 1, h
        return state, 0, h
    r = np.sqrt(r2)
    dist = R - r
    # Boundary layer. Over one step the distance-to-sphere process is a 1-d
    # Brownian motion with (locally constant) drift toward the boundary
    #   m = mu.n + (d-1)/(2r)        (user drift + Bessel curvature drift)
    # so the stay/exit decision and the staying endpoint can be sampled
    # exactly: propose the drifted endpoint, accept staying with the
    # drift-free bridge no-crossing probability 1 - exp(-2 y a / h).
    ndot = 0.0
    for j in range(d):
        ndot += mu[j] * (x[j] - center[j]) / r
    m = ndot + 0.5 * (d - 1) / r
    a = dist
    state, g = randn(state, inc)
    y = (a - m * h) + sqh * g
    stay = False
    if y > 0.0:
        state, uu = u01(state, inc)
        if uu < 1.0 - np.exp(-2.0 * y * a / h):
            stay = True
    if not stay:
        # exit during this step; clock from the flat first-passage law
        # conditioned to land inside the step (O(h) accuracy suffices)
        tau = h
        for _try in range(64):
            state, z = randn(state, inc)
            if z * z * h >= a * a:
                tau = a * a / (z * z)
                break
        for j in range(d):
            state, g = randn(state, inc)
            scratch[j] = x[j] + (mu[j] - ndot * (x[j] - center[j]) / r) * tau + np.sqrt(tau) * g
        dot = 0.0
        for j in range(d):
            dot += (scratch[j] - x[j]) * (x[j] - center[j]) / r
        for j in range(d):
            scratch[j] -= dot * (x[j] - center[j]) / r
        rr = 0.0
        for j in range(d):
            t = scratch[j] - center[j]
            rr += t * t
        rr = np.sqrt(rr)
        for j in range(d):
            x[j] = center[j] + (scratch[j] - center[j]) * (R / rr)
        return state, 1, tau
    # stays inside: tangential gaussian step, radial distance set to y
    for j in range(d):
        state, g = randn(state, inc)
        scratch[j] = x[j] + (mu[j] - ndot * (x[j] - center[j]) / r) * h + sqh * g
    dot = 0.0
    for j in range(d):
        dot += (scratch[j] - x[j]) * (x[j] - center[j]) / r
    for j in range(d):
        scratch[j] -= dot * (x[j] - center[j]) / r
    rr = 0.0
    for j in range(d):
        t = scratch[j] - center[j]
        rr += t * t
    rr = np.sqrt(rr)
    scale = (R - y) / rr
    for j in range(d):
        x[j] = center[j] + (scratch[j] - center[j]) * scale
    return state, 0, h


@njit(inline="always", cache=True, fastmath=True)
def _move_step0(state, inc, x, center, R, d, h, bdry_tol, scratch):
    """Drift-free variant of _move_step (hot path of the cloud kernels)."""
    sqh = np.sqrt(h)
    inner = R - 3.5 * sqh
    r2 = _norm2_centered(x, center, d)
    if r2 <= inner * inner:
        for j in range(d):
            state, g = randn(state, inc)
            x[j] += sqh * g
        if _norm2_centered(x, center, d) >= R * R:
            rr = np.sqrt(_norm2_centered(x, center, d))
            for j in range(d):
                x[j] = center[j] + (x[j] - center[j]) * (R / rr)
            return state, 1, h
        return state, 0, h
    r = np.sqrt(r2)
    dist = R - r
    m = 0.5 * (d - 1) / r
    a = dist
    state, g = randn(state, inc)
    y = (a - m * h) + sqh * g
    stay = False
    if y > 0.0:
        state, uu = u01(state, inc)
        if uu < 1.0 - np.exp(-2.0 * y * a / h):
            stay = True
    if not stay:
        tau = h
        for _try in range(64):
            state, z = randn(state, inc)
            if z * z * h >= a * a:
                tau = a * a / (z * z)
                break
        sqt = np.sqrt(tau)
        dot = 0.0
        for j in range(d):
            state, g = randn(state, inc)
            scratch[j] = sqt * g
            dot += scratch[j] * (x[j] - center[j])
        dot /= r * r
        rr = 0.0
        for j in range(d):
            scratch[j] = x[j] + scratch[j] - dot * (x[j] - center[j]) - center[j]
            rr += scratch[j] * scratch[j]
        rr = np.sqrt(rr)
        for j in range(d):
            x[j] = center[j] + scratch[j] * (R / rr)
        return state, 1, tau
    dot = 0.0
    for j in range(d):
        state, g = randn(state, inc)
        scratch[j] = sqh * g
        dot += scratch[j] * (x[j] - center[j])
    dot /= r * r
    rr = 0.0
    for j in range(d):
        scratch[j] = x[j] + scratch[j] - dot * (x[j] - center[j]) - center[j]
        rr += scratch[j] * scratch[j]
    rr = np.sqrt(rr)
    scale = (R - y) / rr
    for j in range(d):
        x[j] = center[j] + scratch[j] * scale
    return state, 0, h


# ---------------------------------------------------------------------------
# branching cloud: multi-level exit recording with optional pruning

@njit(cache=True, fastmath=True)
def cloud_counts(
    reps,
    master,
    tag,
    d,
    center,
    levels,          # increasing radii; atoms recorded at each crossing
    x0,
    brate,           # 4 / eps_mass
    dt,
    bdry_tol,
    pop_cap,
    prune_code, prune_p0, prune_rg, prune_rv,
    gfun_code, gfun_p0, gfun_rg, gfun_rv,
    caps_z,          # (m, d) cap centers on the outermost level
    caps_eps2,       # (m,)
    out_counts,      # (reps, L) float64
    out_gsum,        # (reps, L) float64
    out_capmask,     # (reps,) int64
    out_flags,       # (reps,) int64
    out_events,      # (reps,) float64  branch events (diagnostic)
):
    L = levels.shape[0]
    m = caps_z.shape[0]
    stack_cap = 1 << 15
    stack = np.empty((stack_cap, 8), dtype=np.float64)
    scratch = np.empty(6)
    x = np.empty(6)
    for rep in range(reps):
        state, inc = stream(master, tag, rep)
        for j in range(d):
            stack[0, j] = x0[j]
        state, e = rand_exp(state, inc)
        stack[0, 6] = e / brate
        stack[0, 7] = 0.0  # level index
        top = 1
        created = 1
        events = 0.0
        flag = STATUS_OK
        while top > 0:
            top -= 1
            for j in range(d):
                x[j] = stack[top, j]
            tb = stack[top, 6]
            lvl = int(stack[top, 7])
            alive = True
            while alive:
                h = dt if tb > dt else tb
                R = levels[lvl]
                if prune_code != GF_NONE:
                    # rate frozen at the step start: avoids evaluating a
                    # boundary-blowup field at the exit point itself
                    gkill = _eval_gfun(prune_code, prune_p0, prune_rg, prune_rv, x, center, d)
                else:
                    gkill = 0.0
                state, status, tau = _move_step0(state, inc, x, center, R, d, h, bdry_tol, scratch)
                if prune_code != GF_NONE:
                    state, uu = u01(state, inc)
                    if uu < 1.0 - np.exp(-4.0 * gkill * tau):
                        alive = False
                        break
                if status == 1:
                    out_counts[rep, lvl] += 1.0
                    if gfun_code != GF_NONE:
                        out_gsum[rep, lvl] += _eval_gfun(gfun_code, gfun_p0, gfun_rg, gfun_rv, x, center, d)
                    if lvl == L - 1:
                        for cj in range(m):
                            s = 0.0
                            for j in range(d):
                                t = x[j] - caps_z[cj, j]
                                s += t * t
                            if s <= caps_eps2[cj]:
                                out_capmask[rep] |= np.int64(1) << np.int64(cj)
                        alive = False
                        break
                    lvl += 1
                    tb -= tau
                    if tb <= 0.0:
                        tb = 1.0e-300
                    continue
                tb -= tau
                if tb <= 0.0:
                    events += 1.0
                    state, uu = u01(state, inc)
                    if uu < 0.5:
                        alive = False
                    else:
                        created += 2
                        if created > pop_cap or top >= stack_cap - 1:
                            flag = STATUS_ABORT
                            alive = False
                            top = 0
                            break
                        for j in range(d):
                            stack[top, j] = x[j]
                        state, e = rand_exp(state, inc)
                        stack[top, 6] = e / brate
                        stack[top, 7] = float(lvl)
                        top += 1
                        state, e = rand_exp(state, inc)
                        tb = e / brate
        out_flags[rep] = flag
        out_events[rep] = events


@njit(cache=True, fastmath=True)
def cloud_atoms(
    reps,
    master,
    tag,
    d,
    center,
    levels,          # increasing recording radii; atoms stored at each
    starts,          # (reps, d) start per replica
    brate,
    dt,
    bdry_tol,
    pop_cap,
    prune_code, prune_p0, prune_rg, prune_rv,
    track_weights,   # accumulate int 4 g along lineages instead of killing
    fill,            # pass 2 writes atoms
    offsets,         # (reps*L + 1,) prefix of counts (pass 2), level-major
    out_counts,      # (reps, L) int64
    out_flags,       # (reps,) int64
    atom_pos,        # (n_atoms, d)
    atom_rep,        # (n_atoms,)
    atom_wlog,       # (n_atoms,)
):
    """Two-pass atom recorder; pass 1 counts with identical random draws,
    pass 2 fills the flat buffers at offsets[rep * L + level]."""
    L = levels.shape[0]
    stack_cap = 1 << 15
    stack = np.empty((stack_cap, 9), dtype=np.float64)
    scratch = np.empty(6)
    x = np.empty(6)
    for rep in range(reps):
        state, inc = stream(master, tag, rep)
        for j in range(d):
            stack[0, j] = starts[rep, j]
        state, e = rand_exp(state, inc)
        stack[0, 6] = e / brate
        stack[0, 7] = 0.0  # lineage int 4 g
        stack[0, 8] = 0.0  # level
        top = 1
        created = 1
        flag = STATUS_OK
        if fill == 0:
            for ll in range(L):
                out_counts[rep, ll] = 0
        filled = np.zeros(L, dtype=np.int64)
        while top > 0:
            top -= 1
            for j in range(d):
                x[j] = stack[top, j]
            tb = stack[top, 6]
            wlog = stack[top, 7]
            lvl = int(stack[top, 8])
            alive = True
            while alive:
                h = dt if tb > dt else tb
                if prune_code != GF_NONE:
                    g = _eval_gfun(prune_code, prune_p0, prune_rg, prune_rv, x, center, d)
                else:
                    g = 0.0
                state, status, tau = _move_step0(state, inc, x, center, levels[lvl], d, h, bdry_tol, scratch)
                if prune_code != GF_NONE:
                    if track_weights != 0:
                        wlog += 4.0 * g * tau
                    else:
                        state, uu = u01(state, inc)
                        if uu < 1.0 - np.exp(-4.0 * g * tau):
                            alive = False
                            break
                if status == 1:
                    if fill != 0:
                        idx = offsets[rep * L + lvl] + filled[lvl]
                        for j in range(d):
                            atom_pos[idx, j] = x[j]
                        atom_rep[idx] = rep
                        atom_wlog[idx] = wlog
                    filled[lvl] += 1
                    if fill == 0:
                        out_counts[rep, lvl] += 1
                    if lvl == L - 1:
                        alive = False
                        break
                    lvl += 1
                    tb -= tau
                    if tb <= 0.0:
                        tb = 1.0e-300
                    continue
                tb -= tau
                if tb <= 0.0:
                    state, uu = u01(state, inc)
                    if uu < 0.5:
                        alive = False
                    else:
                        created += 2
                        if created > pop_cap or top >= stack_cap - 1:
                            flag = STATUS_ABORT
                            alive = False
                            top = 0
                            break
                        for j in range(d):
                            stack[top, j] = x[j]
                        state, e = rand_exp(state, inc)
                        stack[top, 6] = e / brate
                        stack[top, 7] = wlog
                        stack[top, 8] = float(lvl)
                        top += 1
                        state, e = rand_exp(state, inc)
                        tb = e / brate
        out_flags[rep] = flag


# ---------------------------------------------------------------------------
# single-path sampler with drift, state-dependent killing, seed generation,
# marked-sphere crossing, and optional path recording

@njit(cache=True, fastmath=True)
def path_run(
    master, tag, rid,
    d, center, R_exit,
    x0,
    dt, bdry_tol, max_steps,
    drift_code, pole, pole2,          # pole2 used by pair kill field
    axial_axis, axial_tg, axial_pg, axial_V, axial_Vt, axial_Vp,
    kill_code, kg_code, kg_p0, kg_rg, kg_rv,   # KILL_GFIELD parameters
    R_mark,                            # crossing/seed sphere (<= R_exit); <=0 disables
    seed_rate,                         # seeds per unit time while inside mark, pre-crossing
    gweight_code, gw_p0, gw_rg, gw_rv,  # accumulate int 4 g dt along the path
    record_path, path_buf,             # (max_steps, d+1): t, x
    seeds_buf,                         # (seed_cap, d)
    out_vec,                           # scalars: see wrapper
):
    """Returns via out_vec:
    [0] status (0 ok, 2 max-steps)
    [1] terminal kind (0 exit, 1 death)
    [2] terminal time
    [3..3+d) terminal position
    [9] crossed mark flag
    [10] crossing time
    [11..11+d) crossing position
    [17] time spent inside mark before crossing (seed exposure)
    [18] n seeds
    [19] int 4 g dt along path (gweight field)
    [20] n recorded path points
    """
    state, inc = stream(master, tag, rid)
    x = np.empty(6)
    mu = np.zeros(6)
    scratch = np.empty(6)
    grad = np.empty(6)
    for j in range(d):
        x[j] = x0[j]
    t = 0.0
    crossed = False
    cross_t = 0.0
    exposure = 0.0
    nseeds = 0
    wlog = 0.0
    npts = 0
    seed_cap = seeds_buf.shape[0]
    if record_path != 0:
        path_buf[0, 0] = 0.0
        for j in range(d):
            path_buf[0, 1 + j] = x[j]
        npts = 1
    status = STATUS_MAXSTEPS
    term_kind = TERM_EXIT
    for _step in range(max_steps):
        # drift
        if drift_code == DRIFT_MARTIN:
            _martin_loggrad(x, pole, center, R_exit, d, grad)
            for j in range(d):
                mu[j] = grad[j]
        elif drift_code == DRIFT_AXIAL:
            tt, rho = _axial_coords(x, center, axial_axis, d)
            v = _axial_eval(axial_tg, axial_pg, axial_V, tt, rho)
            if v < 1.0e-300:
                v = 1.0e-300
            dvt = _axial_eval(axial_tg, axial_pg, axial_Vt, tt, rho)
            dvp = _axial_eval(axial_tg, axial_pg, axial_Vp, tt, rho)
            if rho > 1.0e-12:
                for j in range(d):
                    ax = axial_axis[j]
                    perp = ((x[j] - center[j]) - tt * ax) / rho
                    mu[j] = (dvt * ax + dvp * perp) / v
            else:
                for j in range(d):
                    mu[j] = dvt * axial_axis[j] / v
        # local step control: keep drift displacement below a fraction of
        # the distance to the absorbing sphere
        h = dt
        bnorm = 0.0
        for j in range(d):
            bnorm += mu[j] * mu[j]
        bnorm = np.sqrt(bnorm)
        r = np.sqrt(_norm2_centered(x, center, d))
        dist = R_exit - r
        if bnorm > 0.0:
            cap = 0.2 * (dist if dist > 0.02 * R_exit else 0.02 * R_exit) / bnorm
            for _halve in range(10):
                if h <= cap:
                    break
                h *= 0.5
        # seeds over this step (position frozen at step start)
        inside_mark = False
        if R_mark > 0.0 and not crossed:
            if r < R_mark:
                inside_mark = True
        # killing rate at step start; for the pair field, kg_p0 carries the
        # product of the Martin normalizers so the rate matches the grid
        rate = 0.0
        if kill_code == KILL_GFIELD:
            rate = 4.0 * _eval_gfun(kg_code, kg_p0, kg_rg, kg_rv, x, center, d)
        elif kill_code == KILL_PAIR_OVER_GRID:
            k1 = _martin_raw(x, pole, center, R_exit, d)
            k2 = _martin_raw(x, pole2, center, R_exit, d)
            tt, rho = _axial_coords(x, center, axial_axis, d)
            v = _axial_eval(axial_tg, axial_pg, axial_V, tt, rho)
            if v < 1.0e-300:
                v = 1.0e-300
            rate = 4.0 * kg_p0 * k1 * k2 / v
        death_time = -1.0
        if rate > 0.0:
            state, e = rand_exp(state, inc)
            if e < rate * h:
                death_time = e / rate
        h_eff = h if death_time < 0.0 else death_time
        # seed draws (poisson over the effective step time)
        if inside_mark and seed_rate > 0.0:
            lam = seed_rate * h_eff
            state, uu = u01(state, inc)
            acc = np.exp(-lam)
            prod = acc
            k = 0
            while uu > prod and k < 64:
                k += 1
                acc *= lam / k
                prod += acc
            for _s in range(k):
                if nseeds < seed_cap:
                    for j in range(d):
                        seeds_buf[nseeds, j] = x[j]
                    nseeds += 1
        # gweight accumulation
        if gweight_code != GF_NONE:
            wlog += 4.0 * _eval_gfun(gweight_code, gw_p0, gw_rg, gw_rv, x, center, d) * h_eff
        if inside_mark:
            exposure += h_eff
        if death_time >= 0.0:
            # interior death: diffuse for death_time without boundary handling
            sq = np.sqrt(death_time)
            for j in range(d):
                state, g = randn(state, inc)
                x[j] += mu[j] * death_time + sq * g
            rr = np.sqrt(_norm2_centered(x, center, d))
            if rr >= R_exit:
                # measure-O(dt) event: clamp the death point just inside
                for j in range(d):
                    x[j] = center[j] + (x[j] - center[j]) * ((R_exit - 1.0e-9) / rr)
            t += death_time
            status = STATUS_OK
            term_kind = TERM_DEATH
            if record_path != 0 and npts < path_buf.shape[0]:
                path_buf[npts, 0] = t
                for j in range(d):
                    path_buf[npts, 1 + j] = x[j]
                npts += 1
            break
        state, st, tau = _move_step(state, inc, x, center, R_exit, d, h, bdry_tol, mu, scratch)
        t += tau
        if record_path != 0 and npts < path_buf.shape[0]:
            path_buf[npts, 0] = t
            for j in range(d):
                path_buf[npts, 1 + j] = x[j]
            npts += 1
        if R_mark > 0.0 and not crossed:
            rr = np.sqrt(_norm2_centered(x, center, d))
            if rr >= R_mark:
                crossed = True
                cross_t = t
                for j in range(d):
                    out_vec[11 + j] = center[j] + (x[j] - center[j]) * (R_mark / rr)
        if st == 1:
            status = STATUS_OK
            term_kind = TERM_EXIT
            break
    out_vec[0] = float(status)
    out_vec[1] = float(term_kind)
    out_vec[2] = t
    for j in range(d):
        out_vec[3 + j] = x[j]
    out_vec[9] = 1.0 if crossed else 0.0
    out_vec[10] = cross_t
    out_vec[17] = exposure
    out_vec[18] = float(nseeds)
    out_vec[19] = wlog
    out_vec[20] = float(npts)


# ---------------------------------------------------------------------------
# Feynman-Kac path batches

@njit(cache=True, fastmath=True)
def fk_exit_batch(
    master, tag,
    d, center, R,
    starts,            # (ns, d)
    reps_per_start,
    dt, bdry_tol, max_steps,
    w_rg, w_rv,        # radial rate table: weight exp(-int 4 w)
    out_pos,           # (ns*reps, d) exit positions
    out_w,             # (ns*reps,) FK weights
    out_ok,            # (ns*reps,) 1 if exited within max_steps
):
    ns = starts.shape[0]
    x = np.empty(6)
    scratch = np.empty(6)
    for si in range(ns):
        for rep in range(reps_per_start):
            rid = si * reps_per_start + rep
            state, inc = stream(master, tag, rid)
            for j in range(d):
                x[j] = starts[si, j]
            wlog = 0.0
            ok = 0
            for _step in range(max_steps):
                r = np.sqrt(_norm2_centered(x, center, d))
                wrate = 4.0 * _radial_interp(w_rg, w_rv, r)
                state, st, tau = _move_step0(state, inc, x, center, R, d, dt, bdry_tol, scratch)
                wlog += wrate * tau
                if st == 1:
                    ok = 1
                    break
            for j in range(d):
                out_pos[rid, j] = x[j]
            out_w[rid] = np.exp(-wlog)
            out_ok[rid] = ok


@njit(cache=True, fastmath=True)
def fk_outer(
    master, tag,
    reps,
    d, center, R,
    x0,
    dt, bdry_tol, max_steps,
    w_rg, w_rv,
    # F field on an axial grid; F2(t, rho) = F1(-t, rho) when mirror != 0
    axis, tg, pg, F, mirror,
    use_pair,          # accumulate 4 int W F1 F2 dt
    # terminal field: axial grid V (n = 2) or Martin pole (n = 1)
    term_is_grid, Vt_g, Vp_g, V_g, pole, pole_invnorm,
    out_term,          # (reps,)
    out_integral,      # (reps,)
    out_ok,            # (reps,)
):
    x = np.empty(6)
    scratch = np.empty(6)
    for rep in range(reps):
        state, inc = stream(master, tag, rep)
        for j in range(d):
            x[j] = x0[j]
        W = 1.0
        acc = 0.0
        ok = 0
        for _step in range(max_steps):
            r = np.sqrt(_norm2_centered(x, center, d))
            wrate = 4.0 * _radial_interp(w_rg, w_rv, r)
            if use_pair != 0:
                tt, rho = _axial_coords(x, center, axis, d)
                f1 = _axial_eval(tg, pg, F, tt, rho)
                f2 = _axial_eval(tg, pg, F, -tt, rho) if mirror != 0 else f1
            else:
                f1 = 0.0
                f2 = 0.0
            state, st, tau = _move_step0(state, inc, x, center, R, d, dt, bdry_tol, scratch)
            if use_pair != 0:
                acc += W * f1 * f2 * tau
            W *= np.exp(-wrate * tau)
            if st == 1:
                ok = 1
                break
        term = 0.0
        if ok == 1:
            if term_is_grid != 0:
                tt, rho = _axial_coords(x, center, axis, d)
                term = _axial_eval(tg, pg, V_g, tt, rho)
            else:
                term = _martin_raw(x, pole, center, R, d) * pole_invnorm
        out_term[rep] = term * W
        out_integral[rep] = 4.0 * acc
        out_ok[rep] = ok


# ---------------------------------------------------------------------------
# killed-path occupation records for generic potential estimation
# (positions visited, FK survival weight, and step time, flattened)

# ---------------------------------------------------------------------------
# deterministic quadrature for the axially symmetric pair potential in d = 4:
#   V(y) = 4 * integral over the ball of K1(w) K2(w) G(y, w) dw
# with antipodal poles on the symmetry axis. The transverse S^2 average of
# both Green-function terms is closed form (the dot product of a uniform
# S^2 direction with a fixed unit vector is uniform on [-1, 1]).

@njit(inline="always", cache=True, fastmath=True)
def _ring_avg_inv2(a, b):
    # average over s' in [-1, 1] of 1 / (a - b s'), a > |b| >= 0
    if b < 1.0e-14 * a:
        return 1.0 / a
    return np.log((a + b) / (a - b)) / (2.0 * b)


@njit(inline="always", cache=True, fastmath=True)
def _pair_green_axial_d4(R, t, p, s, q):
    # S^2-averaged G(y, w) for y = (t, p), w-ring = (s, q), ball radius R
    a = (t - s) * (t - s) + p * p + q * q
    b = 2.0 * p * q
    direct = _ring_avg_inv2(a, b)
    y2 = t * t + p * p
    if y2 < 1.0e-20 * R * R:
        image = 1.0 / (R * R)
    else:
        scale = R * R / y2
        ts, ps = t * scale, p * scale
        a2 = (ts - s) * (ts - s) + ps * ps + q * q
        b2 = 2.0 * ps * q
        image = scale * _ring_avg_inv2(a2, b2)
    k4 = 1.0 / (2.0 * np.pi * np.pi)
    return k4 * (direct - image)


@njit(inline="always", cache=True, fastmath=True)
def _pair_f_axial_d4(R, s, q, invn1, invn2):
    # K1 K2 at the ring (s, q) for antipodal poles (+-R, 0), d = 4
    w2 = s * s + q * q
    if w2 >= R * R:
        return 0.0
    surf = R * R - w2
    d1 = (s - R) * (s - R) + q * q
    d2 = (s + R) * (s + R) + q * q
    return invn1 * invn2 * surf * surf / (d1 * d1 * d2 * d2)


@njit(cache=True, fastmath=True)
def pair_potential_axial_d4(
    R,
    invn1, invn2,
    nodes_t, nodes_p,   # evaluation coordinates, |y| < R
    ns, nq,             # base quadrature grid
    refine,             # subdivision factor near singular points
    out,                # (n_nodes,)
):
    hs = 2.0 * R / ns
    hq = R / nq
    four_pi = 4.0 * np.pi
    for ni in range(nodes_t.shape[0]):
        t = nodes_t[ni]
        p = nodes_p[ni]
        total = 0.0
        for i in range(ns):
            s0 = -R + i * hs
            sc = s0 + 0.5 * hs
            for j in range(nq):
                q0 = j * hq
                qc = q0 + 0.5 * hq
                if sc * sc + qc * qc >= R * R:
                    continue
                # near the evaluation point or the poles: subdivide
                dsing = (sc - t) * (sc - t) + (qc - p) * (qc - p)
                dp1 = (sc - R) * (sc - R) + qc * qc
                dp2 = (sc + R) * (sc + R) + qc * qc
                lim = 9.0 * (hs * hs + hq * hq)
                if dsing < lim or dp1 < lim or dp2 < lim:
                    sub = refine
                else:
                    sub = 1
                hss = hs / sub
                hqq = hq / sub
                for ii in range(sub):
                    for jj in range(sub):
                        s = s0 + (ii + 0.5) * hss
                        q = q0 + (jj + 0.5) * hqq
                        if s * s + q * q >= R * R:
                            continue
                        f = _pair_f_axial_d4(R, s, q, invn1, invn2)
                        if f == 0.0:
                            continue
                        g = _pair_green_axial_d4(R, t, p, s, q)
                        if g > 0.0:
                            total += f * g * q * q * hss * hqq
        out[ni] = 4.0 * four_pi * total


@njit(cache=True, fastmath=True)
def killed_occupation(
    master, tag,
    reps,
    d, center, R,
    x0,
    dt, bdry_tol, max_steps,
    g_code, g_p0, g_rg, g_rv,
    out_pos,      # (cap, d)
    out_w,        # (cap,)  weight * step-time, ready to multiply f
    out_path,     # (cap,) path index
    out_used,     # (1,) number of records written
    out_ok,       # (reps,)
):
    x = np.empty(6)
    scratch = np.empty(6)
    cap = out_pos.shape[0]
    used = 0
    for rep in range(reps):
        state, inc = stream(master, tag, rep)
        for j in range(d):
            x[j] = x0[j]
        wlog = 0.0
        ok = 0
        for _step in range(max_steps):
            g = _eval_gfun(g_code, g_p0, g_rg, g_rv, x, center, d)
            # trapezoid-in-time would need the end point; midpoint at the
            # step start is O(dt) accurate which matches the step scheme
            if used < cap:
                for j in range(d):
                    out_pos[used, j] = x[j]
                out_path[used] = rep
            state, st, tau = _move_step0(state, inc, x, center, R, d, dt, bdry_tol, scratch)
            if used < cap:
                out_w[used] = np.exp(-wlog) * tau
                used += 1
            wlog += 4.0 * g * tau
            if st == 1:
                ok = 1
                break
        out_ok[rep] = ok
    out_used[0] = used
