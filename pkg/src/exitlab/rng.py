"""Counter-based random streams for reproducible parallel Monte Carlo.

Every replica owns a PCG32 stream derived from ``(master_seed, stream_tag,
replica_id)`` via splitmix64 mixing.  Results are therefore independent of
how replicas are scheduled across workers, which is what makes byte-identical
reruns possible.

The numba-side helpers (``pcg_next``, ``u01``, ``randn``, ``rand_exp``) are
``inline='always'`` device functions meant to be called from jitted kernels;
the module also exposes thin Python wrappers used by tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit, uint32, uint64

_U64 = uint64(0xFFFFFFFFFFFFFFFF)
_PCG_MULT = uint64(6364136223846793005)


@njit(inline="always", cache=True)
def _splitmix64(z):
    z = (z + uint64(0x9E3779B97F4A7C15)) & _U64
    z = ((z ^ (z >> uint64(30))) * uint64(0xBF58476D1CE4E5B9)) & _U64
    z = ((z ^ (z >> uint64(27))) * uint64(0x94D049BB133111EB)) & _U64
    return z ^ (z >> uint64(31))


@njit(inline="always", cache=True)
def pcg_next(state, inc):
    """Advance one PCG32 step; returns (new_state, 32-bit output)."""
    old = state
    state = (old * _PCG_MULT + inc) & _U64
    xorshifted = uint64(((old >> uint64(18)) ^ old) >> uint64(27)) & uint64(0xFFFFFFFF)
    rot = old >> uint64(59)
    out = ((xorshifted >> rot) | (xorshifted << ((-rot) & uint64(31)))) & uint64(0xFFFFFFFF)
    return state, out


@njit(inline="always", cache=True)
def stream(master_seed, tag, replica):
    """Seed an independent PCG32 stream for one replica of one estimator."""
    s0 = _splitmix64(uint64(master_seed) ^ _splitmix64(uint64(replica) * uint64(2654435761) + uint64(1)))
    s1 = _splitmix64(s0 ^ _splitmix64(uint64(tag) * uint64(0x9E3779B97F4A7C15) + uint64(3)))
    inc = (s1 << uint64(1)) | uint64(1)
    state = uint64(0)
    state, _ = pcg_next(state, inc)
    state = (state + s0) & _U64
    state, _ = pcg_next(state, inc)
    return state, inc


@njit(inline="always", cache=True)
def u01(state, inc):
    """Uniform in (0, 1) at 32-bit resolution (never returns an endpoint)."""
    state, o = pcg_next(state, inc)
    return state, (np.float64(o) + 0.5) * 2.3283064365386963e-10


@njit(inline="always", cache=True)
def rand_exp(state, inc):
    state, u = u01(state, inc)
    return state, -np.log(u)


def _ziggurat_tables():
    # 128-layer Marsaglia-Tsang construction; magnitudes use 31 bits, the
    # low 7 of which double as the layer index.
    m1 = 2147483648.0
    r = 3.442619855899
    v = 9.91256303526217e-3
    kn = np.zeros(128, dtype=np.uint32)
    wn = np.zeros(128)
    fn = np.zeros(128)
    q = v / np.exp(-0.5 * r * r)
    kn[0] = np.uint32((r / q) * m1)
    kn[1] = 0
    wn[0] = q / m1
    wn[127] = r / m1
    fn[0] = 1.0
    fn[127] = np.exp(-0.5 * r * r)
    tn = r
    for i in range(126, 0, -1):
        dn = np.sqrt(-2.0 * np.log(v / tn + np.exp(-0.5 * tn * tn)))
        kn[i + 1] = np.uint32((dn / tn) * m1)
        tn = dn
        fn[i] = np.exp(-0.5 * dn * dn)
        wn[i] = dn / m1
    return kn, wn, fn


_ZK, _ZW, _ZF = _ziggurat_tables()
_ZR = 3.442619855899


@njit(inline="always", cache=True)
def randn(state, inc):
    """Standard normal via the 128-layer ziggurat."""
    while True:
        state, u = pcg_next(state, inc)
        iz = np.int64(u & uint32(127))
        mag = np.int64(u & uint32(0x7FFFFFFF))
        neg = (u & uint32(0x80000000)) != uint32(0)
        x = mag * _ZW[iz]
        if mag < _ZK[iz]:
            return state, -x if neg else x
        if iz == 0:
            while True:
                state, u1 = u01(state, inc)
                state, u2 = u01(state, inc)
                xt = -np.log(u1) / _ZR
                yt = -np.log(u2)
                if yt + yt > xt * xt:
                    xr = _ZR + xt
                    return state, -xr if neg else xr
        else:
            state, uw = u01(state, inc)
            if _ZF[iz] + uw * (_ZF[iz - 1] - _ZF[iz]) < np.exp(-0.5 * x * x):
                return state, -x if neg else x


# ---------------------------------------------------------------------------
# Python-facing wrappers (tests, light sampling)


@njit(cache=True)
def _fill_u01(master, tag, replica, out):
    state, inc = stream(master, tag, replica)
    for i in range(out.size):
        state, out[i] = u01(state, inc)


@njit(cache=True)
def _fill_randn(master, tag, replica, out):
    state, inc = stream(master, tag, replica)
    for i in range(out.size):
        state, out[i] = randn(state, inc)


def uniforms(master_seed: int, tag: int, replica: int, n: int) -> np.ndarray:
    out = np.empty(n)
    _fill_u01(master_seed, tag, replica, out)
    return out


def normals(master_seed: int, tag: int, replica: int, n: int) -> np.ndarray:
    out = np.empty(n)
    _fill_randn(master_seed, tag, replica, out)
    return out
