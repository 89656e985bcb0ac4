"""Compiled Euler step loops.

One call simulates a block of paths.  For every path, ``K`` ensemble members
(different initial states) are advanced in lockstep from the same random
draws.  Jump counts come from a Poisson quantile of one shared uniform, so a
member with a smaller rate accepts a prefix of the marks the other accepts.
"""

import math

import numpy as np
from numba import njit, uint64

from . import rng

# layout of the packed parameter vector
P_BETA = 0
P_B = 1
P_C1 = 2
P_ALPHA = 3
P_C2 = 4
P_DELTA = 5
P_S2 = 6
P_COMP = 7
P_MB = 8
P_IMM_DRIFT = 9
P_MI = 10
P_ENV = 11
P_ENV_DRIFT = 12
P_SIGMA_E = 13
P_ME = 14
P_TABLE = 15
P_XI_DRIFT = 16
N_PAR = 17

# mark distribution kinds
MARK_NONE = 0
MARK_ATOMS = 1
MARK_POWER = 2
MARK_TEMPERED = 3

OVERFLOW = 1e300


@njit(cache=True, nogil=True)
def _power_inv(u, p, lo, hi):
    q = p + 1.0
    if q == 0.0:
        return lo * math.exp(u * math.log(hi / lo))
    a = lo**q
    if math.isinf(hi):
        b = 0.0
    else:
        b = hi**q
    return (a + u * (b - a)) ** (1.0 / q)


@njit(cache=True, nogil=True)
def sample_mark(st, kind, par, zs, cdf):
    if kind == MARK_ATOMS:
        u = rng.uniform(st)
        i = np.searchsorted(cdf, u)
        if i >= zs.size:
            i = zs.size - 1
        return zs[i]
    if kind == MARK_POWER:
        return _power_inv(rng.uniform(st), par[0], par[1], par[2])
    # tempered: par = (p, theta, lo, hi)
    p, theta, lo, hi = par[0], par[1], par[2], par[3]
    while True:
        if p > -1.0:
            z = rng.gamma(st, p + 1.0) / theta
            if z > lo and z <= hi:
                return z
        elif not math.isinf(hi) or p < -1.0:
            z = _power_inv(rng.uniform(st), p, lo, hi)
            if rng.uniform(st) < math.exp(-theta * (z - lo)):
                return z
        else:
            z = lo + rng.exponential(st) / theta
            if rng.uniform(st) < lo / z:
                return z


@njit(cache=True, nogil=True)
def gamma0(x, par, tx, ty):
    if par[P_TABLE] == 0.0:
        return par[P_BETA] - par[P_B] * x
    n = tx.size
    if x <= tx[0]:
        i = 0
    elif x >= tx[n - 1]:
        i = n - 2
    else:
        i = np.searchsorted(tx, x) - 1
    slope = (ty[i + 1] - ty[i]) / (tx[i + 1] - tx[i])
    return ty[i] + slope * (x - tx[i])


@njit(cache=True, nogil=True)
def _pow(x, e):
    if x <= 0.0:
        return 0.0
    if e == 1.0:
        return x
    return x**e


@njit(cache=True, nogil=True)
def env_increment(st, par, dt, sqdt, ez, ecdf):
    """Return ``(dZ, dxi, g)`` for one step of the environment."""
    g = rng.normal(st)
    dz = par[P_ENV_DRIFT] * dt + par[P_SIGMA_E] * sqdt * g
    dxi = par[P_XI_DRIFT] * dt + par[P_SIGMA_E] * sqdt * g
    if par[P_ME] > 0.0:
        n = rng.poisson_inv(rng.uniform(st), par[P_ME] * dt)
        for _ in range(n):
            u = rng.uniform(st)
            i = np.searchsorted(ecdf, u)
            if i >= ez.size:
                i = ez.size - 1
            z = ez[i]
            dz += math.expm1(z)
            dxi += z
    return dz, dxi, g


@njit(cache=True, nogil=True)
def simulate_block(
    path_ids, master_seed, x0s, dt, n_steps, rec_idx,
    par, tx, ty,
    bk, bpar, bz, bcdf,
    ik, ipar, iz, icdf,
    ez, ecdf,
    out, mart, fail_step, digest,
):
    n_paths = path_ids.size
    K = x0s.size
    R = rec_idx.size
    sqdt = math.sqrt(dt)
    st_g = np.zeros(4, dtype=np.uint64)
    st_b = np.zeros(4, dtype=np.uint64)
    st_i = np.zeros(4, dtype=np.uint64)
    st_e = np.zeros(4, dtype=np.uint64)
    x = np.empty(K)
    m = np.empty(K)
    counts = np.empty(K, dtype=np.int64)
    csum = np.zeros(64)
    ms = uint64(master_seed)
    env_on = par[P_ENV] != 0.0
    for p in range(n_paths):
        pid = uint64(path_ids[p])
        rng.seed_stream(st_g, ms, pid, rng.GAUSS)
        rng.seed_stream(st_b, ms, pid, rng.BRANCH)
        rng.seed_stream(st_i, ms, pid, rng.IMMIG)
        rng.seed_stream(st_e, ms, pid, rng.ENV)
        for k in range(K):
            x[k] = x0s[k]
            m[k] = 0.0
            fail_step[p, k] = -1
            digest[p, k] = 0.0
        r = 0
        while r < R and rec_idx[r] == 0:
            for k in range(K):
                out[p, k, r] = x[k]
                mart[p, k, r] = 0.0
            r += 1
        for step in range(1, n_steps + 1):
            g = rng.normal(st_g)
            noise = g
            # branching: one shared uniform decides every member's count
            nmax = 0
            if par[P_MB] > 0.0:
                ub = rng.uniform(st_b)
                noise += ub
                for k in range(K):
                    if math.isnan(x[k]):
                        counts[k] = 0
                        continue
                    rate = par[P_MB] * par[P_C2] * _pow(x[k], par[P_DELTA]) * dt
                    counts[k] = rng.poisson_inv(ub, rate)
                    if counts[k] > nmax:
                        nmax = counts[k]
                if nmax + 1 > csum.size:
                    csum = np.zeros(2 * (nmax + 1))
                for j in range(nmax):
                    csum[j + 1] = csum[j] + sample_mark(st_b, bk, bpar, bz, bcdf)
            # immigration: state independent
            jump_i = 0.0
            if par[P_MI] > 0.0:
                ui = rng.uniform(st_i)
                noise += ui
                ni = rng.poisson_inv(ui, par[P_MI] * dt)
                for _ in range(ni):
                    jump_i += sample_mark(st_i, ik, ipar, iz, icdf)
            dZ = 0.0
            if env_on:
                dZ, _dxi, ge = env_increment(st_e, par, dt, sqdt, ez, ecdf)
                noise += ge
            for k in range(K):
                xk = x[k]
                if math.isnan(xk):
                    continue
                g2 = par[P_C2] * _pow(xk, par[P_DELTA])
                var = par[P_C1] * _pow(xk, par[P_ALPHA]) + par[P_S2] * g2
                dw = math.sqrt(var * dt) * g
                dj = -par[P_COMP] * g2 * dt
                if par[P_MB] > 0.0:
                    dj += csum[counts[k]]
                drift = gamma0(xk, par, tx, ty) + par[P_IMM_DRIFT]
                xn = xk + drift * dt + dw + dj + jump_i
                m[k] += dw + dj
                if xn < 0.0:
                    xn = 0.0
                if env_on:
                    f = 1.0 + dZ
                    if f < 1e-12:
                        f = 1e-12
                    xn *= f
                if not (xn <= OVERFLOW):
                    xn = math.nan
                    fail_step[p, k] = step
                x[k] = xn
                digest[p, k] += noise
            while r < R and rec_idx[r] == step:
                for k in range(K):
                    out[p, k, r] = x[k]
                    mart[p, k, r] = m[k]
                r += 1


@njit(cache=True, nogil=True)
def environment_block(path_ids, master_seed, dt, n_steps, rec_idx, par, ez, ecdf, xi_out, z_out):
    """Environment paths ``ξ`` and ``Z`` from the same stream the CBIRE kernel uses."""
    sqdt = math.sqrt(dt)
    st = np.zeros(4, dtype=np.uint64)
    R = rec_idx.size
    ms = uint64(master_seed)
    for p in range(path_ids.size):
        rng.seed_stream(st, ms, uint64(path_ids[p]), rng.ENV)
        xi = 0.0
        z = 0.0
        r = 0
        while r < R and rec_idx[r] == 0:
            xi_out[p, r] = 0.0
            z_out[p, r] = 0.0
            r += 1
        for step in range(1, n_steps + 1):
            dz, dxi, _g = env_increment(st, par, dt, sqdt, ez, ecdf)
            z += dz
            xi += dxi
            while r < R and rec_idx[r] == step:
                xi_out[p, r] = xi
                z_out[p, r] = z
                r += 1
