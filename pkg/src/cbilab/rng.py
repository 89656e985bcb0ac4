"""Counter-free per-path random streams usable from compiled kernels.

Each path owns several independent xoshiro256** streams.  The 256-bit state of
a stream is expanded with splitmix64 from a child seed, which is itself a
64-bit avalanche mix of ``(master_seed, path_index, stream_tag)``.  Both members
of a coupled pair read the same streams, which is what makes the coupling exact.
"""

import math

import numpy as np
from numba import njit, uint64

# stream tags
GAUSS = 1
BRANCH = 2
IMMIG = 3
ENV = 4

_GOLDEN = uint64(0x9E3779B97F4A7C15)
_M1 = uint64(0xBF58476D1CE4E5B9)
_M2 = uint64(0x94D049BB133111EB)
_TWO_M53 = 1.0 / 9007199254740992.0


@njit(cache=True, nogil=True)
def mix64(z):
    """splitmix64 finaliser: a bijective avalanche on 64-bit words."""
    z = uint64(z)
    z = (z ^ (z >> uint64(30))) * _M1
    z = (z ^ (z >> uint64(27))) * _M2
    return z ^ (z >> uint64(31))


@njit(cache=True, nogil=True)
def child_seed(master_seed, path_index, tag):
    h = mix64(uint64(master_seed) + _GOLDEN)
    h = mix64(h ^ (uint64(path_index) + _GOLDEN))
    return mix64(h ^ (uint64(tag) * _GOLDEN))


@njit(cache=True, nogil=True)
def seed_stream(state, master_seed, path_index, tag):
    """Fill the 4-word ``state`` for one stream."""
    s = child_seed(master_seed, path_index, tag)
    for i in range(4):
        s = s + _GOLDEN
        state[i] = mix64(s)


@njit(cache=True, nogil=True)
def _rotl(x, k):
    return (x << uint64(k)) | (x >> uint64(64 - k))


@njit(cache=True, nogil=True)
def next_u64(state):
    result = _rotl(state[1] * uint64(5), 7) * uint64(9)
    t = state[1] << uint64(17)
    state[2] ^= state[0]
    state[3] ^= state[1]
    state[1] ^= state[2]
    state[0] ^= state[3]
    state[2] ^= t
    state[3] = _rotl(state[3], 45)
    return result


@njit(cache=True, nogil=True)
def uniform(state):
    """Uniform on the open interval (0, 1)."""
    return (float(next_u64(state) >> uint64(11)) + 0.5) * _TWO_M53


@njit(cache=True, nogil=True)
def normal(state):
    """Standard normal by Box–Muller (one variate per call, no caching)."""
    u1 = uniform(state)
    u2 = uniform(state)
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@njit(cache=True, nogil=True)
def exponential(state):
    return -math.log(uniform(state))


@njit(cache=True, nogil=True)
def gamma(state, shape):
    """Marsaglia–Tsang gamma variate with unit scale."""
    if shape < 1.0:
        return gamma(state, shape + 1.0) * uniform(state) ** (1.0 / shape)
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = normal(state)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = uniform(state)
        if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
            return d * v


@njit(cache=True, nogil=True)
def norm_ppf(p):
    """Acklam's rational approximation to the standard normal quantile."""
    a = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
         1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
    b = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
         6.680131188771972e01, -1.328068155288572e01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
         -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
         3.754408661907416e00)
    plow = 0.02425
    if p < plow:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    if p > 1.0 - plow:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) / (
            (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
        )
    q = p - 0.5
    r = q * q
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q / (
        ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    )


@njit(cache=True, nogil=True)
def poisson_inv(u, mu):
    """Poisson quantile ``min{k : F(k; mu) >= u}``; nondecreasing in ``mu`` for fixed ``u``."""
    if mu <= 0.0:
        return 0
    if mu > 500.0:
        k = math.floor(mu + math.sqrt(mu) * norm_ppf(u) + 0.5)
        return int(k) if k > 0 else 0
    p = math.exp(-mu)
    cdf = p
    k = 0
    while u > cdf and k < 100000:
        k += 1
        p *= mu / k
        cdf += p
        if p == 0.0 and k > mu:
            break
    return k


def new_state():
    return np.zeros(4, dtype=np.uint64)


def make_stream(master_seed, path_index, tag):
    """Python-side helper returning a seeded state array."""
    st = new_state()
    seed_stream(st, np.uint64(master_seed), np.uint64(path_index), np.uint64(tag))
    return st
