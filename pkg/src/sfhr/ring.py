"""Exact arithmetic in T_q[X]/Phi_M(X) for prime-power M = t**alpha.

Coefficient vectors are numpy uint64 numerators mod q = 2**53.  Because
2**53 divides 2**64, uint64 wraparound is a ring homomorphism onto Z_q, so
every add/multiply below is exact; canonical form just masks to 53 bits.

Phi_M(X) = sum_{j=0}^{t-1} X^(j*n1) with n1 = t**(alpha-1), so
X^N = -(1 + X^n1 + ... + X^((t-2)*n1)) and any representative of degree
< M folds to degree < N in a single pass.
"""

from __future__ import annotations

import math

import numpy as np

from .params import Q_MASK, RingParams

_UNIT_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _mask(vec: np.ndarray) -> np.ndarray:
    if vec.dtype == np.uint64:
        vec &= np.uint64(Q_MASK)  # in place: callers pass freshly built arrays
    return vec  # exact integer oracles keep signed/object dtype


def fold_once(vec_m: np.ndarray, params: RingParams) -> np.ndarray:
    """Reduce a length-M coefficient vector mod Phi_M to length N.

    Degrees N..M-1 satisfy X^(N+r) = -sum_j X^(r + j*n1); all folded
    positions land below N, so one pass suffices for inputs of degree < M.
    """
    N, n1, t = params.N, params.n1, params.t
    out = vec_m[:N].copy()
    tail = vec_m[N:]
    for j in range(t - 1):
        out[j * n1:j * n1 + n1] -= tail
    return _mask(out)


def cyclotomic_reduce(raw: np.ndarray, params: RingParams) -> np.ndarray:
    """Canonical representative mod Phi_M for any input of length < 2M."""
    M, N = params.M, params.N
    raw = np.asarray(raw)
    if raw.shape[-1] >= 2 * M:
        raise ValueError("cyclotomic_reduce expects degree < 2M-1")
    if raw.shape[-1] <= N:
        out = np.zeros(raw.shape[:-1] + (N,), dtype=raw.dtype)
        out[..., :raw.shape[-1]] = raw
        return _mask(out)
    buf = np.zeros(raw.shape[:-1] + (M,), dtype=raw.dtype)
    head = min(raw.shape[-1], M)
    buf[..., :head] = raw[..., :head]
    if raw.shape[-1] > M:
        buf[..., :raw.shape[-1] - M] += raw[..., M:]  # X^M = 1 mod Phi_M
    return fold_once(buf, params) if buf.ndim == 1 else _fold_batch(buf, params)


def _fold_batch(buf: np.ndarray, params: RingParams) -> np.ndarray:
    N, n1, t = params.N, params.n1, params.t
    out = buf[..., :N].copy()
    tail = buf[..., N:]
    for j in range(t - 1):
        out[..., j * n1:j * n1 + n1] -= tail
    return _mask(out)


def embed(vec_n: np.ndarray, params: RingParams) -> np.ndarray:
    """Zero-pad a reduced vector to length M (for index-mapped ops)."""
    out = np.zeros(vec_n.shape[:-1] + (params.M,), dtype=vec_n.dtype)
    out[..., :params.N] = vec_n
    return out


def monomial_mul(vec_n: np.ndarray, e: int, params: RingParams) -> np.ndarray:
    """vec * X^e mod Phi_M, exact."""
    M = params.M
    e %= M
    buf = np.zeros(vec_n.shape[:-1] + (M,), dtype=vec_n.dtype)
    idx = (np.arange(params.N) + e) % M
    buf[..., idx] = vec_n
    return _fold_batch(buf, params)


def automorphism(vec_n: np.ndarray, d: int, params: RingParams) -> np.ndarray:
    """P(X) -> P(X^d) mod Phi_M, for gcd(d, M) = 1."""
    if math.gcd(d, params.M) != 1:
        raise ValueError(f"automorphism index {d} not coprime with M={params.M}")
    M = params.M
    idx = (np.arange(params.N) * (d % M)) % M
    buf = np.zeros(vec_n.shape[:-1] + (M,), dtype=vec_n.dtype)
    buf[..., idx] = vec_n
    return _fold_batch(buf, params)


_AUTO_TABLES: dict[tuple[int, int, int], tuple] = {}


def automorphism_tables(d: int, params: RingParams):
    """Gather tables realizing automorphism-then-fold as two masked gathers.

    out[k] = vec[g1[k]]*m1[k] - vec[g2[k]]*m2[k], exploiting that the fold
    of a scattered permutation touches each output at most twice.
    """
    key = (params.t, params.alpha, d % params.M)
    if key not in _AUTO_TABLES:
        M, N, n1 = params.M, params.N, params.n1
        inv = np.full(M, -1, dtype=np.int64)
        pos = (np.arange(N) * (d % M)) % M
        inv[pos] = np.arange(N)
        k = np.arange(N)
        src1 = inv[k]
        src2 = inv[N + (k % n1)]
        g1 = np.where(src1 >= 0, src1, 0)
        m1 = (src1 >= 0).astype(np.uint64)
        g2 = np.where(src2 >= 0, src2, 0)
        m2 = (src2 >= 0).astype(np.uint64)
        _AUTO_TABLES[key] = (g1, m1, g2, m2)
    return _AUTO_TABLES[key]


def automorphism_u64(vecs: np.ndarray, d: int, params: RingParams) -> np.ndarray:
    """Table-based automorphism for uint64 batches (..., N)."""
    g1, m1, g2, m2 = automorphism_tables(d, params)
    out = vecs[..., g1] * m1
    out -= vecs[..., g2] * m2
    out &= np.uint64(Q_MASK)
    return out


def sparse_int_mul(vec_n: np.ndarray, terms, params: RingParams) -> np.ndarray:
    """vec * sum_k c_k X^(e_k) mod Phi_M for integer sparse terms [(e, c)]."""
    acc = None
    for e, c in terms:
        piece = monomial_mul(vec_n, e, params)
        if vec_n.dtype == np.uint64:
            piece = piece * np.uint64(c % (1 << 64))
        else:
            piece = piece * c
        acc = piece if acc is None else acc + piece
    if acc is None:
        return np.zeros(vec_n.shape[:-1] + (params.N,), dtype=vec_n.dtype)
    return _mask(acc)


def poly_mul(vec_n: np.ndarray, int_poly: np.ndarray, params: RingParams) -> np.ndarray:
    """Full product with an integer polynomial, schoolbook then reduce.

    The multiplier must be integral; that is exactly the condition under
    which plaintext multiplication commutes with encryption.
    """
    int_poly = np.asarray(int_poly)
    if int_poly.dtype.kind == "f":
        if not np.all(int_poly == np.round(int_poly)):
            raise ValueError("plaintext multiplier must have integer coefficients")
        int_poly = int_poly.astype(np.int64)
    if vec_n.dtype == np.uint64:
        mult = int_poly.astype(np.int64).astype(np.uint64)
    else:
        mult = int_poly
    conv = np.convolve(vec_n, mult)
    return cyclotomic_reduce(conv, params)


def units_mod_m(params: RingParams) -> np.ndarray:
    key = (params.t, params.alpha)
    if key not in _UNIT_CACHE:
        _UNIT_CACHE[key] = np.array(params.units(), dtype=np.int64)
    return _UNIT_CACHE[key]


def trace_direct(vec_n: np.ndarray, params: RingParams) -> np.ndarray:
    """Tr(P) = sum over all units d mod M of P(X^d), reduced mod Phi_M."""
    acc = None
    for d in units_mod_m(params):
        piece = automorphism(vec_n, int(d), params)
        acc = piece if acc is None else acc + piece
    return _mask(acc)


def stage_exponents(level: int, params: RingParams) -> list[int]:
    """Substitution exponents of the tower stage K_level -> K_(level-1).

    Level 1 -> 0 uses d in {1, ..., t-1}; level j -> j-1 for j >= 2 uses
    d = 1 + i*t^(j-1), i in {0, ..., t-1}.  Composing all stages alpha..1
    enumerates every unit mod M exactly once.
    """
    t = params.t
    if level == 1:
        return list(range(1, t))
    step = params.t ** (level - 1)
    return [(1 + i * step) % params.M for i in range(t)]


def partial_trace_direct(vec_n: np.ndarray, from_level: int, to_level: int,
                         params: RingParams) -> np.ndarray:
    """Composition of per-level partial traces along the tower.

    from_level == to_level is the identity; the full tower alpha -> 0
    equals trace_direct coefficient-exactly.
    """
    if not (0 <= to_level <= from_level <= params.alpha):
        raise ValueError(f"invalid tower levels {from_level} -> {to_level}")
    cur = vec_n
    for level in range(from_level, to_level, -1):
        acc = None
        for d in stage_exponents(level, params):
            piece = automorphism(cur, d, params)
            acc = piece if acc is None else acc + piece
        cur = _mask(acc)
    return cur


def coeff_int_poly(vec_n: np.ndarray, params: RingParams) -> np.ndarray:
    """Interpret torus numerators as centered integers (exact, for oracles)."""
    v = vec_n.astype(object)
    half = 1 << 52
    return np.where(v > half, v - (1 << 53), v)
