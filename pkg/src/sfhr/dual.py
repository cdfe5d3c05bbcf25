"""Trace-dual basis of the power basis in Q(zeta_M), M = t**alpha.

The stored objects are the conjugated duals scaled by M, i.e. integer
polynomials B_i = M * conj(dual_i) satisfying Tr(X^j * B_i) = M * delta_ij.
Each B_i is X^e1 - X^e2 for exponents e1 = -i mod M and e2 = e1 + c*n1
with c = i // n1 + 1, so multiplication by it is a two-term rotate-and-add.

The ratios B_i / B_0 = X^e1 * (1 + X^n1 + ... + X^((c-1) n1)) are short
geometric sums (plain monomials for i < n1), which keeps the dual-weighted
mask and noise of an RLWE encryption an exact sparse scatter of the
i.i.d. samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .params import RingParams


class DualBasisError(Exception):
    """The solved basis violates integrality or sparsity; arithmetic bug."""


def trace_zeta(k: int, t: int, alpha: int) -> int:
    """Tr(zeta_M^k) over Q: N if M | k, -n1 if n1 | k, else 0."""
    M = t ** alpha
    n1 = t ** (alpha - 1)
    k %= M
    if k == 0:
        return n1 * (t - 1)
    if k % n1 == 0:
        return -n1
    return 0


def _pairing(terms, j: int, t: int, alpha: int) -> int:
    return sum(c * trace_zeta(j + e, t, alpha) for e, c in terms)


def solve_residue_class(i: int, params: RingParams) -> list[tuple[int, Fraction]]:
    """Exact rational solve of Tr(X^j B_i) = M*delta_ij on its residue class.

    The N x N system splits into n1 independent (t-1) x (t-1) blocks because
    Tr(zeta^(j+k)) vanishes unless n1 | j+k; only the block containing j = i
    has a nonzero right-hand side, so B_i is supported on k = -i mod n1.
    """
    t, alpha, n1, M = params.t, params.alpha, params.n1, params.M
    rho, k0 = i % n1, (-i) % n1
    ks = [k0 + c * n1 for c in range(t - 1)]
    js = [rho + c * n1 for c in range(t - 1)]
    n = t - 1
    aug = [[Fraction(trace_zeta(j + k, t, alpha)) for k in ks]
           + [Fraction(M if j == i else 0)] for j in js]
    for col in range(n):
        piv = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[piv] = aug[piv], aug[col]
        pv = aug[col][col]
        aug[col] = [x / pv for x in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [x - f * y for x, y in zip(aug[r], aug[col])]
    return [(k, aug[r][n]) for r, k in enumerate(ks) if aug[r][n] != 0]


@dataclass
class DualBasis:
    """Sparse forms of M * conj(dual_i) plus the encryption scatter tables."""

    params: RingParams
    e1: np.ndarray          # exponent of the +1 term of B_i, shape (N,)
    e2: np.ndarray          # exponent of the -1 term of B_i, shape (N,)
    ratio_len: np.ndarray   # c with e2 = e1 + c*n1: term count of B_i/B_0
    inv_m_mod_p: int
    # scatter of conj(B_i/B_0) folded mod Phi_M: positions and signed coeffs
    scatter_idx: np.ndarray   # (N, width) int64
    scatter_coef: np.ndarray  # (N, width) int64

    def terms(self, i: int) -> list[tuple[int, int]]:
        """Unreduced sparse form of B_i: at most two nonzero coefficients."""
        return [(int(self.e1[i]), 1), (int(self.e2[i]), -1)]

    def extraction_multiplier(self, i: int, d: int) -> list[tuple[int, int]]:
        """Sparse integer multiplier M^-1 * (M * conj(dual_i))(X^d) mod p.

        Centered mod p so plaintext products stay correct mod q while the
        noise growth is bounded by p per term.
        """
        p, M = self.params.p, self.params.M
        u = self.inv_m_mod_p
        c = u - p if u > p // 2 else u
        return [((int(self.e1[i]) * d) % M, c), ((int(self.e2[i]) * d) % M, -c)]


def _fold_positions(exp: int, sign: int, params: RingParams):
    """Reduced coefficient positions of sign * X^exp, exp in [0, M)."""
    N, n1, t = params.N, params.n1, params.t
    if exp < N:
        return [(exp, sign)]
    r = exp - N
    return [(r + j * n1, -sign) for j in range(t - 1)]


def compute_dual_basis(params: RingParams) -> DualBasis:
    """Construct and exactly verify the dual basis for these ring parameters.

    Candidate two-term forms X^(-i) - X^(-i + c*n1) are checked against the
    defining duality property with exact integer trace pairings for every
    index; a candidate set without a verified member falls back to the
    rational residue-class solve, and a violation of integrality or
    two-term sparsity raises DualBasisError.
    """
    t, alpha, M, N, n1 = params.t, params.alpha, params.M, params.N, params.n1
    e1 = np.zeros(N, dtype=np.int64)
    e2 = np.zeros(N, dtype=np.int64)
    ratio_len = np.zeros(N, dtype=np.int64)  # c: number of terms of B_i / B_0
    for i in range(N):
        a = (-i) % M
        found = False
        for c in [i // n1 + 1] + [c for c in range(1, t) if c != i // n1 + 1]:
            b = (a + c * n1) % M
            terms = [(a, 1), (b, -1)]
            ok = all(
                _pairing(terms, j, t, alpha) == (M if j == i else 0)
                for j in range(i % n1, N, n1)
            )
            if ok:
                e1[i], e2[i], ratio_len[i] = a, b, c
                found = True
                break
        if not found:
            sol = solve_residue_class(i, params)
            if any(f.denominator != 1 for _, f in sol) or len(sol) > 2:
                raise DualBasisError(f"dual basis at index {i} is not a sparse integer polynomial")
            raise DualBasisError(f"dual basis at index {i} has no two-term unreduced form")

    # B_i / B_0 = X^e1 * sum_{k<c} X^(k*n1); conjugate, fold, pad the scatter.
    width = int(ratio_len.max()) * (t - 1)
    idx = np.zeros((N, width), dtype=np.int64)
    coef = np.zeros((N, width), dtype=np.int64)
    for i in range(N):
        pieces: dict[int, int] = {}
        for k in range(int(ratio_len[i])):
            g = (-(int(e1[i]) + k * n1)) % M
            for pos, s in _fold_positions(g, 1, params):
                pieces[pos] = pieces.get(pos, 0) + s
        items = [(pos, s) for pos, s in pieces.items() if s != 0]
        if len(items) > width:
            raise DualBasisError(f"dual ratio at index {i} too dense")
        for k, (pos, s) in enumerate(items):
            idx[i, k] = pos
            coef[i, k] = s

    return DualBasis(
        params=params,
        e1=e1,
        e2=e2,
        ratio_len=ratio_len,
        inv_m_mod_p=pow(M, -1, params.p),
        scatter_idx=idx,
        scatter_coef=coef,
    )


_CACHE: dict[tuple[int, int, int], DualBasis] = {}


def dual_basis(params: RingParams) -> DualBasis:
    """Memoized dual basis; construction is one-time per ring."""
    key = (params.t, params.alpha, params.p_bits)
    if key not in _CACHE:
        _CACHE[key] = compute_dual_basis(params)
    return _CACHE[key]
