"""LWE/RLWE keys, encryption, gadget decomposition and key switching.

Encryption follows the dual-weighted form: mask and noise are sampled in
the dual basis and mapped through the monomial ratios dual_i/dual_0, which
keeps everything exact on the q-grid (the map is a signed scatter).

Key switching offers two interchangeable backends:

* ``exact``: schoolbook uint64 convolutions, bit-exact mod q.
* ``fft``: float64 cyclic convolutions of the gadget digits against the
  key-switch key split into 27-bit limbs.  Worst-case induced error per
  switch is ~2^-24 on the torus (b=12, D=2^16 row), orders of magnitude
  below every decryption margin; the error is charged to the noise budget.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ring
from .dual import DualBasis
from .params import GadgetParams, Q, Q_MASK, RingParams

_U64 = np.uint64
_MASK = np.uint64(Q_MASK)


def _wrap(x: np.ndarray) -> np.ndarray:
    return x & _MASK


def _neg(x: np.ndarray) -> np.ndarray:
    return (~x + np.uint64(1)) & _MASK


@dataclass
class SecretKeyRing:
    s: np.ndarray  # int8, length N, entries in the key set
    params: RingParams
    _mul_op: object = None

    def __post_init__(self):
        assert len(self.s) == self.params.N


@dataclass
class SecretKeyLwe:
    s: np.ndarray
    n: int


@dataclass
class RlweCiphertext:
    a: np.ndarray  # uint64 numerators, length N
    b: np.ndarray
    noise_hint: float = 0.0

    def as_batch(self) -> np.ndarray:
        return np.stack([self.a, self.b])[None, :, :]


@dataclass
class LweCiphertext:
    a: np.ndarray
    b: np.uint64


@dataclass
class KeySwitchKeySet:
    """Per automorphism index d: l RLWE encryptions of s(X^d)/D^i."""

    keys: dict[int, list[RlweCiphertext]]
    gadget: GadgetParams
    delta: float
    params: RingParams

    def indices(self) -> list[int]:
        return sorted(self.keys)


def keygen(params: RingParams, key_dist: str = "binary", seed=0) -> SecretKeyRing:
    rng = np.random.default_rng(seed)
    if key_dist == "binary":
        s = rng.integers(0, 2, params.N, dtype=np.int8)
    elif key_dist == "ternary":
        s = rng.integers(-1, 2, params.N, dtype=np.int8)
    else:
        raise ValueError(f"unknown key distribution {key_dist!r}")
    return SecretKeyRing(s=s, params=params)


def keygen_lwe(n: int, key_dist: str = "binary", seed=0) -> SecretKeyLwe:
    rng = np.random.default_rng(seed)
    if key_dist == "binary":
        s = rng.integers(0, 2, n, dtype=np.int8)
    elif key_dist == "ternary":
        s = rng.integers(-1, 2, n, dtype=np.int8)
    else:
        raise ValueError(f"unknown key distribution {key_dist!r}")
    return SecretKeyLwe(s=s, n=n)


class _KeyMulOp:
    """Exact multiplication by s(X) as a cached Toeplitz-mod-Phi operator.

    The 53-bit operand splits into three 18-bit limbs; each limb product is
    a float64 BLAS matmul whose values stay below 2^53, hence exact.
    """

    _LIMB = 18
    _LIMB_MASK = np.uint64((1 << 18) - 1)

    def __init__(self, sk: "SecretKeyRing"):
        params = sk.params
        M, N = params.M, params.N
        big = np.zeros((M, N), dtype=np.int64)
        rows = (np.arange(N)[:, None] + np.arange(N)[None, :]) % M
        np.add.at(big, (rows, np.broadcast_to(np.arange(N), (N, N))),
                  sk.s.astype(np.int64)[:, None])
        mat = big[:N].copy()
        tail = big[N:]
        for j in range(params.t - 1):
            mat[j * params.n1:(j + 1) * params.n1, :] -= tail
        self.mat = mat.astype(np.float64)
        if float(np.abs(mat).max()) * N * (1 << self._LIMB) >= 2 ** 53:
            raise ValueError("key operator too large for the exact limb product")

    def times(self, vecs: np.ndarray) -> np.ndarray:
        """vecs: (..., N) uint64 -> s * vecs mod Phi_M, exact."""
        flat = vecs.reshape(-1, vecs.shape[-1]).T  # (N, B)
        acc = np.zeros_like(flat)
        for k in range(3):
            limb = ((flat >> np.uint64(self._LIMB * k)) & self._LIMB_MASK).astype(np.float64)
            part = np.rint(self.mat @ limb).astype(np.int64).astype(_U64)
            acc += part << np.uint64(self._LIMB * k)
        return _wrap(acc.T.reshape(vecs.shape))


def _key_op(sk: "SecretKeyRing") -> _KeyMulOp:
    if not hasattr(sk, "_mul_op") or sk._mul_op is None:
        sk._mul_op = _KeyMulOp(sk)
    return sk._mul_op


def _key_times(sk: "SecretKeyRing", vec: np.ndarray) -> np.ndarray:
    """s(X) * vec mod Phi_M, exact."""
    return _key_op(sk).times(vec)


def lift_message(msg_mod_p: np.ndarray, params: RingParams) -> np.ndarray:
    """Embed a vector of residues mod p as torus numerators (multiples of q/p)."""
    step = _U64(Q >> params.p_bits)
    return _wrap(np.asarray(msg_mod_p, dtype=np.int64).astype(_U64) * step)


def project_p(phase: np.ndarray, params: RingParams) -> np.ndarray:
    """pi_p applied to torus numerators: round to the message grid, mod p."""
    shift = 53 - params.p_bits
    rounded = (phase + _U64(1 << (shift - 1))) >> _U64(shift)
    return (rounded & _U64(params.p - 1)).astype(np.int64)


def encrypt_rlwe_batch(payloads: np.ndarray, sk: SecretKeyRing, delta: float,
                       rng: Optional[np.random.Generator], dual: DualBasis,
                       a_star: Optional[np.ndarray] = None,
                       e_star: Optional[np.ndarray] = None) -> np.ndarray:
    """Encrypt a (B, N) batch of raw torus payloads; returns (B, 2, N).

    a(X) and the noise are formed as dual-weighted combinations
    sum_i x_i * (dual_i/dual_0); test hooks can pin a* and e*.
    """
    params = sk.params
    payloads = np.atleast_2d(np.asarray(payloads, dtype=_U64))
    B, N = payloads.shape
    if a_star is None:
        a_star = rng.integers(0, Q, (B, N), dtype=_U64)
    else:
        a_star = np.atleast_2d(a_star)
    if e_star is None:
        e_star = rng.normal(0.0, delta, (B, N)) if delta > 0 else np.zeros((B, N))
    else:
        e_star = np.atleast_2d(e_star)

    a_t = np.zeros((N, B), dtype=_U64)
    e_t = np.zeros((N, B))
    for k in range(dual.scatter_idx.shape[1]):
        idx = dual.scatter_idx[:, k]
        coef = dual.scatter_coef[:, k]
        np.add.at(a_t, idx, (a_star * coef.astype(_U64)[None, :]).T)
        np.add.at(e_t, idx, (e_star * coef[None, :]).T)
    a = _wrap(a_t.T)
    e_num = np.rint(e_t.T * float(Q)).astype(np.int64).astype(_U64)
    out = np.empty((B, 2, N), dtype=_U64)
    out[:, 0, :] = a
    out[:, 1, :] = _wrap(_key_times(sk, a) + payloads + e_num)
    return out


def encrypt_rlwe(payload: np.ndarray, sk: SecretKeyRing, delta: float,
                 rng: Optional[np.random.Generator], dual: DualBasis,
                 a_star: Optional[np.ndarray] = None,
                 e_star: Optional[np.ndarray] = None) -> RlweCiphertext:
    """Encrypt raw torus numerators (length N) under s(X)."""
    batch = encrypt_rlwe_batch(payload, sk, delta, rng, dual,
                               a_star=a_star, e_star=e_star)
    return RlweCiphertext(a=batch[0, 0], b=batch[0, 1], noise_hint=delta)


def encrypt_rlwe_p(msg_mod_p: np.ndarray, sk: SecretKeyRing, delta: float,
                   rng: Optional[np.random.Generator], dual: DualBasis,
                   **hooks) -> RlweCiphertext:
    return encrypt_rlwe(lift_message(msg_mod_p, sk.params), sk, delta, rng, dual, **hooks)


def trivial_rlwe(payload: np.ndarray) -> RlweCiphertext:
    """Noiseless encryption (0, payload): valid under every key."""
    payload = np.asarray(payload, dtype=_U64)
    return RlweCiphertext(a=np.zeros_like(payload), b=payload.copy(), noise_hint=0.0)


def rlwe_phase(ct: RlweCiphertext, sk: SecretKeyRing) -> np.ndarray:
    return _wrap(ct.b - _key_times(sk, ct.a))


def rlwe_phase_batch(cts: np.ndarray, sk: SecretKeyRing) -> np.ndarray:
    """Phases b - s*a of a (B, 2, N) batch."""
    return _wrap(cts[:, 1, :] - _key_times(sk, cts[:, 0, :]))


def decrypt_rlwe(ct: RlweCiphertext, sk: SecretKeyRing, p: Optional[int] = None) -> np.ndarray:
    """Message residues mod p (exact while |noise| < 1/(2p) per coefficient)."""
    return project_p(rlwe_phase(ct, sk), sk.params)


def encrypt_lwe(mu_mod_p: int, sk: SecretKeyLwe, delta: float,
                rng: np.random.Generator, p_bits: int) -> LweCiphertext:
    a = rng.integers(0, Q, sk.n, dtype=_U64)
    e = int(np.rint(rng.normal(0.0, delta) * Q)) if delta > 0 else 0
    mu = (int(mu_mod_p) << (53 - p_bits)) & Q_MASK
    dot = int(np.sum(a * sk.s.astype(np.int64).astype(_U64), dtype=_U64))
    b = (dot + mu + e) & Q_MASK
    return LweCiphertext(a=a, b=_U64(b))


def decrypt_lwe(ct: LweCiphertext, sk: SecretKeyLwe, p_bits: int) -> int:
    dot = int(np.sum(ct.a * sk.s.astype(np.int64).astype(_U64), dtype=_U64))
    phase = (int(ct.b) - dot) & Q_MASK
    shift = 53 - p_bits
    return ((phase + (1 << (shift - 1))) >> shift) & ((1 << p_bits) - 1)


def ct_add(c1: RlweCiphertext, c2: RlweCiphertext) -> RlweCiphertext:
    if c1.a.shape != c2.a.shape:
        raise ValueError("ciphertext parameter mismatch")
    return RlweCiphertext(a=_wrap(c1.a + c2.a), b=_wrap(c1.b + c2.b),
                          noise_hint=c1.noise_hint + c2.noise_hint)


def ct_scale(ct: RlweCiphertext, w: int) -> RlweCiphertext:
    wu = _U64(w % (1 << 64))
    return RlweCiphertext(a=_wrap(ct.a * wu), b=_wrap(ct.b * wu),
                          noise_hint=ct.noise_hint * abs(w))


def ct_plain_mul(ct: RlweCiphertext, int_poly: np.ndarray, params: RingParams) -> RlweCiphertext:
    """Multiply by a cleartext integer polynomial (homomorphic iff integral)."""
    norm = float(np.linalg.norm(np.asarray(int_poly, dtype=np.float64)))
    return RlweCiphertext(a=ring.poly_mul(ct.a, int_poly, params),
                          b=ring.poly_mul(ct.b, int_poly, params),
                          noise_hint=ct.noise_hint * norm)


def ct_sparse_mul(ct: RlweCiphertext, terms, params: RingParams) -> RlweCiphertext:
    """Multiply by a sparse integer polynomial via rotate-and-add."""
    norm = float(np.sqrt(sum(c * c for _, c in terms)))
    return RlweCiphertext(a=ring.sparse_int_mul(ct.a, terms, params),
                          b=ring.sparse_int_mul(ct.b, terms, params),
                          noise_hint=ct.noise_hint * norm)


# ---------------------------------------------------------------------------
# Gadget decomposition


def gadget_decompose(vec: np.ndarray, g: GadgetParams) -> np.ndarray:
    """Balanced base-D digits: sum_i digit_i / D^i = value/q up to 1/(2 D^l).

    Works on any (..., N) uint64 array and returns int64 digits of shape
    (l, ..., N) with magnitudes at most D/2.
    """
    v = np.asarray(vec, dtype=_U64)
    D, l = g.D, g.l
    if D & (D - 1) == 0:
        w = D.bit_length() - 1
        shift = 53 - w * l
        u = (v + _U64(1 << (shift - 1))) >> _U64(shift)  # round(v * D^l / q)
        u = u.astype(np.int64)
        raw = np.empty((l,) + v.shape, dtype=np.int64)
        for i in range(l - 1, -1, -1):
            raw[i] = u & (D - 1)
            u >>= w
        digits = np.empty_like(raw)
        carry = np.zeros(v.shape, dtype=np.int64)
        for i in range(l - 1, -1, -1):
            x = raw[i] + carry
            over = x > D // 2
            digits[i] = np.where(over, x - D, x)
            carry = over.astype(np.int64)
        return digits
    # small odd base: exact iterative remainder, products stay below 2^63
    half = 1 << 52
    r = v.astype(np.int64)
    r = np.where(v > _U64(half), r - Q, r)
    digits = np.empty((l,) + v.shape, dtype=np.int64)
    for i in range(l):
        prod = r * D
        d = (prod + half) >> 53
        digits[i] = d
        r = prod - d * Q
    return digits


def gadget_reconstruct_error(vec: np.ndarray, digits: np.ndarray, g: GadgetParams) -> np.ndarray:
    """|value/q - sum digit_i D^-i| for testing the reconstruction bound."""
    v = np.asarray(vec, dtype=_U64).astype(np.float64) / Q
    rec = np.zeros_like(v)
    for i in range(g.l):
        rec += digits[i].astype(np.float64) / float(g.D) ** (i + 1)
    err = np.abs(v - rec)
    return np.minimum(err, 1.0 - err)  # distance on the torus


# ---------------------------------------------------------------------------
# Key-switching keys and engine


def keygen_ksk(sk: SecretKeyRing, d_list, g: GadgetParams, delta: float,
               rng: np.random.Generator, dual: DualBasis) -> KeySwitchKeySet:
    """RLWE_{s(X)}(s(X^d)/D^i) for 1 <= i <= l, for every index in d_list."""
    params = sk.params
    keys: dict[int, list[RlweCiphertext]] = {}
    s_int = sk.s.astype(np.int64)
    for d in d_list:
        d = int(d) % params.M
        if np.gcd(d, params.M) != 1:
            raise ValueError(f"key-switch index {d} not coprime with M")
        s_d = ring.automorphism(s_int, d, params)  # small signed integers
        row = []
        for i in range(1, g.l + 1):
            scale = (2 * Q + g.D ** i) // (2 * g.D ** i)  # round(q / D^i)
            payload = _wrap((s_d * scale).astype(_U64))
            row.append(encrypt_rlwe(payload, sk, delta, rng, dual))
        keys[d] = row
    return KeySwitchKeySet(keys=keys, gadget=g, delta=delta, params=params)


class KeySwitchEngine:
    """Applies X -> X^d homomorphically: automorphism then gadget key switch.

    mode='fft' caches limb-split spectra of each key component and runs the
    digit convolutions as batched length-M cyclic FFT products; mode='exact'
    uses uint64 schoolbook convolutions.
    """

    LIMB_BITS = 27

    def __init__(self, ksk: KeySwitchKeySet, mode: str = "fft", max_chunk: int = 128):
        if mode not in ("fft", "exact"):
            raise ValueError(f"unknown key-switch mode {mode!r}")
        self.ksk = ksk
        self.params = ksk.params
        self.mode = mode
        self.max_chunk = max_chunk
        self._spectra: dict[int, tuple] = {}
        # per-switch noise estimate: digit convolution + decomposition residue
        g = ksk.gadget
        N = self.params.N
        self.switch_noise = (ksk.delta * g.D / 2 * np.sqrt(g.l * N)
                             + np.sqrt(N) / (2.0 * float(g.D) ** g.l))

    def _spectrum(self, d: int):
        if d not in self._spectra:
            if d not in self.ksk.keys:
                raise KeyError(f"key-switch key set has no index {d}")
            M = self.params.M
            l = self.ksk.gadget.l
            hi = np.empty((l, 2, M // 2 + 1), dtype=np.complex128)
            lo = np.empty_like(hi)
            for i, ct in enumerate(self.ksk.keys[d]):
                for c, comp in enumerate((ct.a, ct.b)):
                    full = ring.embed(comp, self.params)
                    hi[i, c] = np.fft.rfft((full >> _U64(self.LIMB_BITS)).astype(np.float64))
                    lo[i, c] = np.fft.rfft((full & _U64((1 << self.LIMB_BITS) - 1)).astype(np.float64))
            self._spectra[d] = (hi, lo)
        return self._spectra[d]

    def automorphism_batch(self, cts: np.ndarray, d: int) -> np.ndarray:
        """Apply P(X)->P(X^d) to a (B, 2, N) batch (valid under s(X^d))."""
        return ring.automorphism_u64(cts, d, self.params)

    def switch_batch(self, cts: np.ndarray, d: int, counter=None,
                     skip_zero: bool = False) -> np.ndarray:
        """Key switch a (B, 2, N) batch from s(X^d) back to s(X)."""
        B = cts.shape[0]
        if skip_zero:
            live = np.nonzero(cts.reshape(B, -1).any(axis=1))[0]
            if live.size == 0:
                return np.zeros_like(cts)
            out = np.zeros_like(cts)
            out[live] = self.switch_batch(cts[live], d, counter=counter)
            return out
        if counter is not None:
            counter.add_switches(B)
        out = np.empty_like(cts)
        for lo_ix in range(0, B, self.max_chunk):
            chunk = cts[lo_ix:lo_ix + self.max_chunk]
            out[lo_ix:lo_ix + self.max_chunk] = self._switch_chunk(chunk, d)
        return out

    def _switch_chunk(self, cts: np.ndarray, d: int) -> np.ndarray:
        digits = gadget_decompose(cts[:, 0, :], self.ksk.gadget)  # (l, B, N)
        if self.mode == "exact":
            return self._apply_exact(cts, digits, d)
        return self._apply_fft(cts, digits, d)

    def _apply_exact(self, cts: np.ndarray, digits: np.ndarray, d: int) -> np.ndarray:
        B = cts.shape[0]
        out = np.empty_like(cts)
        ksk = self.ksk.keys[d]
        for r in range(B):
            acc_a = np.zeros(self.params.N, dtype=_U64)
            acc_b = np.zeros(self.params.N, dtype=_U64)
            for i, ct in enumerate(ksk):
                dig = digits[i, r].astype(_U64)
                acc_a += ring.cyclotomic_reduce(np.convolve(dig, ct.a), self.params)
                acc_b += ring.cyclotomic_reduce(np.convolve(dig, ct.b), self.params)
            out[r, 0] = _neg(acc_a)
            out[r, 1] = _wrap(cts[r, 1] - acc_b)
        return out

    def _apply_fft(self, cts: np.ndarray, digits: np.ndarray, d: int) -> np.ndarray:
        hi, lo = self._spectrum(d)
        l, B, N = digits.shape
        M = self.params.M
        dig_full = np.zeros((l, B, M))
        dig_full[:, :, :N] = digits
        spec = np.fft.rfft(dig_full, axis=2)  # (l, B, K)
        acc_hi = spec[0][:, None, :] * hi[0][None, :, :]
        acc_lo = spec[0][:, None, :] * lo[0][None, :, :]
        for i in range(1, l):
            acc_hi += spec[i][:, None, :] * hi[i][None, :, :]
            acc_lo += spec[i][:, None, :] * lo[i][None, :, :]
        conv_hi = np.fft.irfft(acc_hi, n=M, axis=2)
        conv_lo = np.fft.irfft(acc_lo, n=M, axis=2)
        vals = (np.rint(conv_hi).astype(np.int64).astype(_U64) << _U64(self.LIMB_BITS)) \
            + np.rint(conv_lo).astype(np.int64).astype(_U64)
        folded = ring._fold_batch(vals, self.params)  # (B, 2, N)
        out = np.empty_like(cts)
        out[:, 0, :] = _neg(folded[:, 0, :])
        out[:, 1, :] = _wrap(cts[:, 1, :] - folded[:, 1, :])
        return out

    def homomorphic_automorphism(self, ct: RlweCiphertext, d: int,
                                 counter=None) -> RlweCiphertext:
        """Ciphertext of mu(X) -> ciphertext of mu(X^d) under the same key."""
        if d % self.params.M == 1:
            return ct
        batch = self.automorphism_batch(ct.as_batch(), d)
        switched = self.switch_batch(batch, d, counter=counter)
        return RlweCiphertext(a=switched[0, 0], b=switched[0, 1],
                              noise_hint=ct.noise_hint + self.switch_noise)
