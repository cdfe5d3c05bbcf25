"""Partial-trace extraction, homomorphic fast trace, and fast packing.

Extraction turns one encrypted chunk m(X) (plus client-supplied encrypted
powers m(X^d)) into one ciphertext per coefficient, each encrypting the
partial trace of m * conj(dual_i) down to the base field taken over the
bottom gamma tower stages.  Packing finishes the trace while merging
t^(beta-1) * (t-1) such ciphertexts into one, sharing tower stages along a
radix-t tree:

* the stage K_1 -> K_0 (only needed when gamma = 0) cannot be shared and
  runs per leaf, factorized through the subgroup chain of (Z/t)^*;
* stage K_(j+1) -> K_j runs once per level-j subtree, right after the
  level-j merge, because slot rotations of stride M/t^j commute with all
  higher stages;
* stages above the packing level run once on the final ciphertext.

The resulting key-switch counts per packed coefficient reproduce the
scheme's published cost table to within 0.004.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import ring
from .crypto import KeySwitchEngine, RlweCiphertext
from .dual import DualBasis
from .params import Q_MASK, RingParams, SchemeParams, prime_factors_with_multiplicity, primitive_root

_U64 = np.uint64
_MASK = np.uint64(Q_MASK)


class KsCounter:
    """Thread-safe counters: key switches performed and coefficients packed."""

    def __init__(self):
        self._lock = threading.Lock()
        self.total_key_switches = 0
        self.packed_coefficients = 0

    def add_switches(self, n: int):
        with self._lock:
            self.total_key_switches += n

    def add_packed(self, n: int):
        with self._lock:
            self.packed_coefficients += n

    def per_coefficient(self) -> float:
        return self.total_key_switches / max(1, self.packed_coefficients)


# ---------------------------------------------------------------------------
# Client power sets


def power_exponents(gamma: int, params: RingParams) -> list[int]:
    """Substitution exponents the client evaluates for extraction level gamma.

    gamma=0: base only; gamma=1: {1..t-1}; gamma=2: {k(jt+1) mod M}.
    """
    t, M = params.t, params.M
    if gamma == 0:
        return [1]
    if gamma == 1:
        return list(range(1, t))
    if gamma == 2:
        exps = {(k * (j * t + 1)) % M for j in range(t) for k in range(1, t)}
        return sorted(exps)
    raise ValueError("extraction level gamma must be 0, 1 or 2")


def client_powers(m_mod_p: np.ndarray, gamma: int, params: RingParams) -> list[tuple[int, np.ndarray]]:
    """Plaintext power polynomials m(X^d) to encrypt alongside the base.

    Empty at gamma=0 (the base alone is sent); otherwise one entry per
    exponent, including d=1 which doubles as the base chunk.
    """
    if gamma == 0:
        return []
    p = params.p
    m = np.asarray(m_mod_p, dtype=np.int64)
    out = []
    for d in power_exponents(gamma, params):
        out.append((d, ring.automorphism(m, d, params) % p))
    return out


@dataclass
class PowerBundle:
    """Encrypted chunk plus its encrypted automorphism powers."""

    gamma: int
    power_cts: dict[int, RlweCiphertext]  # exponent -> ciphertext; holds d=1

    def __post_init__(self):
        if self.gamma == 0 and set(self.power_cts) != {1}:
            raise ValueError("gamma=0 bundle carries only the base ciphertext")

    @property
    def base(self) -> RlweCiphertext:
        return self.power_cts[1]

    def check(self, params: RingParams):
        want = set(power_exponents(self.gamma, params))
        if set(self.power_cts) != want:
            raise ValueError(f"bundle exponents {sorted(self.power_cts)} != required {sorted(want)}")


# ---------------------------------------------------------------------------
# Partial-trace extraction (server step 6)


def partial_extract(bundle: PowerBundle, dual: DualBasis, count: int,
                    params: RingParams) -> np.ndarray:
    """Extract ciphertexts of the bottom-tower trace of m * conj(dual_i).

    Output (count, 2, N): row i decrypts (after the remaining tower stages
    applied by packing) to coefficient i of the chunk.  Each power
    ciphertext is multiplied by the two-term integer polynomial
    M^-1 (M conj(dual_i))(X^d).  Both terms share one gathered rotation:
    since dual term exponents differ by c*n1 with c constant on bands of
    indices, each band gathers windows of a pre-combined buffer
    u*ct - u*roll(ct, c*n1*d).
    """
    bundle.check(params)
    if count > params.N:
        raise ValueError(f"cannot extract {count} coefficients from a ring of degree {params.N}")
    M, n1 = params.M, params.n1
    p = params.p
    u = dual.inv_m_mod_p
    cu = _U64((u - p if u > p // 2 else u) % (1 << 64))

    i_idx = np.arange(count)
    cs = dual.ratio_len[:count]
    acc = np.zeros((2, count, M), dtype=_U64)
    for d, ct in bundle.power_cts.items():
        ct_m = np.empty((2, M), dtype=_U64)
        ct_m[0] = ring.embed(ct.a, params)
        ct_m[1] = ring.embed(ct.b, params)
        pw = (ct_m * cu) & _MASK
        starts = (i_idx * d) % M
        for c in np.unique(cs):
            rows = np.nonzero(cs == c)[0]
            band = (pw - np.roll(pw, (int(c) * n1 * d) % M, axis=1)) & _MASK
            dbl = np.concatenate([band, band], axis=1)
            windows = np.lib.stride_tricks.sliding_window_view(dbl, M, axis=1)
            acc[:, rows, :] += windows[:, starts[rows], :]
    acc &= _MASK
    return ring._fold_batch(acc.transpose(1, 0, 2), params)


def extraction_payload_for_one(dual: DualBasis, gamma: int, params: RingParams) -> np.ndarray:
    """Body payload of a noiseless 'extracted ciphertext' of the constant 1.

    Scaling a trivial ciphertext of this payload by an integer bias gives a
    row that packs (and decrypts) to that bias; used to fold layer biases
    into the encrypted linear combination.
    """
    p, M = params.p, params.M
    u = dual.inv_m_mod_p
    c = u - p if u > p // 2 else u
    step = 1 << (53 - params.p_bits)
    vec = np.zeros(M, dtype=np.int64)
    for d in power_exponents(gamma, params):
        for e, s in ((int(dual.e1[0]), c), (int(dual.e2[0]), -c)):
            vec[(e * d) % M] += s * step
    return ring.fold_once(vec.astype(_U64) & _MASK, params)


# ---------------------------------------------------------------------------
# Tower stages, homomorphically


def stage0_chains(params: RingParams) -> list[list[int]]:
    """Factorized automorphism schedule of the K_1 -> K_0 stage.

    (Z/t)^* is cyclic of order t-1 = prod of primes l_k; each chain is one
    subgroup quotient and costs l_k - 1 switches, for a stage total of
    sum (l_k - 1).  The composed exponent products run over one full set of
    coset representatives of the level-1 subgroup.
    """
    t, M = params.t, params.M
    g = primitive_root(t)
    chains = []
    stride = 1
    for ell in prime_factors_with_multiplicity(t - 1):
        chains.append([pow(g, stride * u, M) for u in range(ell)])
        stride *= ell
    return chains


def stage_reps_above(level_j: int, params: RingParams) -> list[int]:
    """Representatives of the stage K_(j+1) -> K_j for j >= 1: 1 + i*t^j."""
    t, M = params.t, params.M
    step = params.t ** level_j
    return [(1 + i * step) % M for i in range(t)]


def expected_trace_switches(params: RingParams, from_level=None, to_level=0) -> int:
    """Closed-form key-switch count of the homomorphic fast trace."""
    from_level = params.alpha if from_level is None else from_level
    t = params.t
    total = 0
    for level in range(from_level, to_level, -1):
        if level >= 2:
            total += t - 1
        else:
            total += sum(l - 1 for l in prime_factors_with_multiplicity(t - 1))
    return total


def fast_trace_homomorphic(ct: RlweCiphertext, engine: KeySwitchEngine,
                           from_level: int, to_level: int,
                           counter: KsCounter | None = None) -> RlweCiphertext:
    """Homomorphic partial trace along the tower, from_level down to to_level.

    Stages above level 1 use the canonical representatives 1 + i*t^(j);
    the last stage to the base field uses the factorized schedule, so a
    full-tower call costs (alpha-1)(t-1) + sum_{l | t-1} (l-1) switches.
    """
    params = engine.params
    if not (0 <= to_level <= from_level <= params.alpha):
        raise ValueError(f"invalid tower levels {from_level} -> {to_level}")
    cur = ct
    for level in range(from_level, to_level, -1):
        if level >= 2:
            acc = cur
            for rep in stage_reps_above(level - 1, params)[1:]:
                acc = _ct_add(acc, engine.homomorphic_automorphism(cur, rep, counter))
            cur = acc
        else:
            for chain in stage0_chains(params):
                acc = cur
                for rep in chain[1:]:
                    acc = _ct_add(acc, engine.homomorphic_automorphism(cur, rep, counter))
                cur = acc
    return cur


def _ct_add(c1: RlweCiphertext, c2: RlweCiphertext) -> RlweCiphertext:
    return RlweCiphertext(a=(c1.a + c2.a) & _MASK, b=(c1.b + c2.b) & _MASK,
                          noise_hint=c1.noise_hint + c2.noise_hint)


# ---------------------------------------------------------------------------
# Fast packing (server step 10)


def expected_pack_switches(t: int, alpha: int, beta: int, gamma: int) -> int:
    """Key switches consumed by one full pack group (no padding)."""
    factor_cost = sum(l - 1 for l in prime_factors_with_multiplicity(t - 1))
    pack = t ** (beta - 1) * (t - 1)
    total = pack * factor_cost if gamma == 0 else 0
    for j in range(1, beta):
        if j >= max(gamma, 1):
            total += t ** (beta - j) * (t - 1)
    for j in range(beta, alpha):
        if j >= max(gamma, 1):
            total += t - 1
    return total


def _apply_stage_batch(cts: np.ndarray, reps: list[int], engine: KeySwitchEngine,
                       counter, skip_zero: bool) -> np.ndarray:
    acc = cts.copy()
    live = None
    if skip_zero:
        live = np.nonzero(cts.reshape(cts.shape[0], -1).any(axis=1))[0]
        if live.size == 0:
            return acc
        cts = cts[live] if live.size < cts.shape[0] else cts
    for rep in reps[1:]:
        moved = engine.automorphism_batch(cts, rep)
        switched = engine.switch_batch(moved, rep, counter=counter)
        if live is not None and live.size < acc.shape[0]:
            acc[live] += switched
        else:
            acc += switched
        acc &= _MASK
    return acc


def fast_pack(cts: np.ndarray, scheme: SchemeParams, engine: KeySwitchEngine,
              counter: KsCounter | None = None, skip_zero: bool = False) -> np.ndarray:
    """Pack t^(beta-1)*(t-1) extracted rows into one ciphertext.

    Input (F, 2, N); output (2, N).  Slot i of the output polynomial sits
    at coefficient i * M / t^beta and holds the value carried by input i.
    """
    params = scheme.ring
    t, alpha, beta = params.t, params.alpha, scheme.beta_eff
    gamma = scheme.gamma
    F = t ** (beta - 1) * (t - 1)
    if cts.shape != (F, 2, params.N):
        raise ValueError(f"fast_pack expects exactly {F} rows of shape (2, {params.N})")
    cur = cts

    if gamma == 0:
        for chain in stage0_chains(params):
            cur = _apply_stage_batch(cur, chain, engine, counter, skip_zero)

    for j in range(1, beta + 1):
        members = (t - 1) if j == 1 else t
        rest = cur.shape[0] // members
        grouped = cur.reshape(members, rest, 2, params.N)
        stride = params.M // t ** j
        merged = np.zeros((rest, 2, params.N), dtype=_U64)
        for a in range(members):
            part = grouped[a] if a == 0 else ring.monomial_mul(grouped[a], a * stride, params)
            merged = (merged + part) & _MASK
        cur = merged
        if j <= beta - 1 and j >= max(gamma, 1):
            cur = _apply_stage_batch(cur, stage_reps_above(j, params), engine, counter, skip_zero)

    for j in range(beta, alpha):
        if j >= max(gamma, 1):
            cur = _apply_stage_batch(cur, stage_reps_above(j, params), engine, counter, skip_zero)

    if counter is not None:
        counter.add_packed(F)
    return cur[0]


def slot_positions(scheme: SchemeParams) -> np.ndarray:
    """Coefficient index of slot i within a packed ciphertext."""
    params = scheme.ring
    stride = params.M // params.t ** scheme.beta_eff
    return np.arange(scheme.pack_factor) * stride


def pack_rows(rows: np.ndarray, scheme: SchemeParams, engine: KeySwitchEngine,
              counter: KsCounter | None = None, skip_zero: bool = True) -> list[np.ndarray]:
    """Pack E' rows into ceil(E'/F) ciphertexts, zero-padding the last group."""
    F = scheme.pack_factor
    e = rows.shape[0]
    packs = []
    for lo in range(0, e, F):
        group = rows[lo:lo + F]
        if group.shape[0] < F:
            pad = np.zeros((F - group.shape[0], 2, scheme.ring.N), dtype=_U64)
            group = np.concatenate([group, pad], axis=0)
        packs.append(fast_pack(group, scheme, engine, counter=counter, skip_zero=skip_zero))
    return packs


def read_packed_values(phase_vectors, count: int, scheme: SchemeParams) -> np.ndarray:
    """Gather the E' packed coefficient positions from decrypted polynomials."""
    pos = slot_positions(scheme)
    out = np.empty(count, dtype=np.int64)
    F = scheme.pack_factor
    for i in range(count):
        out[i] = phase_vectors[i // F][pos[i % F]]
    return out
