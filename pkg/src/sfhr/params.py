"""Ring and gadget parameters for the prime-power cyclotomic RLWE scheme.

The ciphertext space is the discrete torus T_q with q = 2**53: every torus
point is stored as an integer numerator in [0, q).  Since 2**53 divides
2**64, all additions and integer multiplications done in uint64 wrap
arithmetic stay exact mod q, which the ring layer relies on throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

Q_BITS = 53
Q = 1 << Q_BITS
Q_MASK = Q - 1


def is_prime(n: int) -> bool:
    if n < 2:
        return False
    for d in range(2, int(math.isqrt(n)) + 1):
        if n % d == 0:
            return False
    return True


def prime_factors_with_multiplicity(n: int) -> list[int]:
    out = []
    d = 2
    while d * d <= n:
        while n % d == 0:
            out.append(d)
            n //= d
        d += 1
    if n > 1:
        out.append(n)
    return out


def primitive_root(t: int) -> int:
    """Smallest generator of (Z/t)^* for prime t."""
    factors = set(prime_factors_with_multiplicity(t - 1))
    for g in range(2, t):
        if all(pow(g, (t - 1) // f, t) != 1 for f in factors):
            return g
    raise ValueError(f"no primitive root mod {t}")


@dataclass(frozen=True)
class RingParams:
    """Parameters of T_q[X]/Phi_M(X) with M = t**alpha a prime power.

    N = phi(M) = t**(alpha-1) * (t-1) is the ring degree; p = 2**p_bits is
    the message-space size and must divide q.
    """

    t: int
    alpha: int
    p_bits: int

    def __post_init__(self):
        if not is_prime(self.t) or self.t < 3:
            raise ValueError(f"t must be an odd prime >= 3, got {self.t}")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not (8 <= self.p_bits <= 16):
            raise ValueError("p must be a power of two between 2^8 and 2^16")

    @property
    def M(self) -> int:
        return self.t ** self.alpha

    @property
    def N(self) -> int:
        return self.t ** (self.alpha - 1) * (self.t - 1)

    @property
    def n1(self) -> int:
        """t**(alpha-1), the fold stride of Phi_M = sum_j X^(j*n1)."""
        return self.t ** (self.alpha - 1)

    @property
    def p(self) -> int:
        return 1 << self.p_bits

    @property
    def q(self) -> int:
        return Q

    def units(self) -> list[int]:
        return [d for d in range(1, self.M) if d % self.t != 0]


@dataclass(frozen=True)
class GadgetParams:
    """Base-D depth-l decomposition used by key switching."""

    D: int
    l: int

    def __post_init__(self):
        if self.D < 2 or self.l < 1:
            raise ValueError("need D >= 2 and l >= 1")
        if self.D ** self.l > Q:
            raise ValueError("D^l must not exceed q")
        # The exact decomposition path multiplies 52-bit residues by D in
        # int64; non-power-of-two bases must stay below 2^10 for that.
        if self.D & (self.D - 1) and self.D > 1024:
            raise ValueError("non-power-of-two base must be <= 1024")

    @property
    def half(self) -> int:
        return self.D // 2


@dataclass(frozen=True)
class SchemeParams:
    """One row of the scheme's parameterization: ring, noise and gadget."""

    ring: RingParams
    delta: float
    gadget: GadgetParams
    gamma: int = 0
    beta: int = 0  # 0 means "maximum", i.e. alpha - 1
    key_dist: str = "binary"

    def __post_init__(self):
        if not (0 <= self.gamma <= 2):
            raise ValueError("extraction level gamma must be 0, 1 or 2")
        beta = self.beta or self.ring.alpha - 1
        if not (1 <= beta <= self.ring.alpha - 1):
            raise ValueError("packing level beta must satisfy 1 <= beta <= alpha-1")

    @property
    def beta_eff(self) -> int:
        return self.beta or self.ring.alpha - 1

    @property
    def pack_factor(self) -> int:
        b = self.beta_eff
        return self.ring.t ** (b - 1) * (self.ring.t - 1)


# Scheme parameterization per accumulator precision b.  The gadget differs
# between gamma = 0 and gamma in {1, 2}.
_PRESETS = {
    8: dict(t=3, alpha=7, delta=2.0 ** -36, gadget={0: (512, 3), 1: (512, 3), 2: (512, 3)}),
    12: dict(t=7, alpha=4, delta=2.0 ** -51, gadget={0: (1 << 12, 3), 1: (1 << 16, 2), 2: (1 << 16, 2)}),
    16: dict(t=5, alpha=5, delta=2.0 ** -51, gadget={0: (310, 5), 1: (310, 4), 2: (310, 4)}),
}


def preset_for_bits(b: int, gamma: int = 0, beta: int = 0) -> SchemeParams:
    """Scheme parameters for accumulator precision b in {8, 12, 16}."""
    if b not in _PRESETS:
        raise ValueError(f"no parameter preset for b={b} (have {sorted(_PRESETS)})")
    if not (0 <= gamma <= 2):
        raise ValueError("extraction level gamma must be 0, 1 or 2")
    row = _PRESETS[b]
    D, l = row["gadget"][gamma]
    ring = RingParams(t=row["t"], alpha=row["alpha"], p_bits=b)
    return SchemeParams(ring=ring, delta=row["delta"], gadget=GadgetParams(D, l),
                        gamma=gamma, beta=beta)


def preset_bits() -> list[int]:
    return sorted(_PRESETS)
