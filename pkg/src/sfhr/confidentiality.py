"""Seed-derived shuffling, DP amplification, noise audit, and attack demos.

The permutation for round r of a session is derived from a master secret
through a two-level keyed-hash tree (master -> session -> round) feeding a
Fisher-Yates shuffle, so any party holding the master seed can reproduce
sigma_r; round 0 is pinned to the identity.

The attack functions make the confidentiality argument executable: exact
weight recovery without shuffling, multiset-only recovery under output
shuffling, histogram-only leakage under input+output shuffling.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# Keyed permutation derivation


class _PrfStream:
    """Deterministic 64-bit word stream: blake2b(key) in counter mode."""

    def __init__(self, key: bytes):
        self.key = key
        self.counter = 0
        self.buf = b""

    def _refill(self):
        block = hashlib.blake2b(self.counter.to_bytes(8, "little"),
                                key=self.key, digest_size=64).digest()
        self.counter += 1
        self.buf += block

    def next_u64(self) -> int:
        while len(self.buf) < 8:
            self._refill()
        word, self.buf = self.buf[:8], self.buf[8:]
        return int.from_bytes(word, "little")

    def uniform_int(self, bound: int) -> int:
        """Unbiased draw from [0, bound] by rejection."""
        span = bound + 1
        limit = (1 << 64) - ((1 << 64) % span)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % span


def derive_permutation(master_seed: bytes, session_id: bytes, round_no: int,
                       size: int) -> np.ndarray:
    """sigma_r as an index array: shuffled[sigma[i]] = original[i].

    Deterministic in (seed, session, round); round 0 is the identity.
    Fisher-Yates runs over descending indices with inclusive bounds.
    """
    if size < 1:
        raise ValueError("permutation size must be >= 1")
    if round_no == 0:
        return np.arange(size, dtype=np.int64)
    session_key = hashlib.blake2b(session_id, key=master_seed, digest_size=32).digest()
    round_key = hashlib.blake2b(round_no.to_bytes(4, "little"),
                                key=session_key, digest_size=32).digest()
    stream = _PrfStream(round_key)
    perm = np.arange(size, dtype=np.int64)
    for i in range(size - 1, 0, -1):
        j = stream.uniform_int(i)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm), dtype=perm.dtype)
    return inv


# ---------------------------------------------------------------------------
# Shuffle-model DP amplification


class TheoremNotApplicable(Exception):
    """The amplification bound's applicability condition is violated."""


@dataclass(frozen=True)
class DpParams:
    eps0: float
    delta0: float
    n: int
    delta: float

    def __post_init__(self):
        if self.eps0 < 0 or not (0.0 <= self.delta <= 1.0) or self.n < 1:
            raise ValueError("need eps0 >= 0, 0 <= delta <= 1, n >= 1")


def dp_amplify(p: DpParams) -> tuple[float, float]:
    """Central-DP bound of one round's shuffled outputs.

    Returns (eps, delta_total) where

        eps = ln(1 + (e^eps0 - 1)/(e^eps0 + 1)
                   * (8 sqrt(e^eps0 ln(4/delta)) / sqrt(n) + 8 e^eps0 / n))
        delta_total = delta + (e^eps + 1)(e^-eps0 / 2 + 1) n delta0,

    valid only while eps0 <= ln(n / (16 ln(2/delta))).
    """
    if p.delta <= 0:
        raise TheoremNotApplicable("the bound requires delta > 0")
    cond = p.n / (16.0 * math.log(2.0 / p.delta))
    if cond <= 0 or p.eps0 > math.log(cond):
        raise TheoremNotApplicable(
            f"requires eps0 <= ln(n / (16 ln(2/delta))) = {math.log(cond):.4f}, got {p.eps0}")
    ee = math.exp(p.eps0)
    amp = (ee - 1.0) / (ee + 1.0) * (8.0 * math.sqrt(ee * math.log(4.0 / p.delta)) / math.sqrt(p.n)
                                     + 8.0 * ee / p.n)
    eps = math.log1p(amp)
    delta_total = p.delta + (math.exp(eps) + 1.0) * (math.exp(-p.eps0) / 2.0 + 1.0) * p.n * p.delta0
    return eps, delta_total


def fit_local_dp(noise_values: np.ndarray, sensitivity: float) -> tuple[float, float]:
    """Empirical (eps0, delta0) of Gaussian-shaped packing noise.

    Fits a Gaussian to measured noise and reports the classical Gaussian
    mechanism parameters for the stated sensitivity at delta0 = 1e-5.
    Purely empirical; the sensitivity must be supplied by the caller.
    """
    sigma = float(np.std(noise_values))
    if sigma == 0:
        return float("inf"), 0.0
    delta0 = 1e-5
    eps0 = sensitivity / sigma * math.sqrt(2.0 * math.log(1.25 / delta0))
    return eps0, delta0


# ---------------------------------------------------------------------------
# Noise audit


@dataclass
class NoiseAudit:
    residuals: np.ndarray   # torus units, in [-1/2, 1/2)
    p: int

    @property
    def scaled_max(self) -> float:
        """max |noise| * 2p; decryption is correct while this stays < 1."""
        return float(np.abs(self.residuals).max() * 2 * self.p)

    @property
    def violations(self) -> int:
        return int(np.count_nonzero(np.abs(self.residuals) >= 1.0 / (2 * self.p)))

    def histogram(self, bins: int = 81):
        lim = 1.0 / (2 * self.p)
        counts, edges = np.histogram(self.residuals, bins=bins, range=(-lim, lim))
        return counts, edges

    def write_csv(self, path, bins: int = 81):
        counts, edges = self.histogram(bins)
        with open(path, "w") as fh:
            fh.write("bin_left,bin_right,count\n")
            for k in range(len(counts)):
                fh.write(f"{edges[k]!r},{edges[k + 1]!r},{counts[k]}\n")


def noise_audit(phases: np.ndarray, oracle_mod_p: np.ndarray, p_bits: int) -> NoiseAudit:
    """Per-coefficient residual of decrypted phases against oracle values.

    phases: raw torus numerators (pre-projection); oracle: expected message
    residues mod p at the same positions.
    """
    q = 1 << 53
    expect = (np.asarray(oracle_mod_p, dtype=np.int64) << (53 - p_bits)) & (q - 1)
    diff = (np.asarray(phases, dtype=np.int64) - expect) & (q - 1)
    diff = np.where(diff > q // 2, diff - q, diff)
    return NoiseAudit(residuals=diff.astype(np.float64) / q, p=1 << p_bits)


# ---------------------------------------------------------------------------
# Reconstruction attacks against a linear layer oracle


class LinearLayerOracle:
    """Query access to f(x) = Ax + b under a configurable shuffling regime.

    mode 'none' returns f(x); 'out' returns a fresh output permutation of
    f(x) per query; 'inout' additionally permutes the input coordinates
    freshly per query.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, mode: str = "none",
                 seed: int = 0):
        if mode not in ("none", "out", "inout"):
            raise ValueError(f"unknown shuffle mode {mode!r}")
        self.weights = np.asarray(weights, dtype=np.int64)
        self.bias = np.asarray(bias, dtype=np.int64)
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.queries = 0

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.queries += 1
        x = np.asarray(x, dtype=np.int64)
        if self.mode == "inout":
            x = x[self.rng.permutation(len(x))]
        y = self.weights @ x + self.bias
        if self.mode in ("out", "inout"):
            y = y[self.rng.permutation(len(y))]
        return y


def attack_noshuffle(oracle: LinearLayerOracle, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact recovery of (A, b) from an unshuffled oracle in d+1 queries."""
    b = oracle(np.zeros(d, dtype=np.int64))
    cols = []
    for i in range(d):
        e = np.zeros(d, dtype=np.int64)
        e[i] = 1
        cols.append(oracle(e) - b)
    return np.stack(cols, axis=1), b


def attack_outshuffle(oracle: LinearLayerOracle, d: int, max_probe: int | None = None):
    """Recover the multiset of every column under fresh output shuffling.

    Probes x=0, e_i and 2e_i; an entry v of column i is identified by
    finding, for each shuffled-bias entry bt_k, a response entry y2 with
    (bt_k + y2)/2 present in the e_i response.  Ties are disambiguated
    with extra probes 3e_i, 4e_i, ...: once the probe multiplier exceeds
    the bias spread, a false candidate v for row k would need another row
    j with bt_j - bt_k = c (v - v_j) for every c, forcing v_j = v and
    bt_j = bt_k; such rows are interchangeable, so a matching against the
    response multiset yields the exact column multisets.  Columns come out
    only up to the common unknown permutation of the bias probe.
    """
    bt = oracle(np.zeros(d, dtype=np.int64))
    m = len(bt)
    spread = int(bt.max() - bt.min())
    if max_probe is None:
        max_probe = max(3, spread + 1)
    columns = []
    used_extra = False
    for i in range(d):
        e = np.zeros(d, dtype=np.int64)
        e[i] = 1
        y1 = Counter(oracle(e).tolist())
        y2 = Counter(oracle(2 * e).tolist())
        cands: list[set] = []
        for k in range(m):
            cs = set()
            for entry in y2:
                num = entry - int(bt[k])
                if num % 2 == 0 and y1.get(int(bt[k]) + num // 2, 0) > 0:
                    cs.add(num // 2)
            cands.append(cs)
        if all(len(c) == 1 for c in cands):
            columns.append([c.pop() for c in cands])
            continue
        # Ties: probe with a multiplier above the bias spread.  Then
        # beta + c*v = beta' + c*v' forces (beta, v) = (beta', v'), so every
        # response entry decomposes uniquely against the known bias values
        # and the per-bias value multisets are exact.
        used_extra = True
        c = max_probe
        yc = Counter(oracle(c * e).tolist())
        betas = Counter(int(x) for x in bt)
        per_beta: dict[int, list] = {beta: [] for beta in betas}
        for entry, mult in yc.items():
            options = [beta for beta in betas if (entry - beta) % c == 0]
            if len(options) != 1:  # impossible once c exceeds the bias spread
                raise RuntimeError(f"ambiguous probe entry for column {i}")
            beta = options[0]
            per_beta[beta].extend([(entry - beta) // c] * mult)
        col = [0] * m
        cursors = {beta: 0 for beta in betas}
        for k in range(m):
            beta = int(bt[k])
            col[k] = sorted(per_beta[beta])[cursors[beta]]
            cursors[beta] += 1
        columns.append(col)
    return columns, bt, used_extra


def attack_inout_histogram(oracle: LinearLayerOracle, d: int, queries: int) -> Counter:
    """Collect the value histogram visible under input+output shuffling.

    Each probe e_i returns some column of A shuffled (bias assumed zero for
    this variant), so only the global multiset of weights accumulates.
    """
    seen = Counter()
    for k in range(queries):
        e = np.zeros(d, dtype=np.int64)
        e[k % d] = 1
        seen.update(oracle(e).tolist())
    return seen
