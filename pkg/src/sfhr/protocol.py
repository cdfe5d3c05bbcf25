"""Round-structured client and server engines, independent of transport.

One inference is a session: per round the client uploads encrypted chunk
power bundles, the server extracts rows, unshuffles the previous round's
permutation, applies the round's integer matrix under encryption, shuffles,
packs, and returns the packed ciphertexts; the client decrypts, applies
the activation in plaintext, requantizes and re-encrypts for the next
round.  The final round is never shuffled and yields the logits.

Key material is registered once per client and referenced by key_id across
sessions; each session carries a strict round counter and stale or
mismatched rounds are rejected.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as model_mod
from . import tracepack, wire
from .confidentiality import derive_permutation, invert_permutation
from .crypto import (KeySwitchEngine, KeySwitchKeySet, RlweCiphertext,
                     encrypt_rlwe_batch, keygen, keygen_ksk, lift_message,
                     rlwe_phase_batch)
from .dual import dual_basis
from .params import RingParams, SchemeParams
from .tracepack import (KsCounter, PowerBundle, client_powers,
                        partial_extract, read_packed_values,
                        stage0_chains, stage_reps_above)


class ProtocolError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def required_ksk_indices(scheme: SchemeParams) -> list[int]:
    """Automorphism indices the server needs for this extraction level.

    Tower stages at or above max(gamma, 1) plus, at gamma = 0, the
    factorized base-stage chain; always at most alpha*(t-1) indices.
    """
    params = scheme.ring
    idx = set()
    for j in range(max(scheme.gamma, 1), params.alpha):
        idx.update(stage_reps_above(j, params)[1:])
    if scheme.gamma == 0:
        for chain in stage0_chains(params):
            idx.update(chain[1:])
    return sorted(idx)


@dataclass
class RoundMeta:
    input_len: int
    output_len: int
    activation: Optional[str]
    eta: int
    clip: tuple
    skip_source: int
    skip_len: int
    final: bool


@dataclass
class ModelMetadata:
    """Everything the client needs to run its half without seeing weights."""

    rounds: list
    input_shape: tuple
    input_clip: tuple
    num_classes: int
    t: int
    alpha: int
    p_bits: int
    gamma: int
    beta: int

    def to_json(self) -> str:
        return json.dumps({
            "rounds": [vars(r) | {"clip": list(r.clip)} for r in self.rounds],
            "input_shape": list(self.input_shape),
            "input_clip": list(self.input_clip),
            "num_classes": self.num_classes,
            "t": self.t, "alpha": self.alpha, "p_bits": self.p_bits,
            "gamma": self.gamma, "beta": self.beta,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelMetadata":
        d = json.loads(text)
        rounds = [RoundMeta(**(r | {"clip": tuple(r["clip"])})) for r in d["rounds"]]
        return cls(rounds=rounds, input_shape=tuple(d["input_shape"]),
                   input_clip=tuple(d["input_clip"]), num_classes=d["num_classes"],
                   t=d["t"], alpha=d["alpha"], p_bits=d["p_bits"],
                   gamma=d["gamma"], beta=d["beta"])


def metadata_for(model: model_mod.QuantModel, scheme: SchemeParams) -> ModelMetadata:
    rounds = [RoundMeta(input_len=r.input_len, output_len=r.output_len,
                        activation=r.activation, eta=r.eta, clip=r.clip,
                        skip_source=r.skip_source, skip_len=r.skip_len, final=r.final)
              for r in model.rounds]
    return ModelMetadata(rounds=rounds, input_shape=model.input_shape,
                         input_clip=model.input_clip, num_classes=model.num_classes,
                         t=scheme.ring.t, alpha=scheme.ring.alpha,
                         p_bits=scheme.ring.p_bits, gamma=scheme.gamma,
                         beta=scheme.beta_eff)


@dataclass
class RoundStats:
    extract_s: float = 0.0
    linear_s: float = 0.0
    pack_s: float = 0.0
    key_switches: int = 0
    packed_coefficients: int = 0
    bytes_up: int = 0
    bytes_down: int = 0


@dataclass
class _SessionState:
    key_id: bytes
    next_round: int = 1
    last_seen: float = field(default_factory=time.monotonic)


@dataclass
class _ClientKeys:
    ksk: KeySwitchKeySet
    engine: KeySwitchEngine
    scheme: SchemeParams


class ServerEngine:
    """Holds the model and per-client key material; executes server rounds."""

    def __init__(self, model: model_mod.QuantModel, scheme: SchemeParams,
                 master_seed: bytes = b"\x00" * 32, threads: int = 1,
                 shuffle_enabled: bool = True, ks_mode: str = "fft",
                 session_timeout: float = 300.0, extra_noise_std: float = 0.0):
        if len(master_seed) != 32:
            raise ValueError("master seed must be 32 bytes")
        if model.acc_bits != scheme.ring.p_bits:
            raise ProtocolError(wire.ERR_PARAM_MISMATCH,
                                "model accumulator width does not match plaintext modulus")
        self.model = model
        self.scheme = scheme
        self.master_seed = master_seed
        self.threads = max(1, threads)
        self.shuffle_enabled = shuffle_enabled
        self.ks_mode = ks_mode
        self.session_timeout = session_timeout
        # optional stronger-privacy hook: extra Gaussian noise on returned
        # packs; raises decryption-failure risk, so default off
        self.extra_noise_std = extra_noise_std
        self._noise_rng = np.random.default_rng(
            int.from_bytes(master_seed[:8], "little") ^ 0x6E6F6973)
        self.dual = dual_basis(scheme.ring)
        self.clients: dict[bytes, _ClientKeys] = {}
        self.sessions: dict[bytes, _SessionState] = {}
        self.counter = KsCounter()
        self._round_mats = [model_mod.round_matrix(model, r) for r in range(len(model.rounds))]
        self._bias_unit = tracepack.extraction_payload_for_one(self.dual, scheme.gamma, scheme.ring)
        # pool sized by the knob but never beyond the cores: oversubscribed
        # numpy workers only fight over cache
        workers = min(self.threads, os.cpu_count() or self.threads)
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    # -- setup ------------------------------------------------------------

    def register_client(self, ksk: KeySwitchKeySet) -> bytes:
        needed = set(required_ksk_indices(self.scheme))
        have = set(ksk.indices())
        if not needed <= have:
            raise ProtocolError(wire.ERR_PARAM_MISMATCH,
                                f"key-switch keys missing indices {sorted(needed - have)}")
        key_id = hashlib.blake2b(repr(sorted(have)).encode()
                                 + ksk.keys[min(have)][0].a.tobytes(),
                                 digest_size=16).digest()
        if key_id not in self.clients:
            self.clients[key_id] = _ClientKeys(
                ksk=ksk, engine=KeySwitchEngine(ksk, mode=self.ks_mode), scheme=self.scheme)
        return key_id

    def open_session(self, session_id: bytes, key_id: bytes) -> ModelMetadata:
        if key_id not in self.clients:
            raise ProtocolError(wire.ERR_BAD_SESSION, "unknown key id")
        self._reap()
        if session_id in self.sessions:
            raise ProtocolError(wire.ERR_BAD_SESSION, "session id already in use")
        self.sessions[session_id] = _SessionState(key_id=key_id)
        return metadata_for(self.model, self.scheme)

    def _reap(self):
        now = time.monotonic()
        dead = [sid for sid, st in self.sessions.items()
                if now - st.last_seen > self.session_timeout]
        for sid in dead:
            del self.sessions[sid]

    # -- round processing ---------------------------------------------------

    def _perm(self, session_id: bytes, round_no: int, size: int) -> np.ndarray:
        if not self.shuffle_enabled:
            return np.arange(size, dtype=np.int64)
        return derive_permutation(self.master_seed, session_id, round_no, size)

    def server_round(self, session_id: bytes, round_no: int,
                     bundles: list[PowerBundle]) -> tuple[list[np.ndarray], RoundStats]:
        state = self.sessions.get(session_id)
        if state is None:
            raise ProtocolError(wire.ERR_BAD_SESSION, "unknown or expired session")
        if round_no != state.next_round:
            raise ProtocolError(wire.ERR_STALE_ROUND,
                                f"expected round {state.next_round}, got {round_no}")
        if not (1 <= round_no <= len(self.model.rounds)):
            raise ProtocolError(wire.ERR_STALE_ROUND, "round beyond model depth")
        rnd = self.model.rounds[round_no - 1]
        params = self.scheme.ring
        keys = self.clients[state.key_id]
        stats = RoundStats()

        k_expected = -(-rnd.input_len // params.N)
        if len(bundles) != k_expected:
            raise ProtocolError(wire.ERR_MALFORMED,
                                f"expected {k_expected} chunks, got {len(bundles)}")

        t0 = time.perf_counter()
        rows = self._extract(bundles, rnd.input_len)
        t1 = time.perf_counter()

        # undo sigma_(r-1); the first unshuffle is a no-op, and a residual
        # skip segment arrives under the permutation of its source round
        main_len = rnd.input_len - rnd.skip_len
        perm_prev = self._perm(session_id, round_no - 1, main_len)
        rows_main = rows[:main_len][perm_prev]
        if rnd.skip_len:
            skip_round = rnd.skip_source + 1  # rounds are 1-indexed in perms
            perm_skip = self._perm(session_id, skip_round, rnd.skip_len)
            rows_skip = rows[main_len:rnd.input_len][perm_skip]
            rows_canon = np.concatenate([rows_main, rows_skip], axis=0)
        else:
            rows_canon = rows_main

        w, bias = self._round_mats[round_no - 1]
        ct_matrix = model_mod.CtMatrix(data=rows_canon, m_lanes=params.M)
        out_rows = model_mod.encrypted_linear(w, bias, ct_matrix, self._bias_unit)
        t2 = time.perf_counter()

        if not rnd.final:
            sigma = self._perm(session_id, round_no, rnd.output_len)
            out_rows = out_rows[invert_permutation(sigma)]

        switches_before = self.counter.total_key_switches
        packed = self._pack(out_rows, keys.engine)
        t3 = time.perf_counter()

        state.next_round += 1
        state.last_seen = time.monotonic()
        if round_no == len(self.model.rounds):
            self.sessions.pop(session_id, None)  # inference complete
        stats.extract_s = t1 - t0
        stats.linear_s = t2 - t1
        stats.pack_s = t3 - t2
        stats.key_switches = self.counter.total_key_switches - switches_before
        stats.packed_coefficients = len(packed) * self.scheme.pack_factor
        stats.bytes_up = wire.round_req_size(self.scheme, len(bundles))
        stats.bytes_down = wire.round_resp_size(self.scheme, len(packed))
        return packed, stats

    def _extract(self, bundles: list[PowerBundle], total: int) -> np.ndarray:
        params = self.scheme.ring
        counts = [min(params.N, total - j * params.N) for j in range(len(bundles))]

        def one(args):
            bundle, count = args
            return partial_extract(bundle, self.dual, count, params)

        if self._pool is not None and len(bundles) > 1:
            parts = list(self._pool.map(one, zip(bundles, counts)))
        else:
            parts = [one(x) for x in zip(bundles, counts)]
        return np.concatenate(parts, axis=0)

    def _pack(self, rows: np.ndarray, engine: KeySwitchEngine) -> list[np.ndarray]:
        F = self.scheme.pack_factor
        groups = []
        for lo in range(0, rows.shape[0], F):
            chunk = rows[lo:lo + F]
            if chunk.shape[0] < F:
                pad = np.zeros((F - chunk.shape[0], 2, self.scheme.ring.N), dtype=np.uint64)
                chunk = np.concatenate([chunk, pad], axis=0)
            groups.append(chunk)

        def one(g):
            return tracepack.fast_pack(g, self.scheme, engine,
                                       counter=self.counter, skip_zero=True)

        if self._pool is not None and len(groups) > 1:
            packs = list(self._pool.map(one, groups))
        else:
            packs = [one(g) for g in groups]
        if self.extra_noise_std > 0:
            q = float(1 << 53)
            for pk in packs:
                extra = np.rint(self._noise_rng.normal(
                    0.0, self.extra_noise_std, pk.shape[-1]) * q)
                pk[1] = (pk[1] + extra.astype(np.int64).astype(np.uint64)) \
                    & np.uint64((1 << 53) - 1)
        return packs


class Client:
    """Client half: key owner, chunker, encryptor, activation runner."""

    def __init__(self, scheme: SchemeParams, seed: int = 1234):
        self.scheme = scheme
        self.params = scheme.ring
        self.dual = dual_basis(self.params)
        self.rng = np.random.default_rng(seed)
        self.sk = keygen(self.params, key_dist=scheme.key_dist,
                         seed=int(self.rng.integers(0, 2 ** 62)))
        self.ksk: Optional[KeySwitchKeySet] = None

    def make_ksk(self) -> KeySwitchKeySet:
        if self.ksk is None:
            self.ksk = keygen_ksk(self.sk, required_ksk_indices(self.scheme),
                                  self.scheme.gadget, self.scheme.delta, self.rng, self.dual)
        return self.ksk

    def new_session_id(self) -> bytes:
        return self.rng.integers(0, 256, 16, dtype=np.uint8).tobytes()

    # -- per-round client work -------------------------------------------

    def prepare_round(self, v_signed: np.ndarray, expected_len: int) -> list[PowerBundle]:
        """Flatten/chunk/power-compute/encrypt one round's input vector."""
        params, p = self.params, self.params.p
        v = np.asarray(v_signed, dtype=np.int64).reshape(-1)
        if len(v) != expected_len:
            raise ProtocolError(wire.ERR_MALFORMED,
                                f"round input length {len(v)} != expected {expected_len}")
        v_mod = v % p
        bundles = []
        for lo in range(0, expected_len, params.N):
            chunk = np.zeros(params.N, dtype=np.int64)
            piece = v_mod[lo:lo + params.N]
            chunk[:len(piece)] = piece
            if self.scheme.gamma == 0:
                exps, polys = [1], [chunk]
            else:
                pairs = client_powers(chunk, self.scheme.gamma, params)
                exps = [d for d, _ in pairs]
                polys = [poly for _, poly in pairs]
            payloads = np.stack([lift_message(poly, params) for poly in polys])
            batch = encrypt_rlwe_batch(payloads, self.sk, self.scheme.delta,
                                       self.rng, self.dual)
            cts = {d: RlweCiphertext(a=batch[i, 0], b=batch[i, 1],
                                     noise_hint=self.scheme.delta)
                   for i, d in enumerate(exps)}
            bundles.append(PowerBundle(gamma=self.scheme.gamma, power_cts=cts))
        return bundles

    def finish_round(self, packed: list[np.ndarray], meta: RoundMeta):
        """Decrypt, read slots, drop padding; activation + requant or logits."""
        F = self.scheme.pack_factor
        need = -(-meta.output_len // F)
        if len(packed) != need:
            raise ProtocolError(wire.ERR_MALFORMED,
                                f"expected {need} packed ciphertexts, got {len(packed)}")
        phases = rlwe_phase_batch(np.stack(packed), self.sk)
        residues = [project_phase(ph, self.params) for ph in phases]
        vals = read_packed_values(residues, meta.output_len, self.scheme)
        signed = np.where(vals >= self.params.p // 2, vals - self.params.p, vals)
        if meta.final:
            logits = signed
            return logits, model_mod.softmax(logits)
        act = model_mod.activation_apply(signed, meta.activation)
        return model_mod.requantize(act, meta.eta, meta.clip), None


def project_phase(phase: np.ndarray, params: RingParams) -> np.ndarray:
    shift = 53 - params.p_bits
    rounded = (phase + np.uint64(1 << (shift - 1))) >> np.uint64(shift)
    return (rounded & np.uint64(params.p - 1)).astype(np.int64)


@dataclass
class InferenceResult:
    logits: np.ndarray
    probabilities: np.ndarray
    stats: list
    session_id: bytes


def run_inference(client: Client, server: ServerEngine, x: np.ndarray,
                  key_id: Optional[bytes] = None) -> InferenceResult:
    """Drive one full in-process inference session (loopback, no wire)."""
    if key_id is None:
        key_id = server.register_client(client.make_ksk())
    session_id = client.new_session_id()
    meta = server.open_session(session_id, key_id)
    v = np.asarray(x, dtype=np.int64).reshape(-1)
    history = []
    stats = []
    for rno, rmeta in enumerate(meta.rounds, start=1):
        if rmeta.skip_len:
            skip = history[rmeta.skip_source] if rmeta.skip_source >= 0 \
                else np.asarray(x, dtype=np.int64).reshape(-1)
            v = np.concatenate([v, skip])
        bundles = client.prepare_round(v, rmeta.input_len)
        packed, st = server.server_round(session_id, rno, bundles)
        stats.append(st)
        out, probs = client.finish_round(packed, rmeta)
        if rmeta.final:
            return InferenceResult(logits=out, probabilities=probs, stats=stats,
                                   session_id=session_id)
        history.append(out)
        v = out
    raise ProtocolError(wire.ERR_INTERNAL, "model has no final round")
