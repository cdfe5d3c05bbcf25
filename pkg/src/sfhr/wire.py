"""Bit-exact binary wire format: frames, ciphertext blocks, payloads.

Frame layout (little-endian throughout):

    magic   4s   "SFHR"
    version u16
    type    u8    1=SETUP_REQ 2=SETUP_RESP 3=ROUND_REQ 4=ROUND_RESP 5=ERROR
    session 16s
    round   u32
    paylen  u64
    payload bytes

Ciphertext block: M u32, count u32, count*2M u64 torus numerators
(53 fractional bits), one trailing gamma tag byte.  Torus numerators are
integers, so the round trip is lossless by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .params import SchemeParams
from .tracepack import PowerBundle, power_exponents

MAGIC = b"SFHR"
VERSION = 1
HEADER = struct.Struct("<4sHB16sIQ")
HEADER_SIZE = HEADER.size  # 35

SETUP_REQ = 1
SETUP_RESP = 2
ROUND_REQ = 3
ROUND_RESP = 4
ERROR = 5
_TYPES = {SETUP_REQ, SETUP_RESP, ROUND_REQ, ROUND_RESP, ERROR}

ERR_STALE_ROUND = 1
ERR_BAD_SESSION = 2
ERR_BAD_TYPE = 3
ERR_MALFORMED = 4
ERR_PARAM_MISMATCH = 5
ERR_INTERNAL = 6

DEFAULT_MAX_FRAME = 1 << 30  # 1 GiB


class WireError(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


@dataclass
class WireMessage:
    msg_type: int
    session_id: bytes
    round: int
    payload: bytes
    version: int = VERSION

    def __post_init__(self):
        if len(self.session_id) != 16:
            raise WireError("session id must be 16 bytes")


def encode(msg: WireMessage) -> bytes:
    return HEADER.pack(MAGIC, msg.version, msg.msg_type, msg.session_id,
                       msg.round, len(msg.payload)) + msg.payload


def decode(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> WireMessage:
    if len(data) < HEADER_SIZE:
        raise WireError("truncated frame header")
    magic, version, mtype, session, rno, plen = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError("bad magic")
    if mtype not in _TYPES:
        raise WireError("unknown message type")
    if plen > max_frame:
        raise WireError("frame exceeds configured maximum size")
    if len(data) != HEADER_SIZE + plen:
        raise WireError("payload length mismatch")
    return WireMessage(msg_type=mtype, session_id=session, round=rno,
                       payload=data[HEADER_SIZE:], version=version)


def frame_size(payload_len: int) -> int:
    return HEADER_SIZE + payload_len


# ---------------------------------------------------------------------------
# Ciphertext blocks


def block_size(m: int, count: int) -> int:
    return 4 + 4 + count * 2 * m * 8 + 1


def encode_block(cts: np.ndarray, m: int, gamma: int) -> bytes:
    """cts: (count, 2, N) uint64; lanes are zero-padded to M on the wire."""
    count = cts.shape[0]
    lanes = np.zeros((count, 2, m), dtype="<u8")
    lanes[:, :, :cts.shape[2]] = cts
    return struct.pack("<II", m, count) + lanes.tobytes() + struct.pack("<B", gamma)


def decode_block(buf: bytes, offset: int, n: int) -> tuple[np.ndarray, int, int]:
    """Returns ((count, 2, N) array, gamma, next offset)."""
    if len(buf) < offset + 8:
        raise WireError("truncated ciphertext block header")
    m, count = struct.unpack_from("<II", buf, offset)
    need = block_size(m, count)
    if len(buf) < offset + need:
        raise WireError("truncated ciphertext block body")
    body = np.frombuffer(buf, dtype="<u8", count=count * 2 * m, offset=offset + 8)
    lanes = body.reshape(count, 2, m)
    if np.any(lanes >= (1 << 53)):
        raise WireError("torus numerator out of range")
    gamma = buf[offset + need - 1]
    return lanes[:, :, :n].astype(np.uint64), gamma, offset + need


# ---------------------------------------------------------------------------
# Payload encodings


def encode_error(code: int, message: str) -> bytes:
    raw = message.encode()
    return struct.pack("<HI", code, len(raw)) + raw


def decode_error(payload: bytes) -> tuple[int, str]:
    if len(payload) < 6:
        raise WireError("truncated error payload")
    code, mlen = struct.unpack_from("<HI", payload)
    return code, payload[6:6 + mlen].decode()


def _json_chunk(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(raw)) + raw


def _read_json(buf: bytes, offset: int):
    (jlen,) = struct.unpack_from("<I", buf, offset)
    start = offset + 4
    return json.loads(buf[start:start + jlen].decode()), start + jlen


def encode_setup_req(scheme: SchemeParams, ksk=None, key_id: bytes | None = None) -> bytes:
    from .crypto import KeySwitchKeySet  # local import to avoid cycle

    head = {
        "t": scheme.ring.t, "alpha": scheme.ring.alpha, "p_bits": scheme.ring.p_bits,
        "gamma": scheme.gamma, "beta": scheme.beta_eff,
        "D": scheme.gadget.D, "l": scheme.gadget.l,
        "key_id": key_id.hex() if key_id else None,
        "has_ksk": ksk is not None,
    }
    out = bytearray(_json_chunk(head))
    if ksk is not None:
        assert isinstance(ksk, KeySwitchKeySet)
        out += struct.pack("<I", len(ksk.keys))
        for d in ksk.indices():
            out += struct.pack("<I", d)
            batch = np.stack([np.stack([ct.a, ct.b]) for ct in ksk.keys[d]])
            out += encode_block(batch, scheme.ring.M, scheme.gamma)
    return bytes(out)


def decode_setup_req(payload: bytes):
    from .crypto import KeySwitchKeySet, RlweCiphertext
    from .params import GadgetParams, RingParams, SchemeParams

    head, off = _read_json(payload, 0)
    ring_p = RingParams(t=head["t"], alpha=head["alpha"], p_bits=head["p_bits"])
    scheme = SchemeParams(ring=ring_p, delta=0.0, gadget=GadgetParams(head["D"], head["l"]),
                          gamma=head["gamma"], beta=head["beta"])
    ksk = None
    if head["has_ksk"]:
        (n_idx,) = struct.unpack_from("<I", payload, off)
        off += 4
        keys = {}
        for _ in range(n_idx):
            (d,) = struct.unpack_from("<I", payload, off)
            off += 4
            batch, _, off = decode_block(payload, off, ring_p.N)
            keys[d] = [RlweCiphertext(a=batch[i, 0], b=batch[i, 1])
                       for i in range(batch.shape[0])]
        ksk = KeySwitchKeySet(keys=keys, gadget=scheme.gadget, delta=0.0, params=ring_p)
    key_id = bytes.fromhex(head["key_id"]) if head["key_id"] else None
    return scheme, ksk, key_id


def encode_setup_resp(metadata_json: str, key_id: bytes) -> bytes:
    return _json_chunk({"metadata": json.loads(metadata_json), "key_id": key_id.hex()})


def decode_setup_resp(payload: bytes):
    obj, _ = _read_json(payload, 0)
    return json.dumps(obj["metadata"], sort_keys=True), bytes.fromhex(obj["key_id"])


def encode_round_req(bundles: list[PowerBundle], m: int) -> bytes:
    out = bytearray(struct.pack("<I", len(bundles)))
    for bundle in bundles:
        exps = sorted(bundle.power_cts)
        out += struct.pack("<I", len(exps))
        out += struct.pack(f"<{len(exps)}I", *exps)
        batch = np.stack([np.stack([bundle.power_cts[d].a, bundle.power_cts[d].b])
                          for d in exps])
        out += encode_block(batch, m, bundle.gamma)
    return bytes(out)


def decode_round_req(payload: bytes, n: int) -> list[PowerBundle]:
    from .crypto import RlweCiphertext

    if len(payload) < 4:
        raise WireError("truncated round request")
    (k,) = struct.unpack_from("<I", payload, 0)
    off = 4
    bundles = []
    for _ in range(k):
        (npow,) = struct.unpack_from("<I", payload, off)
        off += 4
        exps = struct.unpack_from(f"<{npow}I", payload, off)
        off += 4 * npow
        batch, gamma, off = decode_block(payload, off, n)
        if batch.shape[0] != npow:
            raise WireError("power count mismatch in round request")
        cts = {int(d): RlweCiphertext(a=batch[i, 0], b=batch[i, 1])
               for i, d in enumerate(exps)}
        bundles.append(PowerBundle(gamma=gamma, power_cts=cts))
    return bundles


def encode_round_resp(packed: list[np.ndarray], m: int, gamma: int) -> bytes:
    batch = np.stack(packed) if packed else np.zeros((0, 2, 0), dtype=np.uint64)
    return struct.pack("<I", len(packed)) + encode_block(batch, m, gamma)


def decode_round_resp(payload: bytes, n: int) -> list[np.ndarray]:
    if len(payload) < 4:
        raise WireError("truncated round response")
    (count,) = struct.unpack_from("<I", payload, 0)
    batch, _, _ = decode_block(payload, 4, n)
    if batch.shape[0] != count:
        raise WireError("pack count mismatch in round response")
    return [batch[i] for i in range(count)]


# ---------------------------------------------------------------------------
# Analytic sizes (the communication-accounting contract)


def bundle_power_count(scheme: SchemeParams) -> int:
    return len(power_exponents(scheme.gamma, scheme.ring))


def round_req_size(scheme: SchemeParams, k_chunks: int) -> int:
    npow = bundle_power_count(scheme)
    per_chunk = 4 + 4 * npow + block_size(scheme.ring.M, npow)
    return frame_size(4 + k_chunks * per_chunk)


def round_resp_size(scheme: SchemeParams, n_packs: int) -> int:
    return frame_size(4 + block_size(scheme.ring.M, n_packs))
