"""Session-multiplexed transports: in-process loopback and plaintext TCP.

Both speak exactly the same frames; the loopback simply hands encoded bytes
to the same dispatcher the TCP server uses, so tests over loopback cover
the wire semantics.  Sessions live in the engine keyed by session id, not
in the connection, so a dropped connection parks its session until the
engine's timeout; reconnecting within the timeout resumes at the expected
round.
"""

from __future__ import annotations

import socket
import socketserver
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import wire
from .protocol import Client, InferenceResult, ModelMetadata, ProtocolError, ServerEngine


class ServerFrontend:
    """Stateless frame dispatcher in front of a ServerEngine."""

    def __init__(self, engine: ServerEngine, max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.engine = engine
        self.max_frame = max_frame
        self.bytes_in = 0
        self.bytes_out = 0
        self._lock = threading.Lock()

    def handle(self, data: bytes) -> bytes:
        with self._lock:
            self.bytes_in += len(data)
        out = self._handle_inner(data)
        with self._lock:
            self.bytes_out += len(out)
        return out

    def _handle_inner(self, data: bytes) -> bytes:
        try:
            msg = wire.decode(data, max_frame=self.max_frame)
        except wire.WireError as exc:
            return wire.encode(wire.WireMessage(
                msg_type=wire.ERROR, session_id=b"\x00" * 16, round=0,
                payload=wire.encode_error(wire.ERR_MALFORMED, str(exc))))
        try:
            if msg.msg_type == wire.SETUP_REQ:
                return self._setup(msg)
            if msg.msg_type == wire.ROUND_REQ:
                return self._round(msg)
            raise ProtocolError(wire.ERR_BAD_TYPE,
                                f"server cannot accept message type {msg.msg_type}")
        except ProtocolError as exc:
            return wire.encode(wire.WireMessage(
                msg_type=wire.ERROR, session_id=msg.session_id, round=msg.round,
                payload=wire.encode_error(exc.code, str(exc))))
        except wire.WireError as exc:
            return wire.encode(wire.WireMessage(
                msg_type=wire.ERROR, session_id=msg.session_id, round=msg.round,
                payload=wire.encode_error(wire.ERR_MALFORMED, str(exc))))

    def _setup(self, msg: wire.WireMessage) -> bytes:
        scheme, ksk, key_id = wire.decode_setup_req(msg.payload)
        own = self.engine.scheme
        if (scheme.ring, scheme.gamma, scheme.beta_eff, scheme.gadget) != \
                (own.ring, own.gamma, own.beta_eff, own.gadget):
            raise ProtocolError(wire.ERR_PARAM_MISMATCH, "scheme parameters do not match server")
        if ksk is not None:
            ksk.delta = own.delta
            key_id = self.engine.register_client(ksk)
        elif key_id is None or key_id not in self.engine.clients:
            raise ProtocolError(wire.ERR_BAD_SESSION, "setup carries neither ksk nor known key id")
        meta = self.engine.open_session(msg.session_id, key_id)
        return wire.encode(wire.WireMessage(
            msg_type=wire.SETUP_RESP, session_id=msg.session_id, round=0,
            payload=wire.encode_setup_resp(meta.to_json(), key_id)))

    def _round(self, msg: wire.WireMessage) -> bytes:
        bundles = wire.decode_round_req(msg.payload, self.engine.scheme.ring.N)
        packed, _stats = self.engine.server_round(msg.session_id, msg.round, bundles)
        payload = wire.encode_round_resp(packed, self.engine.scheme.ring.M,
                                         self.engine.scheme.gamma)
        return wire.encode(wire.WireMessage(
            msg_type=wire.ROUND_RESP, session_id=msg.session_id, round=msg.round,
            payload=payload))


class LoopbackTransport:
    """In-process channel with wire-identical semantics."""

    def __init__(self, frontend: ServerFrontend):
        self.frontend = frontend
        self.bytes_up = 0
        self.bytes_down = 0

    def request(self, frame: bytes) -> bytes:
        self.bytes_up += len(frame)
        resp = self.frontend.handle(frame)
        self.bytes_down += len(resp)
        return resp


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        piece = sock.recv(n - len(buf))
        if not piece:
            raise ConnectionError("connection closed mid-frame")
        buf += piece
    return buf


def read_frame(sock: socket.socket, max_frame: int = wire.DEFAULT_MAX_FRAME) -> bytes:
    head = _recv_exact(sock, wire.HEADER_SIZE)
    magic, _v, _t, _s, _r, plen = wire.HEADER.unpack(head)
    if magic != wire.MAGIC:
        raise wire.WireError("bad magic")
    if plen > max_frame:
        raise wire.WireError("frame exceeds configured maximum size")
    return head + _recv_exact(sock, plen)


class TcpServer:
    """One thread per connection; per-session processing serialized by engine."""

    def __init__(self, engine: ServerEngine, host: str = "127.0.0.1", port: int = 0,
                 max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.frontend = ServerFrontend(engine, max_frame=max_frame)
        frontend = self.frontend
        max_frame_ = max_frame

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                while True:
                    try:
                        frame = read_frame(self.request, max_frame_)
                    except (ConnectionError, OSError):
                        return  # session stays parked in the engine
                    except wire.WireError as exc:
                        err = wire.encode(wire.WireMessage(
                            msg_type=wire.ERROR, session_id=b"\x00" * 16, round=0,
                            payload=wire.encode_error(wire.ERR_MALFORMED, str(exc))))
                        try:
                            self.request.sendall(err)
                        except OSError:
                            pass
                        return
                    self.request.sendall(frontend.handle(frame))

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = self._server.server_address
        self._thread: Optional[threading.Thread] = None

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


def serve(model, scheme, host: str = "127.0.0.1", port: int = 9735, **engine_kwargs) -> TcpServer:
    engine = ServerEngine(model, scheme, **engine_kwargs)
    return TcpServer(engine, host=host, port=port).start()


class TcpTransport:
    def __init__(self, host: str, port: int, max_frame: int = wire.DEFAULT_MAX_FRAME):
        self.addr = (host, port)
        self.max_frame = max_frame
        self.sock = socket.create_connection(self.addr)
        self.bytes_up = 0
        self.bytes_down = 0

    def request(self, frame: bytes) -> bytes:
        self.bytes_up += len(frame)
        try:
            self.sock.sendall(frame)
            resp = read_frame(self.sock, self.max_frame)
        except (ConnectionError, OSError):
            # resume-on-reconnect: the session is parked server-side
            self.sock = socket.create_connection(self.addr)
            self.sock.sendall(frame)
            resp = read_frame(self.sock, self.max_frame)
        self.bytes_down += len(resp)
        return resp

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def connect(host: str, port: int) -> TcpTransport:
    return TcpTransport(host, port)


@dataclass
class SessionHandle:
    session_id: bytes
    metadata: ModelMetadata
    key_id: bytes
    bytes_up_rounds: list = field(default_factory=list)
    bytes_down_rounds: list = field(default_factory=list)


class RemoteClient:
    """Blocking request/response client running full sessions over frames."""

    def __init__(self, client: Client, transport):
        self.client = client
        self.transport = transport
        self.key_id: Optional[bytes] = None

    def _rpc(self, msg: wire.WireMessage) -> wire.WireMessage:
        resp = wire.decode(self.transport.request(wire.encode(msg)))
        if resp.msg_type == wire.ERROR:
            code, text = wire.decode_error(resp.payload)
            raise ProtocolError(code, text)
        return resp

    def setup(self) -> SessionHandle:
        """Open a fresh session, shipping the ksk only on first contact."""
        session_id = self.client.new_session_id()
        ksk = None if self.key_id else self.client.make_ksk()
        payload = wire.encode_setup_req(self.client.scheme, ksk=ksk, key_id=self.key_id)
        resp = self._rpc(wire.WireMessage(msg_type=wire.SETUP_REQ, session_id=session_id,
                                          round=0, payload=payload))
        meta_json, key_id = wire.decode_setup_resp(resp.payload)
        self.key_id = key_id
        return SessionHandle(session_id=session_id,
                             metadata=ModelMetadata.from_json(meta_json), key_id=key_id)

    def infer(self, x: np.ndarray, handle: Optional[SessionHandle] = None) -> InferenceResult:
        if handle is None:
            handle = self.setup()
        meta = handle.metadata
        v = np.asarray(x, dtype=np.int64).reshape(-1)
        history = []
        for rno, rmeta in enumerate(meta.rounds, start=1):
            if rmeta.skip_len:
                skip = history[rmeta.skip_source] if rmeta.skip_source >= 0 \
                    else np.asarray(x, dtype=np.int64).reshape(-1)
                v = np.concatenate([v, skip])
            bundles = self.client.prepare_round(v, rmeta.input_len)
            req = wire.WireMessage(
                msg_type=wire.ROUND_REQ, session_id=handle.session_id, round=rno,
                payload=wire.encode_round_req(bundles, self.client.params.M))
            raw = wire.encode(req)
            handle.bytes_up_rounds.append(len(raw))
            resp = wire.decode(self.transport.request(raw))
            if resp.msg_type == wire.ERROR:
                code, text = wire.decode_error(resp.payload)
                raise ProtocolError(code, text)
            handle.bytes_down_rounds.append(wire.frame_size(len(resp.payload)))
            packed = wire.decode_round_resp(resp.payload, self.client.params.N)
            out, probs = self.client.finish_round(packed, rmeta)
            if rmeta.final:
                return InferenceResult(logits=out, probabilities=probs, stats=[],
                                       session_id=handle.session_id)
            history.append(out)
            v = out
        raise ProtocolError(wire.ERR_INTERNAL, "no final round reached")
