"""Message codec and the two interchangeable transports (in-process, socket).

Wire format, all little-endian:

    frame   := magic "FAVG" | version u8 (=1) | msg_type u8 | payload_len u32 | payload
    str     := length u32 | UTF-8 bytes
    params  := layer_count u32 | layer*
    layer   := name str | element_count u64 | element_count * f64
    spec    := input_dim u32 | hidden_count u32 | hidden u32* | activation str
    train   := learning_rate f64 | epochs u32 | batch_size u32
             | beta1 f64 | beta2 f64 | epsilon f64 | seed u64

Parameters travel as IEEE-754 binary64, so a ParameterSet survives the wire
bit-exactly and the two transports are indistinguishable to the protocol.
Frames above 64 MiB are rejected from the header alone, before any payload
buffering.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .fed import ModelUpdate
from .nn import ModelSpec, TrainConfig
from .params import ParameterSet

__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "MAX_FRAME_PAYLOAD",
    "CodecError",
    "BadMagicError",
    "VersionError",
    "MessageTypeError",
    "TruncatedError",
    "TrailingDataError",
    "OversizeFrameError",
    "NonFiniteValueError",
    "TransportError",
    "TransportTimeout",
    "JoinRequest",
    "JoinAck",
    "GlobalModel",
    "ClientUpdate",
    "RoundComplete",
    "Shutdown",
    "Message",
    "PeerDisconnected",
    "encode",
    "decode",
    "StreamDecoder",
    "encode_global_model_payload",
    "decode_global_model_payload",
    "InProcessHub",
    "SocketServerEndpoint",
    "SocketChannel",
    "TransportPair",
    "transport_pair",
]

MAGIC = b"FAVG"
VERSION = 1
HEADER_SIZE = 10
MAX_FRAME_PAYLOAD = 64 * 1024 * 1024

_HEADER = struct.Struct("<4sBBI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


class CodecError(ValueError):
    """Base class for malformed frames and payloads."""


class BadMagicError(CodecError):
    pass


class VersionError(CodecError):
    pass


class MessageTypeError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class TrailingDataError(CodecError):
    pass


class OversizeFrameError(CodecError):
    pass


class NonFiniteValueError(CodecError):
    pass


class TransportError(RuntimeError):
    """Connection-level failure, surfaced with peer identity where known."""


class TransportTimeout(TransportError):
    pass


# Messages.
@dataclass(frozen=True)
class JoinRequest:
    client_id: str


@dataclass(frozen=True)
class JoinAck:
    client_id: str
    model_spec: ModelSpec
    train_config: TrainConfig


@dataclass(frozen=True)
class GlobalModel:
    round_index: int
    params: ParameterSet


@dataclass(frozen=True)
class ClientUpdate:
    update: ModelUpdate


@dataclass(frozen=True)
class RoundComplete:
    round_index: int


@dataclass(frozen=True)
class Shutdown:
    reason: str = ""


Message = JoinRequest | JoinAck | GlobalModel | ClientUpdate | RoundComplete | Shutdown

_TYPE_CODES: dict[type, int] = {
    JoinRequest: 1,
    JoinAck: 2,
    GlobalModel: 3,
    ClientUpdate: 4,
    RoundComplete: 5,
    Shutdown: 6,
}
_CODE_TYPES = {code: cls for cls, code in _TYPE_CODES.items()}


class PeerDisconnected:
    """Inbox sentinel: a peer's connection ended (EOF, reset, or bad bytes)."""

    def __init__(self, reason: str = ""):
        self.reason = reason

    def __repr__(self):
        return f"PeerDisconnected({self.reason!r})"


class _Writer:
    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, value: int):
        self._parts.append(bytes([value]))

    def u32(self, value: int):
        if not 0 <= value < 2**32:
            raise ValueError(f"value {value} out of u32 range")
        self._parts.append(_U32.pack(value))

    def u64(self, value: int):
        if not 0 <= value < 2**64:
            raise ValueError(f"value {value} out of u64 range")
        self._parts.append(_U64.pack(value))

    def f64(self, value: float):
        self._parts.append(_F64.pack(value))

    def string(self, value: str):
        data = value.encode("utf-8")
        self.u32(len(data))
        self._parts.append(data)

    def params(self, p: ParameterSet):
        self.u32(len(p))
        for name, arr in p:
            self.string(name)
            self.u64(arr.size)
            self._parts.append(arr.astype("<f8", copy=False).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TruncatedError(
                f"payload ends at byte {len(self._data)}, needed {self._pos + n}"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def finite_f64(self) -> float:
        value = self.f64()
        if not np.isfinite(value):
            raise NonFiniteValueError(f"non-finite float {value!r} in payload")
        return value

    def string(self) -> str:
        length = self.u32()
        try:
            return self._take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 in string field: {exc}") from None

    def params(self) -> ParameterSet:
        layer_count = self.u32()
        layers = []
        for _ in range(layer_count):
            name = self.string()
            count = self.u64()
            raw = self._take(count * 8)
            values = np.frombuffer(raw, dtype="<f8")
            if not np.all(np.isfinite(values)):
                raise NonFiniteValueError(f"non-finite value in layer {name!r}")
            layers.append((name, values))
        try:
            return ParameterSet(layers)
        except ValueError as exc:
            raise CodecError(str(exc)) from None

    def expect_end(self):
        if self._pos != len(self._data):
            raise TrailingDataError(
                f"{len(self._data) - self._pos} unexpected bytes after message payload"
            )


def _write_model_spec(w: _Writer, spec: ModelSpec):
    w.u32(spec.input_dim)
    w.u32(len(spec.hidden_dims))
    for h in spec.hidden_dims:
        w.u32(h)
    w.string(spec.activation)


def _read_model_spec(r: _Reader) -> ModelSpec:
    input_dim = r.u32()
    hidden = tuple(r.u32() for _ in range(r.u32()))
    activation = r.string()
    try:
        return ModelSpec(input_dim, hidden, activation)
    except ValueError as exc:
        raise CodecError(str(exc)) from None


def _write_train_config(w: _Writer, cfg: TrainConfig):
    w.f64(cfg.learning_rate)
    w.u32(cfg.epochs)
    w.u32(cfg.batch_size)
    w.f64(cfg.adam_beta1)
    w.f64(cfg.adam_beta2)
    w.f64(cfg.adam_epsilon)
    w.u64(cfg.seed)


def _read_train_config(r: _Reader) -> TrainConfig:
    lr = r.finite_f64()
    epochs = r.u32()
    batch = r.u32()
    b1 = r.finite_f64()
    b2 = r.finite_f64()
    eps = r.finite_f64()
    seed = r.u64()
    try:
        return TrainConfig(lr, epochs, batch, b1, b2, eps, seed)
    except ValueError as exc:
        raise CodecError(str(exc)) from None


def _encode_payload(msg: Message) -> bytes:
    w = _Writer()
    if isinstance(msg, JoinRequest):
        w.string(msg.client_id)
    elif isinstance(msg, JoinAck):
        w.string(msg.client_id)
        _write_model_spec(w, msg.model_spec)
        _write_train_config(w, msg.train_config)
    elif isinstance(msg, GlobalModel):
        if msg.round_index < 0:
            raise ValueError(f"round_index must be >= 0, got {msg.round_index}")
        w.u32(msg.round_index)
        w.params(msg.params)
    elif isinstance(msg, ClientUpdate):
        u = msg.update
        w.string(u.client_id)
        w.u32(u.round_index)
        w.params(u.params)
        w.u64(u.num_train_samples)
        w.f64(u.best_val_loss)
    elif isinstance(msg, RoundComplete):
        w.u32(msg.round_index)
    elif isinstance(msg, Shutdown):
        w.string(msg.reason)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return w.getvalue()


def _decode_payload(msg_type: int, payload: bytes) -> Message:
    r = _Reader(payload)
    cls = _CODE_TYPES[msg_type]
    if cls is JoinRequest:
        msg: Message = JoinRequest(r.string())
    elif cls is JoinAck:
        msg = JoinAck(r.string(), _read_model_spec(r), _read_train_config(r))
    elif cls is GlobalModel:
        msg = GlobalModel(r.u32(), r.params())
    elif cls is ClientUpdate:
        client_id = r.string()
        round_index = r.u32()
        params = r.params()
        samples = r.u64()
        val_loss = r.finite_f64()
        try:
            msg = ClientUpdate(
                ModelUpdate(client_id, round_index, params, samples, val_loss)
            )
        except ValueError as exc:
            raise CodecError(str(exc)) from None
    elif cls is RoundComplete:
        msg = RoundComplete(r.u32())
    else:
        msg = Shutdown(r.string())
    r.expect_end()
    return msg


def encode(msg: Message) -> bytes:
    """Canonical frame bytes for a message."""
    payload = _encode_payload(msg)
    if len(payload) > MAX_FRAME_PAYLOAD:
        raise OversizeFrameError(
            f"payload of {len(payload)} bytes exceeds the {MAX_FRAME_PAYLOAD}-byte limit"
        )
    return _HEADER.pack(MAGIC, VERSION, _TYPE_CODES[type(msg)], len(payload)) + payload


def _check_header(header: bytes) -> tuple[int, int]:
    magic, version, msg_type, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    if msg_type not in _CODE_TYPES:
        raise MessageTypeError(f"unknown message type {msg_type}")
    if payload_len > MAX_FRAME_PAYLOAD:
        raise OversizeFrameError(
            f"declared payload of {payload_len} bytes exceeds the "
            f"{MAX_FRAME_PAYLOAD}-byte limit"
        )
    return msg_type, payload_len


def decode(data: bytes) -> Message:
    """Parse exactly one frame; anything malformed raises a specific CodecError."""
    if len(data) < HEADER_SIZE:
        raise TruncatedError(f"frame header needs {HEADER_SIZE} bytes, got {len(data)}")
    msg_type, payload_len = _check_header(data[:HEADER_SIZE])
    remaining = len(data) - HEADER_SIZE
    if remaining < payload_len:
        raise TruncatedError(f"payload declared {payload_len} bytes, frame has {remaining}")
    if remaining > payload_len:
        raise TrailingDataError(f"{remaining - payload_len} bytes after the frame payload")
    return _decode_payload(msg_type, data[HEADER_SIZE:])


class StreamDecoder:
    """Reassembles messages from an arbitrarily chunked byte stream."""

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buffer.extend(data)
        messages = []
        while True:
            if len(self._buffer) < HEADER_SIZE:
                break
            msg_type, payload_len = _check_header(bytes(self._buffer[:HEADER_SIZE]))
            if len(self._buffer) < HEADER_SIZE + payload_len:
                break
            payload = bytes(self._buffer[HEADER_SIZE : HEADER_SIZE + payload_len])
            del self._buffer[: HEADER_SIZE + payload_len]
            messages.append(_decode_payload(msg_type, payload))
        return messages

    @property
    def pending_bytes(self) -> int:
        return len(self._buffer)


def encode_global_model_payload(round_index: int, params: ParameterSet) -> bytes:
    """The GlobalModel payload bytes; also the saved-model file body."""
    return _encode_payload(GlobalModel(round_index, params))


def decode_global_model_payload(data: bytes) -> tuple[int, ParameterSet]:
    r = _Reader(data)
    round_index = r.u32()
    params = r.params()
    r.expect_end()
    return round_index, params


# ---------------------------------------------------------------------------
# In-process transport: queue-backed channels with the same delivery contract
# as the socket transport (reliable, ordered, message-oriented).


class InProcessHub:
    """Server endpoint for simulated federations. Thread-safe."""

    def __init__(self):
        self._inbox: queue.Queue = queue.Queue()
        self._channels: dict[int, "InProcessChannel"] = {}
        self._lock = threading.Lock()
        self._next_peer = 0
        self._closed = False

    def connect(self) -> "InProcessChannel":
        with self._lock:
            if self._closed:
                raise TransportError("hub is closed")
            peer = self._next_peer
            self._next_peer += 1
            channel = InProcessChannel(self, peer)
            self._channels[peer] = channel
        return channel

    def recv(self, timeout: float | None = None) -> tuple[int, Message | PeerDisconnected]:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message within {timeout} s") from None

    def send(self, peer: int, msg: Message) -> None:
        with self._lock:
            channel = self._channels.get(peer)
        if channel is None or channel.closed:
            raise TransportError(f"peer {peer} is not connected")
        channel._incoming.put(msg)

    def _deliver(self, peer: int, item: Message | PeerDisconnected) -> None:
        self._inbox.put((peer, item))

    def close(self) -> None:
        with self._lock:
            self._closed = True
            channels = list(self._channels.values())
        for channel in channels:
            channel._force_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CHANNEL_CLOSED = object()


class InProcessChannel:
    """Client end of an in-process connection."""

    def __init__(self, hub: InProcessHub, peer: int):
        self._hub = hub
        self.peer = peer
        self._incoming: queue.Queue = queue.Queue()
        self.closed = False

    def send(self, msg: Message) -> None:
        if self.closed:
            raise TransportError("channel is closed")
        self._hub._deliver(self.peer, msg)

    def recv(self, timeout: float | None = None) -> Message:
        try:
            item = self._incoming.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message within {timeout} s") from None
        if item is _CHANNEL_CLOSED:
            self.closed = True
            raise TransportError("connection closed by peer")
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._hub._deliver(self.peer, PeerDisconnected("channel closed"))

    def _force_close(self) -> None:
        # Wakes a blocked recv when the hub shuts down.
        self._incoming.put(_CHANNEL_CLOSED)


# ---------------------------------------------------------------------------
# Socket transport: length-prefixed frames over TCP.

_RECV_CHUNK = 65536


class _FrameConn:
    """One TCP connection carrying frames; send is locked, recv is buffered."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._decoder = StreamDecoder()
        self._ready: list[Message] = []

    def send(self, msg: Message) -> None:
        data = encode(msg)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise TransportError(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> Message:
        if self._ready:
            return self._ready.pop(0)
        self._sock.settimeout(timeout)
        while True:
            try:
                chunk = self._sock.recv(_RECV_CHUNK)
            except socket.timeout:
                raise TransportTimeout(f"no message within {timeout} s") from None
            except OSError as exc:
                raise TransportError(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            messages = self._decoder.feed(chunk)
            if messages:
                self._ready.extend(messages[1:])
                return messages[0]

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class SocketChannel:
    """Client end of a socket connection."""

    def __init__(self, conn: _FrameConn):
        self._conn = conn
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout: float | None = 10.0) -> "SocketChannel":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        return cls(_FrameConn(sock))

    def send(self, msg: Message) -> None:
        self._conn.send(msg)

    def recv(self, timeout: float | None = None) -> Message:
        return self._conn.recv(timeout)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._conn.close()


class SocketServerEndpoint:
    """Accepts N client connections; all messages funnel into one event queue."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            self._listener.bind((host, port))
        except OSError as exc:
            self._listener.close()
            raise TransportError(f"cannot bind {host}:{port}: {exc}") from exc
        self._listener.listen()
        self.address: tuple[str, int] = self._listener.getsockname()[:2]
        self._inbox: queue.Queue = queue.Queue()
        self._conns: dict[int, _FrameConn] = {}
        self._lock = threading.Lock()
        self._next_peer = 0
        self._closed = False
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            with self._lock:
                if self._closed:
                    sock.close()
                    return
                peer = self._next_peer
                self._next_peer += 1
                conn = _FrameConn(sock)
                self._conns[peer] = conn
            reader = threading.Thread(target=self._read_loop, args=(peer, conn), daemon=True)
            reader.start()

    def _read_loop(self, peer: int, conn: _FrameConn) -> None:
        decoder = StreamDecoder()
        sock = conn._sock
        while True:
            try:
                chunk = sock.recv(_RECV_CHUNK)
            except OSError:
                self._inbox.put((peer, PeerDisconnected("connection error")))
                return
            if not chunk:
                self._inbox.put((peer, PeerDisconnected("connection closed")))
                return
            try:
                messages = decoder.feed(chunk)
            except CodecError as exc:
                self._inbox.put((peer, PeerDisconnected(f"malformed frame: {exc}")))
                conn.close()
                return
            for msg in messages:
                self._inbox.put((peer, msg))

    def recv(self, timeout: float | None = None) -> tuple[int, Message | PeerDisconnected]:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportTimeout(f"no message within {timeout} s") from None

    def send(self, peer: int, msg: Message) -> None:
        with self._lock:
            conn = self._conns.get(peer)
        if conn is None:
            raise TransportError(f"peer {peer} is not connected")
        conn.send(msg)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            conns = list(self._conns.values())
        self._listener.close()
        for conn in conns:
            conn.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TransportPair:
    """A server endpoint plus a connector clients call to reach it."""

    kind: str
    endpoint: InProcessHub | SocketServerEndpoint
    connect: Callable[[], Union[InProcessChannel, SocketChannel]]


def transport_pair(kind: str, host: str = "127.0.0.1", port: int = 0) -> TransportPair:
    """Build the matched (server endpoint, client connector) for a transport kind."""
    if kind == "in_process":
        hub = InProcessHub()
        return TransportPair("in_process", hub, hub.connect)
    if kind == "socket":
        endpoint = SocketServerEndpoint(host, port)
        return TransportPair(
            "socket",
            endpoint,
            lambda: SocketChannel.connect(endpoint.address[0], endpoint.address[1]),
        )
    raise ValueError(f"unknown transport kind {kind!r}; use 'in_process' or 'socket'")
