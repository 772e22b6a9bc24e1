"""Transports carrying encoded wire frames between parties.

Both flavors expose the same endpoint surface: `send(peer, msg)` and a
blocking `recv(peer, timeout)`, with per-(src, dst) FIFO channels. The
in-process hub still round-trips every message through the binary codec
so a run never depends on in-memory object passing; it can also record
a message trace and carry virtual-time stamps for the timing model.
TCP endpoints speak the same frames over loopback or real sockets, with
a hello frame identifying each client connection.
"""

from __future__ import annotations

import socket
import struct
import threading
from dataclasses import dataclass, field
from queue import Empty, SimpleQueue

import numpy as np

from .errors import ChannelClosed, FramingError
from .wire import Kind, WireMessage, decode, encode

DEFAULT_TIMEOUT = 120.0

_CLOSE = object()


class SimClock:
    """Virtual clock for one party; merged forward by message stamps."""

    def __init__(self):
        self.t = 0.0

    def advance(self, dt: float) -> None:
        self.t += dt

    def merge(self, t: float) -> None:
        if t > self.t:
            self.t = t


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    src: str
    dst: str
    kind: Kind
    round_index: int
    client_id: int
    epoch: int
    batch: int
    tensor_names: tuple[str, ...] = ()


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)
    payloads: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


class InProcHub:
    """Queue-backed message router for parties running as threads."""

    def __init__(self, latency: float = 0.0, record_trace: bool = False,
                 record_payloads: bool = False):
        self.latency = latency
        self._queues: dict[tuple[str, str], SimpleQueue] = {}
        self._lock = threading.Lock()
        self._seq = 0
        self.trace = Trace() if record_trace else None
        self._record_payloads = record_payloads

    def _queue(self, src: str, dst: str) -> SimpleQueue:
        with self._lock:
            return self._queues.setdefault((src, dst), SimpleQueue())

    def endpoint(self, name: str, clock: SimClock | None = None) -> "InProcEndpoint":
        return InProcEndpoint(self, name, clock or SimClock())

    def _record(self, src: str, dst: str, msg: WireMessage) -> None:
        if self.trace is None:
            return
        with self._lock:
            seq = self._seq
            self._seq += 1
            self.trace.events.append(TraceEvent(
                seq, src, dst, Kind(msg.kind), msg.round_index, msg.client_id,
                msg.epoch, msg.batch, tuple(msg.payload)))
            if self._record_payloads and msg.payload:
                self.trace.payloads[seq] = {k: v.copy() for k, v in msg.payload.items()}


class InProcEndpoint:
    def __init__(self, hub: InProcHub, name: str, clock: SimClock):
        self.hub = hub
        self.name = name
        self.clock = clock

    def session_view(self) -> "InProcEndpoint":
        """Same queues, independent clock (one per concurrent session)."""
        return InProcEndpoint(self.hub, self.name, SimClock())

    def send(self, peer: str, msg: WireMessage) -> None:
        self.hub._record(self.name, peer, msg)
        frame = encode(msg)
        self.hub._queue(self.name, peer).put((frame, self.clock.t))

    def recv(self, peer: str, timeout: float | None = DEFAULT_TIMEOUT) -> WireMessage:
        try:
            item = self.hub._queue(peer, self.name).get(timeout=timeout)
        except Empty:
            raise TimeoutError(f"{self.name}: no message from {peer} within {timeout}s")
        if item is _CLOSE:
            raise ChannelClosed(f"{peer} closed the channel to {self.name}")
        frame, stamp = item
        self.clock.merge(stamp + self.hub.latency)
        return decode(frame)

    def close_to(self, peer: str) -> None:
        self.hub._queue(self.name, peer).put(_CLOSE)

    def close(self) -> None:
        pass


class SocketChannel:
    """One connected socket speaking length-prefixed frames."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    def _read_exact(self, n: int, what: str) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self._sock.recv(n - got)
            if not chunk:
                if got == 0 and what == "length":
                    raise ChannelClosed("peer closed the connection")
                raise FramingError(f"connection dropped mid-{what}")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send(self, msg: WireMessage) -> None:
        frame = encode(msg)
        with self._send_lock:
            self._sock.sendall(frame)

    def recv(self, timeout: float | None = DEFAULT_TIMEOUT) -> WireMessage:
        with self._recv_lock:
            self._sock.settimeout(timeout)
            prefix = self._read_exact(4, "length")
            (frame_len,) = struct.unpack("<I", prefix)
            body = self._read_exact(frame_len, "frame")
        return decode(prefix + body)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpServerEndpoint:
    """Listening endpoint for a server role; clients are identified by
    the hello frame they send after connecting."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._channels: dict[str, SocketChannel] = {}
        self.clock = SimClock()  # virtual timing is an in-process feature

    def session_view(self) -> "TcpServerEndpoint":
        return self

    def wait_for_clients(self, n_clients: int, timeout: float = DEFAULT_TIMEOUT) -> None:
        self._listener.settimeout(timeout)
        while len(self._channels) < n_clients:
            conn, _ = self._listener.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            channel = SocketChannel(conn)
            hello = channel.recv(timeout)
            if hello.kind != Kind.HELLO:
                raise FramingError(f"expected hello frame, got {Kind(hello.kind).name}")
            self._channels[f"client/{hello.client_id}"] = channel

    def send(self, peer: str, msg: WireMessage) -> None:
        self._channels[peer].send(msg)

    def recv(self, peer: str, timeout: float | None = DEFAULT_TIMEOUT) -> WireMessage:
        return self._channels[peer].recv(timeout)

    def close_to(self, peer: str) -> None:
        if peer in self._channels:
            self._channels[peer].close()

    def close(self) -> None:
        for channel in self._channels.values():
            channel.close()
        self._listener.close()


class TcpClientEndpoint:
    """Client endpoint holding one connection per server role."""

    def __init__(self, client_id: int, servers: dict[str, tuple[str, int]]):
        self.client_id = client_id
        self._channels: dict[str, SocketChannel] = {}
        self.clock = SimClock()
        for role, (host, port) in servers.items():
            sock = socket.create_connection((host, port))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            channel = SocketChannel(sock)
            channel.send(WireMessage(Kind.HELLO, client_id=client_id))
            self._channels[role] = channel

    def send(self, peer: str, msg: WireMessage) -> None:
        self._channels[peer].send(msg)

    def recv(self, peer: str, timeout: float | None = DEFAULT_TIMEOUT) -> WireMessage:
        return self._channels[peer].recv(timeout)

    def close_to(self, peer: str) -> None:
        if peer in self._channels:
            self._channels[peer].close()

    def close(self) -> None:
        for channel in self._channels.values():
            channel.close()
