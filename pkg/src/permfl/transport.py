"""Envelope framing and the concatenate-and-forward hub.

The hub sees only framed envelopes. It reads the plaintext header to route
by round, counts bytes, and forwards; it holds no key and never calls into
decryption. Two hubs share one round loop: an in-process loopback for
deterministic tests and a TCP hub for multi-process runs.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from permfl.secenv import HEADER_BYTES, MAGIC, NONCE_BYTES, TAG_BYTES, VERSION, Envelope, Header

log = logging.getLogger(__name__)

MAX_FRAME_PAYLOAD = 64 * 2**20
HELLO = struct.Struct("<4sI")  # b"PFH1", client id
HELLO_MAGIC = b"PFH1"


class FramingError(ValueError):
    """Bytes on the wire are not a valid envelope frame."""


class ProtocolError(RuntimeError):
    """A peer sent a frame for the wrong round or client."""


class RoundAborted(RuntimeError):
    """A client disconnected before the round completed."""


def frame_encode(env: Envelope) -> bytes:
    return env.to_bytes()


def frame_decode(buf: bytes | bytearray | memoryview) -> tuple[Envelope, int] | None:
    """Decode one frame from the front of ``buf``.

    Returns ``(envelope, bytes_consumed)``, or ``None`` if ``buf`` does not yet
    hold a complete frame.
    """
    if len(buf) < HEADER_BYTES:
        if bytes(buf[: min(len(buf), 4)]) != MAGIC[: min(len(buf), 4)]:
            raise FramingError("bad frame magic")
        return None
    try:
        header = Header.from_bytes(bytes(buf[:HEADER_BYTES]))
    except ValueError as exc:
        raise FramingError(str(exc)) from None
    if header.version != VERSION:
        raise FramingError(f"unsupported envelope version {header.version}")
    if header.payload_length > MAX_FRAME_PAYLOAD:
        raise FramingError(f"declared payload of {header.payload_length} bytes exceeds the 64 MiB cap")
    total = HEADER_BYTES + NONCE_BYTES + TAG_BYTES + header.payload_length
    if len(buf) < total:
        return None
    off = HEADER_BYTES
    nonce = bytes(buf[off : off + NONCE_BYTES])
    off += NONCE_BYTES
    tag = bytes(buf[off : off + TAG_BYTES])
    off += TAG_BYTES
    return Envelope(header, nonce, tag, bytes(buf[off:total])), total


class FrameDecoder:
    """Incremental decoder for a byte stream of back-to-back frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[Envelope, bytes]]:
        """Append ``data``; return every completed ``(envelope, raw frame)``."""
        self._buf += data
        out = []
        while True:
            got = frame_decode(self._buf)
            if got is None:
                return out
            env, used = got
            out.append((env, bytes(self._buf[:used])))
            del self._buf[:used]

    @property
    def pending(self) -> int:
        return len(self._buf)


# --------------------------------------------------------------------------
# hub


@dataclass
class HubCounters:
    up: dict[int, int] = field(default_factory=dict)
    down: dict[int, int] = field(default_factory=dict)

    def add_up(self, client: int, nbytes: int) -> None:
        self.up[client] = self.up.get(client, 0) + nbytes

    def add_down(self, client: int, nbytes: int) -> None:
        self.down[client] = self.down.get(client, 0) + nbytes


Inbound = tuple[int, bytes | None]  # (connection id, raw frame) or (id, None) on disconnect


class Hub:
    """Round loop shared by the loopback and TCP hubs.

    ``mode="eager"`` forwards each frame to every client the moment it
    arrives; ``mode="barrier"`` holds the round's frames until all ``n`` are in.
    """

    def __init__(self, n: int, mode: str = "eager") -> None:
        if n < 1:
            raise ValueError("hub needs at least one client")
        if mode not in ("eager", "barrier"):
            raise ValueError(f"unknown forwarding mode {mode!r}")
        self.n = n
        self.mode = mode
        self.counters = HubCounters()
        self.inbox: queue.Queue[Inbound] = queue.Queue()

    # transports override these two
    def _deliver(self, client: int, frame: bytes) -> None:
        raise NotImplementedError

    def _abort(self) -> None:
        pass

    def _broadcast(self, frame: bytes) -> None:
        for j in range(self.n):
            self._deliver(j, frame)
            self.counters.add_down(j, len(frame))

    def hub_round(self, k: int, timeout: float | None = None) -> bytes:
        """Collect one frame per client for round ``k``; return their concatenation."""
        got: dict[int, bytes] = {}
        order: list[bytes] = []
        while len(got) < self.n:
            try:
                conn, frame = self.inbox.get(timeout=timeout)
            except queue.Empty:
                self._abort()
                raise RoundAborted(f"round {k}: timed out with {len(got)}/{self.n} frames") from None
            if frame is None:
                self._abort()
                raise RoundAborted(f"round {k}: client {conn} disconnected")
            header = Header.from_bytes(frame[:HEADER_BYTES])
            if header.round != k or header.client_id != conn or conn in got:
                self._abort()
                raise ProtocolError(
                    f"round {k}: connection {conn} sent round {header.round} for client {header.client_id}"
                )
            got[conn] = frame
            order.append(frame)
            self.counters.add_up(conn, len(frame))
            if self.mode == "eager":
                self._broadcast(frame)
        if self.mode == "barrier":
            for frame in order:
                self._broadcast(frame)
        return b"".join(order)

    def serve(self, rounds: int, timeout: float | None = None) -> None:
        for k in range(rounds):
            self.hub_round(k, timeout)


class LoopbackHub(Hub):
    """In-process hub; each client endpoint is a pair of queues."""

    def __init__(self, n: int, mode: str = "eager") -> None:
        super().__init__(n, mode)
        self.outboxes: list[queue.Queue[bytes]] = [queue.Queue() for _ in range(n)]

    def _deliver(self, client: int, frame: bytes) -> None:
        self.outboxes[client].put(frame)

    def endpoint(self, client: int) -> "LoopbackEndpoint":
        return LoopbackEndpoint(self, client)


class LoopbackEndpoint:
    def __init__(self, hub: LoopbackHub, client: int) -> None:
        self.hub = hub
        self.client = client

    def send(self, env: Envelope) -> None:
        self.hub.inbox.put((self.client, frame_encode(env)))

    def recv(self, timeout: float | None = None) -> Envelope:
        frame = self.hub.outboxes[self.client].get(timeout=timeout)
        env, _ = frame_decode(frame)
        return env

    def close(self) -> None:
        pass


def parse_address(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed during handshake")
        buf += chunk
    return bytes(buf)


class TcpHub(Hub):
    """Hub over TCP; one reader thread per client connection."""

    def __init__(self, n: int, mode: str = "eager", host: str = "127.0.0.1", port: int = 0) -> None:
        super().__init__(n, mode)
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._conns: dict[int, socket.socket] = {}
        self._locks: dict[int, threading.Lock] = {}
        self._threads: list[threading.Thread] = []

    def accept_all(self, timeout: float | None = None) -> None:
        self._listener.settimeout(timeout)
        while len(self._conns) < self.n:
            sock, _ = self._listener.accept()
            sock.settimeout(None)
            magic, cid = HELLO.unpack(_read_exact(sock, HELLO.size))
            if magic != HELLO_MAGIC or not 0 <= cid < self.n or cid in self._conns:
                sock.close()
                raise ProtocolError(f"bad hello from a client claiming id {cid}")
            self._conns[cid] = sock
            self._locks[cid] = threading.Lock()
            t = threading.Thread(target=self._reader, args=(cid, sock), daemon=True)
            t.start()
            self._threads.append(t)
        self._listener.close()

    def _reader(self, cid: int, sock: socket.socket) -> None:
        dec = FrameDecoder()
        try:
            while True:
                data = sock.recv(1 << 16)
                if not data:
                    break
                for _, raw in dec.feed(data):
                    self.inbox.put((cid, raw))
        except (OSError, FramingError) as exc:
            log.warning("connection %d: %s", cid, exc)
        self.inbox.put((cid, None))

    def _deliver(self, client: int, frame: bytes) -> None:
        with self._locks[client]:  # a frame's bytes never interleave with another's
            self._conns[client].sendall(frame)

    def _abort(self) -> None:
        self.close()

    def close(self) -> None:
        for sock in self._conns.values():
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


class TcpEndpoint:
    """Client side of a :class:`TcpHub` connection."""

    def __init__(self, address: tuple[str, int], client: int, timeout: float | None = 30.0) -> None:
        self.client = client
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.settimeout(None)
        self.sock.sendall(HELLO.pack(HELLO_MAGIC, client))
        self._dec = FrameDecoder()
        self._ready: list[Envelope] = []

    def send(self, env: Envelope) -> None:
        self.sock.sendall(frame_encode(env))

    def recv(self, timeout: float | None = None) -> Envelope:
        self.sock.settimeout(timeout)
        while not self._ready:
            data = self.sock.recv(1 << 16)
            if not data:
                raise RoundAborted("hub closed the connection")
            self._ready.extend(env for env, _ in self._dec.feed(data))
        return self._ready.pop(0)

    def close(self) -> None:
        self.sock.close()


def connect_with_retry(address: tuple[str, int], client: int, attempts: int = 100,
                       delay: float = 0.05) -> TcpEndpoint:
    """Connect, retrying while the hub process is still starting up."""
    import time

    last: Exception | None = None
    for _ in range(attempts):
        try:
            return TcpEndpoint(address, client)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise ConnectionError(f"could not reach hub at {address[0]}:{address[1]}") from last


def run_loopback(n: int, rounds: int, client_loop: Callable[[LoopbackEndpoint], None],
                 mode: str = "eager", timeout: float = 60.0) -> LoopbackHub:
    """Drive ``n`` client threads against an in-process hub for ``rounds`` rounds."""
    hub = LoopbackHub(n, mode)
    errors: list[BaseException] = []

    def wrap(ep: LoopbackEndpoint) -> None:
        try:
            client_loop(ep)
        except BaseException as exc:  # surfaced in the calling thread
            errors.append(exc)
            hub.inbox.put((ep.client, None))

    threads = [threading.Thread(target=wrap, args=(hub.endpoint(i),), daemon=True) for i in range(n)]
    for t in threads:
        t.start()
    try:
        hub.serve(rounds, timeout)
    except RoundAborted:
        if errors:
            raise errors[0]
        raise
    for t in threads:
        t.join(timeout)
    if errors:
        raise errors[0]
    return hub


def frames_total(frames: Iterable[bytes]) -> int:
    return sum(len(f) for f in frames)
