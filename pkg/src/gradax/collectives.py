"""Process groups and collective operations.

Workers exchange length-prefixed frames over a transport::

    u32 length   (little-endian, counts tag + sequence + payload)
    u8  tag      REDUCE_CHUNK=1, GATHER_CHUNK=2, BARRIER=3, CONTROL=4
    u32 sequence (little-endian)
    payload      float32 LE for chunk frames, raw bytes otherwise

Two transports are provided: in-process queues (threads) and loopback TCP
sockets (threads or processes). Collectives on one group run one at a time;
each one takes the next sequence number, so every worker must issue them in
the same order.
"""
from __future__ import annotations

import logging
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

REDUCE_CHUNK = 1
GATHER_CHUNK = 2
BARRIER = 3
CONTROL = 4
TAG_NAMES = {REDUCE_CHUNK: "REDUCE_CHUNK", GATHER_CHUNK: "GATHER_CHUNK", BARRIER: "BARRIER", CONTROL: "CONTROL"}

HEADER = struct.Struct("<IBI")
DEFAULT_TIMEOUT = 30.0
DEFAULT_PORT_BASE = 29650
PORT_ENV = "GRADAX_PORT_BASE"


class CollectiveError(RuntimeError):
    pass


class ProtocolError(CollectiveError):
    pass


class CollectiveTimeout(CollectiveError):
    pass


class TransportError(CollectiveError):
    pass


def encode_frame(tag: int, seq: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(len(payload) + 5, tag, seq) + payload


def decode_frame(frame: bytes) -> tuple[int, int, bytes]:
    if len(frame) < HEADER.size:
        raise ProtocolError(f"short frame: {len(frame)} bytes")
    length, tag, seq = HEADER.unpack_from(frame)
    if length != len(frame) - 4:
        raise ProtocolError(f"frame length field {length} != {len(frame) - 4}")
    if tag not in TAG_NAMES:
        raise ProtocolError(f"unknown tag {tag}")
    return tag, seq, frame[HEADER.size:]


def _f32_bytes(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype="<f4").tobytes()


def _f32_array(b: bytes) -> np.ndarray:
    return np.frombuffer(b, dtype="<f4").astype(np.float32)


# --------------------------------------------------------------------------
# transports


class InProcHub:
    """Shared mailboxes for ``world_size`` in-process workers."""

    def __init__(self, world_size: int):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        self.world_size = world_size
        self.queues = [[queue.Queue() for _ in range(world_size)] for _ in range(world_size)]
        self.wire_log: list[list[bytes]] | None = None

    def record_wire(self):
        self.wire_log = [[] for _ in range(self.world_size)]

    def transport(self, rank: int) -> "InProcTransport":
        return InProcTransport(self, rank)


class InProcTransport:
    kind = "inproc"

    def __init__(self, hub: InProcHub, rank: int):
        self.hub = hub
        self.rank = rank

    def send(self, dst: int, frame: bytes) -> None:
        if self.hub.wire_log is not None:
            self.hub.wire_log[self.rank].append(frame)
        self.hub.queues[self.rank][dst].put(frame)

    def recv_frame(self, src: int, timeout: float) -> bytes:
        try:
            return self.hub.queues[src][self.rank].get(timeout=timeout)
        except queue.Empty:
            raise CollectiveTimeout(f"rank {self.rank}: no frame from rank {src} within {timeout}s") from None

    def close(self) -> None:
        pass


def port_base() -> int:
    return int(os.environ.get(PORT_ENV, DEFAULT_PORT_BASE))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n:
        b = sock.recv(n)
        if not b:
            raise ConnectionError("peer closed")
        chunks.append(b)
        n -= len(b)
    return b"".join(chunks)


class TcpTransport:
    """Full mesh of loopback sockets; rank i listens on ``base + i``.

    Lower ranks accept, higher ranks connect, and the connector announces its
    rank with a 4-byte little-endian integer.
    """

    kind = "tcp"

    def __init__(self, rank: int, world_size: int, base: int | None = None,
                 host: str = "127.0.0.1", timeout: float = DEFAULT_TIMEOUT):
        self.rank = rank
        self.world_size = world_size
        self.base = port_base() if base is None else base
        self.host = host
        self.inbound = [queue.Queue() for _ in range(world_size)]
        self.socks: dict[int, socket.socket] = {}
        self.locks: dict[int, threading.Lock] = {}
        self._closed = False
        self._connect(timeout)
        for peer, s in self.socks.items():
            self.locks[peer] = threading.Lock()
            threading.Thread(target=self._reader, args=(peer, s), daemon=True).start()

    def _connect(self, timeout):
        deadline = time.monotonic() + timeout
        n_accept = self.world_size - 1 - self.rank
        listener = None
        if n_accept:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                listener.bind((self.host, self.base + self.rank))
            except OSError as e:
                raise TransportError(f"rank {self.rank}: cannot bind port {self.base + self.rank}: {e}") from e
            listener.listen(self.world_size)
        try:
            for peer in range(self.rank):
                while True:
                    try:
                        s = socket.create_connection((self.host, self.base + peer), timeout=1.0)
                        break
                    except OSError:
                        if time.monotonic() > deadline:
                            raise TransportError(f"rank {self.rank}: cannot reach rank {peer}") from None
                        time.sleep(0.05)
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(struct.pack("<I", self.rank))
                self.socks[peer] = s
            for _ in range(n_accept):
                listener.settimeout(max(0.01, deadline - time.monotonic()))
                try:
                    s, _addr = listener.accept()
                except socket.timeout:
                    raise TransportError(f"rank {self.rank}: peers did not connect in time") from None
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                (peer,) = struct.unpack("<I", _recv_exact(s, 4))
                self.socks[peer] = s
        finally:
            if listener is not None:
                listener.close()

    def _reader(self, peer: int, s: socket.socket):
        try:
            while True:
                head = _recv_exact(s, 4)
                (length,) = struct.unpack("<I", head)
                self.inbound[peer].put(head + _recv_exact(s, length))
        except (ConnectionError, OSError):
            if not self._closed:
                log.debug("rank %d: connection to %d closed", self.rank, peer)

    def send(self, dst: int, frame: bytes) -> None:
        try:
            with self.locks[dst]:
                self.socks[dst].sendall(frame)
        except OSError as e:
            raise TransportError(f"rank {self.rank}: send to {dst} failed: {e}") from e

    def recv_frame(self, src: int, timeout: float) -> bytes:
        try:
            return self.inbound[src].get(timeout=timeout)
        except queue.Empty:
            raise CollectiveTimeout(f"rank {self.rank}: no frame from rank {src} within {timeout}s") from None

    def close(self) -> None:
        self._closed = True
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()


# --------------------------------------------------------------------------
# traffic accounting


@dataclass
class CollectiveRecord:
    op: str
    stream: str
    elements: int  # logical payload size (elements for reals, bytes for all_gather)
    bytes_sent: int
    bytes_received: int


@dataclass
class TrafficStats:
    bytes_sent: int = 0
    bytes_received: int = 0
    frame_bytes_sent: int = 0  # headers and control frames included
    launch_count: int = 0
    records: list[CollectiveRecord] = field(default_factory=list)

    @property
    def elements_sent(self) -> float:
        return self.bytes_sent / 4

    def elements_by_stream(self, op: str | None = None) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            if op is None or r.op == op:
                out[r.stream] = out.get(r.stream, 0) + r.elements
        return out

    def copy(self) -> "TrafficStats":
        return TrafficStats(self.bytes_sent, self.bytes_received, self.frame_bytes_sent,
                            self.launch_count, list(self.records))


# --------------------------------------------------------------------------
# process group


class ProcessGroup:
    def __init__(self, rank: int, world_size: int, transport=None, timeout: float = DEFAULT_TIMEOUT):
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside world of size {world_size}")
        if world_size > 1 and transport is None:
            raise ValueError("a transport is required when world_size > 1")
        self.rank = rank
        self.world_size = world_size
        self.transport = transport
        self.timeout = timeout
        self.next_op_sequence = 0
        self._stats = TrafficStats()
        self._stash: dict[int, list[tuple[int, int, bytes]]] = {}
        self._lock = threading.RLock()

    @property
    def transport_kind(self) -> str:
        return "none" if self.transport is None else self.transport.kind

    # -- low level

    def _send(self, dst: int, tag: int, seq: int, payload: bytes = b"", data: bool = True) -> None:
        frame = encode_frame(tag, seq, payload)
        self.transport.send(dst, frame)
        self._stats.frame_bytes_sent += len(frame)
        if data:
            self._op_sent += len(payload)

    def _recv(self, src: int, tag: int, seq: int, data: bool = True) -> bytes:
        stash = self._stash.setdefault(src, [])
        for i, (t, s, payload) in enumerate(stash):
            if s == seq:
                del stash[i]
                return self._check(src, t, tag, seq, payload, data)
        deadline = time.monotonic() + self.timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise CollectiveTimeout(f"rank {self.rank}: timed out waiting for rank {src} (seq {seq})")
            t, s, payload = decode_frame(self.transport.recv_frame(src, remaining))
            if s == seq:
                return self._check(src, t, tag, seq, payload, data)
            if s < seq:
                raise ProtocolError(f"rank {self.rank}: stale frame seq {s} from rank {src}, expected {seq}")
            stash.append((t, s, payload))

    def _check(self, src, got_tag, tag, seq, payload, data):
        if got_tag != tag:
            raise ProtocolError(
                f"rank {self.rank}: expected {TAG_NAMES[tag]} from rank {src} at seq {seq}, got {TAG_NAMES[got_tag]}")
        if data:
            self._op_recv += len(payload)
        return payload

    def _begin(self) -> int:
        seq = self.next_op_sequence
        self.next_op_sequence += 1
        self._op_sent = 0
        self._op_recv = 0
        return seq

    def _finish(self, op: str, stream: str, elements: int) -> None:
        st = self._stats
        st.bytes_sent += self._op_sent
        st.bytes_received += self._op_recv
        st.launch_count += 1
        st.records.append(CollectiveRecord(op, stream, elements, self._op_sent, self._op_recv))

    # -- collectives

    def ring_all_reduce(self, buffer, stream: str = "dense-stream") -> np.ndarray:
        """Element-wise SUM over workers via reduce-scatter then all-gather.

        The buffer is zero-padded to a multiple of p, split into p chunks, and
        each worker sends 2(p-1) chunks to its ring successor.
        """
        x = np.array(buffer, dtype=np.float32).reshape(-1)
        with self._lock:
            seq = self._begin()
            p, r, n = self.world_size, self.rank, x.size
            if p == 1:
                self._finish("all_reduce", stream, n)
                return x
            nxt, prv = (r + 1) % p, (r - 1) % p
            self._send(nxt, CONTROL, seq, struct.pack("<I", n), data=False)
            (n_prev,) = struct.unpack("<I", self._recv(prv, CONTROL, seq, data=False))
            if n_prev != n:
                raise ProtocolError(f"rank {r}: buffer length {n} but rank {prv} has {n_prev}")
            c = -(-n // p)
            work = np.zeros(c * p, dtype=np.float32)
            work[:n] = x
            chunks = work.reshape(p, c)
            for s in range(p - 1):
                self._send(nxt, REDUCE_CHUNK, seq, _f32_bytes(chunks[(r - s) % p]))
                idx = (r - s - 1) % p
                chunks[idx] += _f32_array(self._recv(prv, REDUCE_CHUNK, seq))
            for s in range(p - 1):
                self._send(nxt, GATHER_CHUNK, seq, _f32_bytes(chunks[(r + 1 - s) % p]))
                idx = (r - s) % p
                chunks[idx] = _f32_array(self._recv(prv, GATHER_CHUNK, seq))
            self._finish("all_reduce", stream, n)
            return work[:n].copy()

    def all_gather(self, payload: bytes, stream: str = "dense-stream") -> list[bytes]:
        """Every worker receives every worker's payload, ordered by rank."""
        payload = bytes(payload)
        with self._lock:
            seq = self._begin()
            p, r = self.world_size, self.rank
            for k in range(1, p):
                self._send((r + k) % p, GATHER_CHUNK, seq, payload)
            out: list[bytes] = [b""] * p
            out[r] = payload
            for k in range(1, p):
                src = (r - k) % p
                out[src] = self._recv(src, GATHER_CHUNK, seq)
            self._finish("all_gather", stream, len(payload))
            return out

    def reference_reduce(self, buffer, stream: str = "dense-stream") -> np.ndarray:
        """Rank 0 sums all buffers in rank order in float64 and broadcasts."""
        x = np.array(buffer, dtype=np.float32).reshape(-1)
        with self._lock:
            seq = self._begin()
            p, r = self.world_size, self.rank
            if p == 1:
                self._finish("reference_reduce", stream, x.size)
                return x
            if r == 0:
                acc = x.astype(np.float64)
                for src in range(1, p):
                    other = _f32_array(self._recv(src, REDUCE_CHUNK, seq))
                    if other.size != x.size:
                        raise ProtocolError(f"rank 0: buffer length {x.size} but rank {src} has {other.size}")
                    acc += other
                out = acc.astype(np.float32)
                for dst in range(1, p):
                    self._send(dst, GATHER_CHUNK, seq, _f32_bytes(out))
            else:
                self._send(0, REDUCE_CHUNK, seq, _f32_bytes(x))
                out = _f32_array(self._recv(0, GATHER_CHUNK, seq))
                if out.size != x.size:
                    raise ProtocolError(f"rank {r}: buffer length {x.size} but result has {out.size}")
            self._finish("reference_reduce", stream, x.size)
            return out

    def barrier(self) -> None:
        with self._lock:
            seq = self.next_op_sequence
            self.next_op_sequence += 1
            if self.world_size == 1:
                return
            if self.rank == 0:
                for src in range(1, self.world_size):
                    self._recv(src, BARRIER, seq, data=False)
                for dst in range(1, self.world_size):
                    self._send(dst, BARRIER, seq, data=False)
            else:
                self._send(0, BARRIER, seq, data=False)
                self._recv(0, BARRIER, seq, data=False)

    # -- accounting

    def traffic_report(self) -> TrafficStats:
        return self._stats.copy()

    def reset_traffic(self) -> None:
        self._stats = TrafficStats()

    def close(self) -> None:
        if self.transport is not None:
            self.transport.close()


def inproc_groups(world_size: int, timeout: float = DEFAULT_TIMEOUT, hub: InProcHub | None = None) -> list[ProcessGroup]:
    hub = hub or InProcHub(world_size)
    return [ProcessGroup(r, world_size, hub.transport(r) if world_size > 1 else None, timeout)
            for r in range(world_size)]


def run_workers(groups: Sequence[ProcessGroup], fn: Callable, *args, join_timeout: float | None = None):
    """Run ``fn(group, *args)`` on one thread per group and return results by rank.

    The first exception raised by any worker is re-raised here.
    """
    results = [None] * len(groups)
    errors: list[BaseException | None] = [None] * len(groups)

    def body(i):
        try:
            results[i] = fn(groups[i], *args)
        except BaseException as e:  # noqa: BLE001 - reported to the caller
            errors[i] = e

    if len(groups) == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(i,), daemon=True) for i in range(len(groups))]
        for t in threads:
            t.start()
        for t in threads:
            t.join(join_timeout)
    # a timeout on one rank usually cascades; report the root cause first
    primary = [e for e in errors if e is not None and not isinstance(e, CollectiveTimeout)]
    for e in primary or [e for e in errors if e is not None]:
        raise e
    return results
