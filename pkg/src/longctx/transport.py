"""Ring transports and the fixed wire format for key/value frames.

A frame carries one rank's key and value block plus its provenance (origin
rank, hop count, global token range).  The wire layout is byte-exact:

    u32  frame length (bytes after this field)
    u8   message type (1 = key/value block)
    u16  origin rank
    u16  hop count
    u64  range start
    u64  range end
    f32[] key block, then value block, little-endian

All integers are little-endian.  The in-process transport moves frame
objects through per-rank mailboxes and is advanced round-robin by a
single-threaded driver; the TCP transport moves encoded bytes over
localhost sockets, one link per ring edge, and is driven by one thread per
rank.  Both produce bitwise identical attention results because the per-rank
compute sequence is the same.
"""

from __future__ import annotations

import dataclasses
import select
import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FrameFormatError, RingBrokenError

MSG_KV = 1

_HEADER = struct.Struct("<BHHQQ")
_LENGTH = struct.Struct("<I")


@dataclass
class RingFrame:
    """One rank's key/value block in flight around the ring."""

    origin_rank: int
    hop: int
    start: int
    end: int
    k_block: np.ndarray  # (heads, end - start, head_dim) float32
    v_block: np.ndarray

    def advanced(self) -> "RingFrame":
        return dataclasses.replace(self, hop=self.hop + 1)


def encode_frame(frame: RingFrame) -> bytes:
    """Serialize a frame to the wire layout, length prefix included."""
    k_bytes = np.ascontiguousarray(frame.k_block, dtype="<f4").tobytes()
    v_bytes = np.ascontiguousarray(frame.v_block, dtype="<f4").tobytes()
    body = _HEADER.pack(MSG_KV, frame.origin_rank, frame.hop, frame.start, frame.end)
    body += k_bytes + v_bytes
    return _LENGTH.pack(len(body)) + body


def decode_frame(data: bytes, n_heads: int, head_dim: int) -> RingFrame:
    """Parse one encoded frame; the declared range fixes the block shape."""
    if len(data) < _LENGTH.size + _HEADER.size:
        raise FrameFormatError(f"frame of {len(data)} bytes is shorter than the header")
    (length,) = _LENGTH.unpack_from(data, 0)
    if length != len(data) - _LENGTH.size:
        raise FrameFormatError(f"declared length {length} != payload {len(data) - _LENGTH.size}")
    msg_type, origin, hop, start, end = _HEADER.unpack_from(data, _LENGTH.size)
    if msg_type != MSG_KV:
        raise FrameFormatError(f"unknown message type {msg_type}")
    if end < start:
        raise FrameFormatError(f"inverted range [{start}, {end})")
    tokens = end - start
    expect = 2 * n_heads * tokens * head_dim * 4
    payload = data[_LENGTH.size + _HEADER.size :]
    if len(payload) != expect:
        raise FrameFormatError(f"payload of {len(payload)} bytes, expected {expect}")
    half = len(payload) // 2
    shape = (n_heads, tokens, head_dim)
    k_block = np.frombuffer(payload[:half], dtype="<f4").reshape(shape).copy()
    v_block = np.frombuffer(payload[half:], dtype="<f4").reshape(shape).copy()
    return RingFrame(origin_rank=origin, hop=hop, start=start, end=end,
                     k_block=k_block, v_block=v_block)


class SteppedRing:
    """In-process mailboxes advanced round-robin by a single-threaded driver.

    ``send`` on rank r deposits into rank r+1's mailbox; the driver performs
    every send of a hop before any receive, so mailboxes never starve unless
    a worker has been dropped.
    """

    requires_threads = False

    def __init__(self, world_size: int):
        if world_size < 1:
            raise ConfigError(f"world_size must be positive, got {world_size}")
        self.world_size = world_size
        self.mailboxes = [deque() for _ in range(world_size)]
        self.frames_sent = 0

    def send(self, src_rank: int, frame: RingFrame) -> None:
        self.frames_sent += 1
        self.mailboxes[(src_rank + 1) % self.world_size].append(frame)

    def recv(self, dst_rank: int) -> RingFrame:
        box = self.mailboxes[dst_rank]
        if not box:
            dead = (dst_rank - 1) % self.world_size
            raise RingBrokenError(dead, f"worker {dst_rank} got nothing from worker {dead}")
        return box.popleft()

    def close(self) -> None:
        pass


class DroppedRankRing(SteppedRing):
    """Fault injection: one rank silently stops sending."""

    def __init__(self, world_size: int, dead_rank: int):
        super().__init__(world_size)
        self.dead_rank = dead_rank

    def send(self, src_rank: int, frame: RingFrame) -> None:
        if src_rank == self.dead_rank:
            return
        super().send(src_rank, frame)

    def recv(self, dst_rank: int) -> RingFrame:
        box = self.mailboxes[dst_rank]
        if not box:
            raise RingBrokenError(self.dead_rank)
        return box.popleft()


@dataclass
class TraceRecord:
    src_rank: int
    dst_rank: int
    origin_rank: int
    hop: int
    encoded: bytes
    frame: RingFrame


class TracingRing(SteppedRing):
    """In-process transport that records every frame it carries, encoded."""

    def __init__(self, world_size: int):
        super().__init__(world_size)
        self.records: list[TraceRecord] = []

    def send(self, src_rank: int, frame: RingFrame) -> None:
        self.records.append(
            TraceRecord(
                src_rank=src_rank,
                dst_rank=(src_rank + 1) % self.world_size,
                origin_rank=frame.origin_rank,
                hop=frame.hop,
                encoded=encode_frame(frame),
                frame=frame,
            )
        )
        super().send(src_rank, frame)


class TcpChannel:
    """One rank's pair of ring links: send to the next rank, receive from the previous.

    Every rank sends a frame and then waits for one, so with blocking writes
    two neighbors could both stall in ``send`` once kernel buffers fill.
    Sends are therefore buffered and drained while waiting for inbound bytes.
    """

    def __init__(self, ring: "TcpRing", rank: int):
        self.ring = ring
        self.rank = rank
        self.prev_rank = (rank - 1) % ring.world_size
        self.next_rank = (rank + 1) % ring.world_size
        self.send_sock = socket.create_connection(("127.0.0.1", ring.ports[self.next_rank]))
        self.send_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.send_sock.setblocking(False)
        self.recv_sock, _ = ring.listeners[rank].accept()
        self._pending = memoryview(b"")

    def _flush_some(self) -> None:
        while self._pending:
            try:
                sent = self.send_sock.send(self._pending)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as exc:
                raise RingBrokenError(
                    self.next_rank, f"worker {self.next_rank} link failed: {exc}"
                ) from exc
            self._pending = self._pending[sent:]

    def send(self, frame: RingFrame) -> None:
        while self._pending:
            select.select([], [self.send_sock], [])
            self._flush_some()
        self._pending = memoryview(encode_frame(frame))
        self._flush_some()
        self.ring.count_send()

    def _read_wire(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            writes = [self.send_sock] if self._pending else []
            readable, writable, _ = select.select([self.recv_sock], writes, [])
            if writable:
                self._flush_some()
            if readable:
                try:
                    chunk = self.recv_sock.recv(n - len(buf))
                except OSError as exc:
                    raise RingBrokenError(
                        self.prev_rank, f"worker {self.prev_rank} link failed: {exc}"
                    ) from exc
                if not chunk:
                    raise RingBrokenError(
                        self.prev_rank, f"worker {self.prev_rank} closed its link"
                    )
                buf += chunk
        return bytes(buf)

    def recv(self) -> RingFrame:
        prefix = self._read_wire(_LENGTH.size)
        (length,) = _LENGTH.unpack(prefix)
        body = self._read_wire(length)
        return decode_frame(prefix + body, self.ring.n_heads, self.ring.head_dim)

    def close(self) -> None:
        for sock in (self.send_sock, self.recv_sock):
            try:
                sock.close()
            except OSError:
                pass


class TcpRing:
    """Localhost TCP ring; rank r's send socket feeds rank r+1's listener.

    Listeners are bound eagerly so worker threads can connect in any order;
    each worker opens its channel lazily from its own thread.
    """

    requires_threads = True

    def __init__(self, world_size: int, n_heads: int, head_dim: int):
        if world_size < 1:
            raise ConfigError(f"world_size must be positive, got {world_size}")
        self.world_size = world_size
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.frames_sent = 0
        self._lock = threading.Lock()
        self.listeners = []
        self.ports = []
        for _ in range(world_size):
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.bind(("127.0.0.1", 0))
            listener.listen(2)
            self.listeners.append(listener)
            self.ports.append(listener.getsockname()[1])

    def count_send(self) -> None:
        with self._lock:
            self.frames_sent += 1

    def channel(self, rank: int) -> TcpChannel:
        return TcpChannel(self, rank)

    def close(self) -> None:
        for listener in self.listeners:
            try:
                listener.close()
            except OSError:
                pass

    def __enter__(self) -> "TcpRing":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
