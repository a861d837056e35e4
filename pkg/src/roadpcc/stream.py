"""Real-time streaming of compressed frames over a reliable byte stream.

Wire protocol (integers little-endian)::

    publisher  -> subscriber   b"PC3S" + u8 version (1)
    subscriber -> publisher    u8 ack: 1 accept, 0 refuse
    publisher  -> subscriber   PC3D frames, back to back
    publisher  -> subscriber   terminator: a PC3D header with payload_len 0,
                               codec_id 0, frame_id = frames sent,
                               timestamp_ns = frames skipped (dropped by
                               backpressure or failed to encode),
                               n_points_original = frames that missed the
                               encode deadline

The publisher runs a two-stage pipeline: a producer thread paces the source
at ``fps`` and encodes, the calling thread transmits. At most
:data:`MAX_BUFFERED` encoded frames wait for transmission; when the buffer
is full the oldest waiting frame is dropped and counted.
"""

from __future__ import annotations

import logging
import math
import socket
import struct
import threading
import time
from collections import deque
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, fields

from roadpcc import codecs
from roadpcc.codecs import CodecConfig
from roadpcc.core import PointCloud, SensorModel
from roadpcc.errors import (
    BadMagic,
    BindFailure,
    ConnectFailure,
    CrcMismatch,
    HandshakeFailure,
    PccError,
)
from roadpcc.io import (
    HEADER_SIZE,
    CompressedFrame,
    FrameHeader,
    pack_frame,
    pack_header,
    unpack_frame,
    unpack_header,
)

log = logging.getLogger(__name__)

STREAM_MAGIC = b"PC3S"
STREAM_VERSION = 1
_HANDSHAKE = struct.Struct("<4sB")
ACK_OK = 1
ACK_REFUSE = 0
MAX_BUFFERED = 2
DEADLINE_TOLERANCE = 0.25
_CRC_SIZE = 4


class ConnectionClosed(PccError, EOFError):
    """The peer closed the stream mid-message."""


# -- transports -----------------------------------------------------------


class SocketTransport:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock

    def send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise ConnectionClosed(f"peer closed after {len(buf)} of {n} bytes")
            buf += chunk
        return bytes(buf)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class _Channel:
    def __init__(self) -> None:
        self.buf = bytearray()
        self.closed = False
        self.cond = threading.Condition()


class PipeEnd:
    """One end of an in-memory duplex byte stream."""

    def __init__(self, rx: _Channel, tx: _Channel) -> None:
        self._rx = rx
        self._tx = tx

    def send(self, data: bytes) -> None:
        with self._tx.cond:
            if self._tx.closed:
                raise BrokenPipeError("pipe closed")
            self._tx.buf += data
            self._tx.cond.notify_all()

    def recv_exact(self, n: int) -> bytes:
        with self._rx.cond:
            while len(self._rx.buf) < n and not self._rx.closed:
                self._rx.cond.wait()
            if len(self._rx.buf) < n:
                raise ConnectionClosed(f"peer closed after {len(self._rx.buf)} of {n} bytes")
            out = bytes(self._rx.buf[:n])
            del self._rx.buf[:n]
            return out

    def close(self) -> None:
        for ch in (self._tx, self._rx):
            with ch.cond:
                ch.closed = True
                ch.cond.notify_all()


def memory_pipe() -> tuple[PipeEnd, PipeEnd]:
    a, b = _Channel(), _Channel()
    return PipeEnd(a, b), PipeEnd(b, a)


# -- publisher ------------------------------------------------------------


@dataclass
class PublishReport:
    frames_sent: int = 0
    frames_dropped: int = 0
    encode_errors: int = 0
    late_frames: int = 0

    @property
    def frames_skipped(self) -> int:
        return self.frames_dropped + self.encode_errors


def terminator(report: PublishReport) -> bytes:
    return pack_header(
        FrameHeader(0, report.frames_sent, report.frames_skipped, report.late_frames, 0)
    )


def publish(
    transport,
    source: Iterable[PointCloud],
    encode: Callable[[PointCloud], CompressedFrame],
    fps: float,
    *,
    max_buffered: int = MAX_BUFFERED,
) -> PublishReport:
    """Handshake, then stream ``source`` at ``fps`` and send the terminator."""
    if not fps > 0:
        raise ValueError("fps must be positive")
    transport.send(_HANDSHAKE.pack(STREAM_MAGIC, STREAM_VERSION))
    try:
        (ack,) = transport.recv_exact(1)
    except ConnectionClosed:
        raise HandshakeFailure("subscriber closed during handshake") from None
    if ack != ACK_OK:
        raise HandshakeFailure(f"subscriber refused the stream (ack={ack})")

    period = 1.0 / fps
    report = PublishReport()
    pending: deque[CompressedFrame] = deque()
    cond = threading.Condition()
    state = {"done": False, "stop": False, "error": None}

    def produce() -> None:
        t0 = time.monotonic()
        try:
            for i, cloud in enumerate(source):
                delay = t0 + i * period - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
                with cond:
                    if state["stop"]:
                        return
                start = time.monotonic()
                try:
                    frame = encode(cloud)
                except PccError as exc:
                    log.warning("frame %d failed to encode: %s", cloud.frame_id, exc)
                    with cond:
                        report.encode_errors += 1
                    continue
                late = time.monotonic() - start > period
                with cond:
                    if len(pending) >= max_buffered:
                        pending.popleft()
                        report.frames_dropped += 1
                    pending.append(frame)
                    report.late_frames += late
                    cond.notify_all()
        except BaseException as exc:  # surfaced to the caller below
            state["error"] = exc
        finally:
            with cond:
                state["done"] = True
                cond.notify_all()

    worker = threading.Thread(target=produce, name="pc3s-encoder", daemon=True)
    worker.start()
    try:
        while True:
            with cond:
                while not pending and not state["done"]:
                    cond.wait()
                if not pending:
                    break
                frame = pending.popleft()
            transport.send(pack_frame(frame))
            with cond:
                report.frames_sent += 1
    except BaseException:
        with cond:
            state["stop"] = True
        raise
    finally:
        worker.join()
    if state["error"] is not None:
        raise state["error"]
    transport.send(terminator(report))
    return report


# -- subscriber -----------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    max_kb: float = 105.0
    min_fps: float = 10.0

    def __post_init__(self) -> None:
        if not (self.max_kb > 0 and self.min_fps > 0):
            raise ValueError("budget values must be positive")


@dataclass(frozen=True)
class StreamStats:
    """Subscriber-side view of one stream.

    Frame sizes are payload bytes. ``mean_e2e_latency_ms`` is measured from
    the arrival of a frame's header to the end of its decode. A frame counts
    once in ``budget_violations`` even if it breaks both the size and the
    deadline budget. The last three fields come from the terminator.
    """

    frames_received: int = 0
    mean_frame_bytes: int = 0
    max_frame_bytes: int = 0
    achieved_fps: float = 0.0
    mean_e2e_latency_ms: float = 0.0
    budget_violations: int = 0
    size_violations: int = 0
    deadline_violations: int = 0
    crc_failures: int = 0
    decode_errors: int = 0
    frame_id_gaps: int = 0
    frames_sent: int = 0
    frames_skipped: int = 0
    late_frames: int = 0

    TIMING_FIELDS = ("achieved_fps", "mean_e2e_latency_ms", "deadline_violations",
                     "budget_violations", "late_frames")

    def counts(self) -> dict[str, int | float]:
        """Every field that does not depend on wall-clock timing."""
        return {k: v for k, v in asdict(self).items() if k not in self.TIMING_FIELDS}

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {v:.3f}\n" if isinstance(v, float) else f"{f.name} = {v}\n")
        return "".join(out)


def _accept_handshake(transport) -> None:
    try:
        magic, version = _HANDSHAKE.unpack(transport.recv_exact(_HANDSHAKE.size))
    except ConnectionClosed:
        raise HandshakeFailure("publisher closed during handshake") from None
    if magic != STREAM_MAGIC:
        transport.send(bytes([ACK_REFUSE]))
        raise BadMagic(f"bad stream magic {magic!r}")
    if version != STREAM_VERSION:
        transport.send(bytes([ACK_REFUSE]))
        raise HandshakeFailure(f"unsupported stream version {version}")
    transport.send(bytes([ACK_OK]))


def subscribe(
    transport,
    budget: Budget = Budget(),
    *,
    sensor: SensorModel | None = None,
    decode: Callable[[CompressedFrame], PointCloud] | None = None,
    on_frame: Callable[[CompressedFrame, PointCloud], None] | None = None,
) -> StreamStats:
    """Accept a stream, decode every frame and return stats at the terminator.

    CRC and decode failures are counted, not fatal. Losing the framing
    (bad magic) or the connection before the terminator raises.
    """
    decode = decode or (lambda f: codecs.decode(f, sensor))
    _accept_handshake(transport)
    max_bytes = budget.max_kb * 1024
    max_gap = (1.0 / budget.min_fps) * (1 + DEADLINE_TOLERANCE)
    sizes: list[int] = []
    latencies: list[float] = []
    arrivals: list[float] = []
    n = dict(size=0, deadline=0, budget=0, crc=0, decode=0, gaps=0)
    prev_id: int | None = None
    while True:
        head = transport.recv_exact(HEADER_SIZE)
        t_arr = time.monotonic()
        h = unpack_header(head)
        if h.is_terminator:
            trailer = h
            break
        body = transport.recv_exact(h.payload_len + _CRC_SIZE)
        sizes.append(h.payload_len)
        if prev_id is not None and h.frame_id != prev_id + 1:
            n["gaps"] += max(h.frame_id - prev_id - 1, 1)
        prev_id = h.frame_id
        over_size = h.payload_len > max_bytes
        late = bool(arrivals) and t_arr - arrivals[-1] > max_gap
        arrivals.append(t_arr)
        n["size"] += over_size
        n["deadline"] += late
        n["budget"] += over_size or late
        try:
            frame = unpack_frame(head + body)
        except CrcMismatch as exc:
            log.warning("frame %d: %s", h.frame_id, exc)
            n["crc"] += 1
            continue
        try:
            cloud = decode(frame)
        except PccError as exc:
            log.warning("frame %d failed to decode: %s", h.frame_id, exc)
            n["decode"] += 1
            continue
        latencies.append((time.monotonic() - t_arr) * 1e3)
        if on_frame is not None:
            on_frame(frame, cloud)
    span = arrivals[-1] - arrivals[0] if len(arrivals) > 1 else 0.0
    return StreamStats(
        frames_received=len(sizes),
        mean_frame_bytes=round(sum(sizes) / len(sizes)) if sizes else 0,
        max_frame_bytes=max(sizes, default=0),
        achieved_fps=(len(arrivals) - 1) / span if span > 0 else 0.0,
        mean_e2e_latency_ms=math.fsum(latencies) / len(latencies) if latencies else 0.0,
        budget_violations=n["budget"],
        size_violations=n["size"],
        deadline_violations=n["deadline"],
        crc_failures=n["crc"],
        decode_errors=n["decode"],
        frame_id_gaps=n["gaps"],
        frames_sent=trailer.frame_id,
        frames_skipped=trailer.timestamp_ns,
        late_frames=trailer.n_points_original,
    )


# -- TCP endpoints --------------------------------------------------------


def serve(
    source: Iterable[PointCloud],
    cfg: CodecConfig,
    host: str = "127.0.0.1",
    port: int = 0,
    fps: float = 10.0,
    *,
    sensor: SensorModel | None = None,
    ready: Callable[[int], None] | None = None,
    accept_timeout: float | None = None,
) -> PublishReport:
    """Bind, wait for one subscriber and stream ``source`` to it.

    ``ready`` receives the bound port once the socket listens (useful with
    ``port=0``).
    """
    if not fps > 0:
        raise ValueError("fps must be positive")
    try:
        srv = socket.create_server((host, port))
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    with srv:
        srv.settimeout(accept_timeout)
        if ready is not None:
            ready(srv.getsockname()[1])
        conn, _ = srv.accept()
        conn.settimeout(None)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        transport = SocketTransport(conn)
        try:
            return publish(transport, source, lambda c: codecs.encode(c, cfg, sensor), fps)
        finally:
            transport.close()


def receive(
    host: str,
    port: int,
    budget: Budget = Budget(),
    *,
    sensor: SensorModel | None = None,
    timeout: float = 10.0,
    retry_for: float = 0.0,
    on_frame: Callable[[CompressedFrame, PointCloud], None] | None = None,
) -> StreamStats:
    """Connect to a publisher and consume its stream.

    ``retry_for`` keeps retrying a refused connection for that many seconds.
    """
    deadline = time.monotonic() + retry_for
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            break
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise ConnectFailure(f"cannot connect to {host}:{port}: {exc}") from exc
            time.sleep(0.05)
    sock.settimeout(None)
    transport = SocketTransport(sock)
    try:
        return subscribe(transport, budget, sensor=sensor, on_frame=on_frame)
    finally:
        transport.close()
