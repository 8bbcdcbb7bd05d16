"""Real-socket backend: one TCP connection per directed node pair.

Every frame handler of a node runs while holding that node's condition
variable, so a node's roles see messages serially, and blocking waits
(``wait_until``) are woken after each delivered frame.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from typing import Callable

from .frame import HEADER_SIZE, Frame, FrameError, MsgType, decode_header
from .meter import TrafficMeter
from .sim import TransportError

log = logging.getLogger(__name__)

_HELLO = b"hello"
_STOP = object()


def parse_endpoint(ep: str) -> tuple[str, int]:
    host, _, port = ep.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"endpoint {ep!r} is not 'host:port'")
    return host, int(port)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame | None:
    head = _recv_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    mt, layer, chunk_id, iteration, origin, plen = decode_header(head)
    payload = _recv_exact(sock, plen) if plen else b""
    if payload is None:
        raise FrameError("connection closed mid-frame")
    return Frame(mt, layer, chunk_id, iteration, origin, payload)


class _Writer(threading.Thread):
    def __init__(self, owner: "TcpTransport", dst: int):
        super().__init__(daemon=True, name=f"tcp-w{owner.node_id}->{dst}")
        self.owner = owner
        self.dst = dst
        self.q: queue.Queue = queue.Queue()
        self.sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        host, port = self.owner.endpoints[self.dst]
        deadline = time.monotonic() + self.owner.connect_timeout
        while True:
            try:
                s = socket.create_connection((host, port), timeout=self.owner.connect_timeout)
                s.settimeout(None)
                s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                s.sendall(Frame(MsgType.CONTROL, origin=self.owner.node_id, payload=_HELLO).encode())
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.02)

    def run(self):
        try:
            self.sock = self._connect()
            while True:
                item = self.q.get()
                if item is _STOP:
                    break
                self.sock.sendall(item)
        except OSError as e:
            self.owner._fail(TransportError(f"send {self.owner.node_id}->{self.dst}: {e}"))
        finally:
            if self.sock is not None:
                try:
                    self.sock.shutdown(socket.SHUT_WR)
                except OSError:
                    pass
                self.sock.close()


class TcpTransport:
    def __init__(self, node_id: int, endpoints: list[tuple[str, int]], *,
                 meter: TrafficMeter | None = None, connect_timeout: float = 10.0):
        self.node_id = node_id
        self.endpoints = endpoints
        self.meter = meter or TrafficMeter()
        self.connect_timeout = connect_timeout
        self.cond = threading.Condition()
        self.errors: list[BaseException] = []
        self._handler: Callable[[Frame, int], None] | None = None
        self._writers: dict[int, _Writer] = {}
        self._readers: list[threading.Thread] = []
        self._conns: list[socket.socket] = []
        self._listener: socket.socket | None = None
        self._closed = False
        self._t0 = time.monotonic()

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> "TcpTransport":
        host, port = self.endpoints[self.node_id]
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((host, port))
        ls.listen(64)
        self.endpoints[self.node_id] = (host, ls.getsockname()[1])  # resolves port 0
        self._listener = ls
        threading.Thread(target=self._accept_loop, daemon=True, name=f"tcp-accept{self.node_id}").start()
        return self

    def close(self) -> None:
        with self.cond:
            if self._closed:
                return
            self._closed = True
        for w in self._writers.values():
            w.q.put(_STOP)
        for w in self._writers.values():
            w.join(timeout=5)
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        for c in list(self._conns):
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        for r in self._readers:
            r.join(timeout=5)

    def register(self, handler: Callable[[Frame, int], None]) -> None:
        self._handler = handler

    def now(self) -> float:
        return time.monotonic() - self._t0

    # -- receiving -----------------------------------------------------------

    def _accept_loop(self):
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()
            self._readers.append(t)

    def _read_loop(self, conn: socket.socket):
        try:
            hello = read_frame(conn)
            if hello is None or hello.msg_type is not MsgType.CONTROL or hello.payload != _HELLO:
                raise FrameError("expected hello frame")
            src = hello.origin
            while True:
                frame = read_frame(conn)
                if frame is None:
                    return
                with self.cond:
                    try:
                        if self._handler is not None:
                            self._handler(frame, src)
                    except Exception as e:  # surfaced to whoever waits on this node
                        log.exception("handler failed on node %d", self.node_id)
                        self.errors.append(e)
                    self.cond.notify_all()
        except (OSError, FrameError) as e:
            if not self._closed:
                self._fail(TransportError(f"recv on node {self.node_id}: {e}"))
        finally:
            conn.close()

    def _fail(self, err: BaseException) -> None:
        with self.cond:
            self.errors.append(err)
            self.cond.notify_all()

    # -- sending -------------------------------------------------------------

    def send_frame(self, src: int, dst: int, frame: Frame) -> None:
        """Non-blocking: the frame is queued on the connection's writer."""
        if src != self.node_id:
            raise TransportError(f"node {self.node_id} cannot send as {src}")
        if self._closed:
            raise TransportError("send after close")
        if self.errors:
            raise self.errors[0]
        w = self._writers.get(dst)
        if w is None:
            w = self._writers[dst] = _Writer(self, dst)
            w.start()
        self.meter.record(src, dst, frame.size, frame.layer)
        w.q.put(frame.encode())

    def call_later(self, delay: float, action: Callable[[], None]) -> None:
        def fire():
            with self.cond:
                action()
                self.cond.notify_all()
        t = threading.Timer(delay, fire)
        t.daemon = True
        t.start()

    def wait_until(self, pred: Callable[[], bool], timeout: float | None = None) -> None:
        """Block until ``pred()`` holds; the caller must hold ``self.cond``."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while not pred():
            if self.errors:
                raise self.errors[0]
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TimeoutError(f"node {self.node_id}: wait timed out")
            self.cond.wait(remaining)
