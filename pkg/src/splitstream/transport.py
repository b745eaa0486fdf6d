"""Byte transports: an in-memory duplex channel and TCP, plus frame I/O on top."""
from __future__ import annotations

import queue
import socket
import threading

from .errors import NeedMoreBytes, SessionTimeout, TransportClosed
from .protocol import Frame, decode_frame, encode_frame

DEFAULT_IDLE_TIMEOUT = 30.0


class ChannelEnd:
    """One side of an in-process duplex byte channel."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False
        self._eof = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise TransportClosed("channel closed")
        self._outbox.put(bytes(data))

    def recv(self, timeout: float | None) -> bytes:
        """Next chunk; b"" once the peer has closed."""
        if self._eof:
            return b""
        try:
            if timeout == 0:
                chunk = self._inbox.get_nowait()
            else:
                chunk = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise SessionTimeout("no data") from None
        if chunk is None:
            self._eof = True
            return b""
        return chunk

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def channel_pair() -> tuple[ChannelEnd, ChannelEnd]:
    a, b = queue.Queue(), queue.Queue()
    return ChannelEnd(a, b), ChannelEnd(b, a)


class TcpTransport:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data: bytes) -> None:
        try:
            self.sock.settimeout(None)
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportClosed(str(exc)) from None

    def recv(self, timeout: float | None) -> bytes:
        try:
            self.sock.settimeout(timeout)
            return self.sock.recv(1 << 16)
        except (socket.timeout, BlockingIOError):
            raise SessionTimeout("no data") from None
        except OSError as exc:
            raise TransportClosed(str(exc)) from None

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def tcp_connect(addr: str | tuple[str, int], timeout: float = 10.0) -> TcpTransport:
    if isinstance(addr, str):
        addr = parse_addr(addr)
    try:
        return TcpTransport(socket.create_connection(addr, timeout=timeout))
    except OSError as exc:
        raise TransportClosed(f"connect to {addr}: {exc}") from None


class TcpListener:
    def __init__(self, addr: str | tuple[str, int] = ("127.0.0.1", 0)):
        if isinstance(addr, str):
            addr = parse_addr(addr)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind(addr)
        self.sock.listen(64)
        self._stop = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def serve(self, handler) -> threading.Thread:
        """Accept connections in a daemon thread, passing each to ``handler``."""

        def loop():
            self.sock.settimeout(0.2)
            while not self._stop.is_set():
                try:
                    conn, _ = self.sock.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                handler(TcpTransport(conn))

        t = threading.Thread(target=loop, daemon=True, name="tcp-accept")
        t.start()
        return t

    def close(self) -> None:
        self._stop.set()
        self.sock.close()


class Connection:
    """Frame-level I/O over a byte transport."""

    def __init__(self, transport, idle_timeout: float = DEFAULT_IDLE_TIMEOUT):
        self.transport = transport
        self.idle_timeout = idle_timeout
        self._buf = bytearray()
        self.bytes_sent = 0

    def send_frame(self, frame: Frame) -> int:
        data = encode_frame(frame)
        self.transport.send(data)
        self.bytes_sent += len(data)
        return len(data)

    def _pop(self) -> Frame | None:
        try:
            frame, used = decode_frame(self._buf)
        except NeedMoreBytes:
            return None
        del self._buf[:used]
        return frame

    def recv_frame(self, timeout: float | None = -1) -> Frame:
        """Block for the next frame (``timeout=-1`` uses the idle timeout)."""
        if timeout == -1:
            timeout = self.idle_timeout
        while True:
            frame = self._pop()
            if frame is not None:
                return frame
            chunk = self.transport.recv(timeout)
            if not chunk:
                raise TransportClosed("peer closed the connection")
            self._buf += chunk

    def poll_frame(self) -> Frame | None:
        """A frame if one is already available, without blocking."""
        try:
            return self.recv_frame(timeout=0)
        except SessionTimeout:
            return None

    def close(self) -> None:
        self.transport.close()


class FaultyTransport:
    """Wraps a transport and severs it after ``drop_after`` sends."""

    def __init__(self, inner, drop_after: int):
        self.inner = inner
        self.drop_after = drop_after
        self.sends = 0

    def send(self, data: bytes) -> None:
        if self.sends >= self.drop_after:
            self.inner.close()
            raise TransportClosed("injected fault")
        self.sends += 1
        self.inner.send(data)

    def recv(self, timeout):
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()


class RecordingTransport:
    """Keeps a copy of every outbound chunk (used to audit what leaves a client)."""

    def __init__(self, inner):
        self.inner = inner
        self.sent: list[bytes] = []

    def send(self, data: bytes) -> None:
        self.sent.append(bytes(data))
        self.inner.send(data)

    def recv(self, timeout):
        return self.inner.recv(timeout)

    def close(self) -> None:
        self.inner.close()
