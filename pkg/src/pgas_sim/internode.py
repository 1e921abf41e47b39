"""Two-node scale-out over an ordered loopback byte stream.

Frames are little-endian with an 8-byte header (magic, version, kind,
reserved).  Requests carry the 64-byte ring-message image, optionally
followed by a raw payload whose length is implied by the message (put-like
ops send their data inline).  Replies carry a fixed 16-byte body, optionally
followed by fetched bytes for bulk gets; the requester knows the expected
length from its own pending-operation record.  No retry, no resume: a broken
link fails every outstanding completion.
"""

from __future__ import annotations

import logging
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .dtypes import BY_CODE
from .errors import GeometryError, LinkError
from .ring import (MESSAGE_SIZE, OP_ENGINE_COPY, OP_IPUT, OP_PUT,
                   OP_PUT_SIGNAL, RingMessage)

log = logging.getLogger("pgas_sim.wire")

MAGIC = 0x50474153
VERSION = 1
KIND_REQUEST = 0
KIND_REPLY = 1
KIND_HELLO = 2

HEADER = struct.Struct("<IBBH")          # magic, version, kind, reserved
REPLY_BODY = struct.Struct("<HBBQ4x")    # completion_index, status, pad, ret, pad2
HELLO_BODY = struct.Struct("<HHQI")      # npes, world, heap_size, reserved

REQUEST_FRAME_SIZE = HEADER.size + MESSAGE_SIZE   # 72
REPLY_FRAME_SIZE = HEADER.size + REPLY_BODY.size  # 24

_TRACE = os.environ.get("PGAS_SIM_TRACE") == "wire"


def request_payload_len(msg: RingMessage) -> int:
    """Bytes of inline data following a request frame, implied by the op."""
    if msg.op == OP_IPUT:
        return msg.count * BY_CODE[msg.dtype].width
    if msg.op in (OP_PUT, OP_ENGINE_COPY, OP_PUT_SIGNAL):
        return msg.count
    return 0


@dataclass
class Hello:
    npes: int
    world: int
    heap_size: int


def pack_request(msg: RingMessage, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, VERSION, KIND_REQUEST, 0) + msg.pack() + payload


def pack_reply(completion_index: int, status: int, ret: int,
               payload: bytes = b"") -> bytes:
    return (HEADER.pack(MAGIC, VERSION, KIND_REPLY, 0)
            + REPLY_BODY.pack(completion_index, status, 0, ret) + payload)


def pack_hello(hello: Hello) -> bytes:
    return (HEADER.pack(MAGIC, VERSION, KIND_HELLO, 0)
            + HELLO_BODY.pack(hello.npes, hello.world, hello.heap_size, 0))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise LinkError("connection closed")
        buf.extend(chunk)
    return bytes(buf)


class Link:
    """One connection between the two nodes: proxy sends, a receiver thread
    dispatches inbound frames, replies may interleave across completions."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        self._recv_thread: Optional[threading.Thread] = None
        self._closed = False
        self._on_down: Optional[Callable[[str], None]] = None

    def _send(self, data: bytes):
        if _TRACE:
            log.info("tx %s", data[:72].hex())
        with self._send_lock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                raise LinkError(f"send failed: {exc}") from exc

    def send_request(self, msg: RingMessage, payload: bytes = b""):
        self._send(pack_request(msg, payload))

    def send_reply(self, completion_index: int, status: int, ret: int,
                   payload: bytes = b""):
        self._send(pack_reply(completion_index, status, ret, payload))

    def send_hello(self, hello: Hello):
        self._send(pack_hello(hello))

    def recv_hello(self) -> Hello:
        header = _recv_exact(self.sock, HEADER.size)
        magic, version, kind, _ = HEADER.unpack(header)
        if magic != MAGIC or version != VERSION or kind != KIND_HELLO:
            raise GeometryError(f"bad handshake frame: magic={magic:#x} "
                                f"version={version} kind={kind}")
        npes, world, heap_size, _ = HELLO_BODY.unpack(
            _recv_exact(self.sock, HELLO_BODY.size))
        return Hello(npes, world, heap_size)

    def start_receiver(self, on_request, on_reply, reply_ext_len, on_down):
        """on_request(msg, payload, reply_fn); on_reply(comp, status, ret, data);
        reply_ext_len(comp, status) -> expected payload bytes for a reply."""
        self._on_down = on_down

        def loop():
            reason = "closed"
            try:
                while True:
                    header = _recv_exact(self.sock, HEADER.size)
                    magic, version, kind, _ = HEADER.unpack(header)
                    if magic != MAGIC or version != VERSION:
                        reason = f"malformed frame (magic={magic:#x} version={version})"
                        log.warning("closing link: %s", reason)
                        break
                    if kind == KIND_REQUEST:
                        raw = _recv_exact(self.sock, MESSAGE_SIZE)
                        if _TRACE:
                            log.info("rx req %s", raw.hex())
                        msg = RingMessage.unpack(raw)
                        payload = _recv_exact(self.sock, request_payload_len(msg))
                        comp = msg.completion_index

                        def reply(status, ret, data, _comp=comp):
                            self.send_reply(_comp, status, ret, data)

                        on_request(msg, payload, reply)
                    elif kind == KIND_REPLY:
                        body = _recv_exact(self.sock, REPLY_BODY.size)
                        comp, status, _, ret = REPLY_BODY.unpack(body)
                        if _TRACE:
                            log.info("rx rep %s", body.hex())
                        data = _recv_exact(self.sock, reply_ext_len(comp, status))
                        on_reply(comp, status, ret, data)
                    else:
                        reason = f"unknown frame kind {kind}"
                        log.warning("closing link: %s", reason)
                        break
            except LinkError as exc:
                reason = str(exc)
            except OSError as exc:
                reason = str(exc)
            finally:
                self._shutdown()
                if self._on_down is not None and not self._closed:
                    self._closed = True
                    on_down(reason)

        self._recv_thread = threading.Thread(target=loop, name="pgas-link-rx",
                                             daemon=True)
        self._recv_thread.start()

    def _shutdown(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def close(self):
        self._closed = True
        self._shutdown()
        self.sock.close()
        if self._recv_thread is not None and self._recv_thread is not threading.current_thread():
            self._recv_thread.join(timeout=5)


def _parse_endpoint(endpoint: str):
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise GeometryError(f"endpoint must be host:port, got {endpoint!r}")
    return host, int(port)


def establish_link(role: str, endpoint: str, npes: int, world: int,
                   heap_size: int, timeout: float = 10.0):
    """Connect the two nodes and exchange geometry.  node_a listens,
    node_b dials; both then swap hello frames."""
    host, port = _parse_endpoint(endpoint)
    if role == "node_a":
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        server.settimeout(timeout)
        try:
            sock, _ = server.accept()
        except socket.timeout as exc:
            raise LinkError(f"no peer connected to {endpoint} within {timeout}s") from exc
        finally:
            server.close()
    elif role == "node_b":
        deadline = time.monotonic() + timeout
        sock = None
        while True:
            try:
                sock = socket.create_connection((host, port), timeout=1.0)
                break
            except OSError as exc:
                if time.monotonic() > deadline:
                    raise LinkError(f"cannot reach peer at {endpoint}: {exc}") from exc
                time.sleep(0.05)
    else:
        raise GeometryError(f"role must be node_a or node_b, got {role!r}")
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    link = Link(sock)
    link.send_hello(Hello(npes, world, heap_size))
    peer = link.recv_hello()
    return link, peer
