"""Threaded TCP service loop shared by the enclave and worker processes."""
from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Callable

from .protocol import (
    ConnectionClosed,
    Envelope,
    ErrorCode,
    ErrorMsg,
    ProtocolError,
    decode,
    encode,
    parse_addr,
    read_frame,
)

log = logging.getLogger(__name__)

Handler = Callable[[Envelope], Envelope]


def _session_of(frame: bytes) -> int:
    return int.from_bytes(frame[5:13], "little") if len(frame) >= 13 else 0


def respond(handler: Handler, frame: bytes, vocab_size: int | None = None) -> bytes:
    """Turn one request frame into one reply frame; failures become ``ErrorMsg``."""
    try:
        return encode(handler(decode(frame, vocab_size)))
    except ProtocolError as exc:
        return encode(Envelope(_session_of(frame), ErrorMsg(int(exc.code), exc.detail)))
    except Exception as exc:  # noqa: BLE001 - never let a request kill the service
        log.exception("internal error while handling request")
        return encode(Envelope(_session_of(frame), ErrorMsg(int(ErrorCode.INTERNAL), repr(exc))))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class MessageServer:
    """Serve ``handler`` on ``addr``; port 0 picks a free port (see :attr:`address`)."""

    def __init__(self, handler: Handler, addr: str = "127.0.0.1:0", vocab_size: int | None = None):
        self.handler = handler
        self.vocab_size = vocab_size
        outer = self

        class _RequestHandler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                sock: socket.socket = self.request
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                while True:
                    try:
                        frame = read_frame(sock)
                    except (ConnectionClosed, ConnectionError, OSError):
                        return
                    except ProtocolError as exc:
                        # Unframeable input: report and drop the connection.
                        sock.sendall(encode(Envelope(0, ErrorMsg(int(exc.code), exc.detail))))
                        return
                    sock.sendall(respond(outer.handler, frame, outer.vocab_size))

        self._server = _Server(parse_addr(addr), _RequestHandler)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def serve_forever(self) -> None:
        self._server.serve_forever(poll_interval=0.1)

    def start(self) -> "MessageServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self) -> "MessageServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()
