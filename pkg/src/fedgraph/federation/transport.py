"""Pluggable transports: in-process channels and length-prefixed JSON/TCP.

Both transports push the same message dicts through the same client code, so
a TCP run reproduces an in-process run exactly given the same seeds.
"""

from __future__ import annotations

import logging
import socket

from ..errors import ProtocolError, TransportError
from .client import ClientNode
from .messages import read_frame, validate_message, write_frame
from .server import RunControl

logger = logging.getLogger(__name__)


class InProcessEndpoint:
    """Direct in-memory channel to a ClientNode; deterministic and quiet."""

    def __init__(self, node: ClientNode) -> None:
        self.node = node
        self.client_id = node.client_id

    def fetch_register(self, run_id: str) -> dict:
        return self.node.register_message(run_id)

    def send_bundle(self, bundle: dict) -> list[dict]:
        return self.node.handle_init(bundle)

    def exchange(self, message: dict) -> list[dict]:
        return self.node.handle_broadcast(message)

    def close(self) -> None:
        pass


def _expected_replies(message: dict) -> int:
    if message["type"] == "weights_broadcast":
        return 1 if message["final"] else 2
    if message["type"] == "init_bundle":
        return 0 if message.get("config") else 1
    return 0


class TcpEndpoint:
    """Coordinator-side view of one connected TCP client."""

    def __init__(self, conn: socket.socket, register_message: dict) -> None:
        self._conn = conn
        self._register = register_message
        self.client_id = register_message["client_id"]

    def fetch_register(self, run_id: str) -> dict:
        return self._register

    def send_bundle(self, bundle: dict) -> list[dict]:
        return self._roundtrip(bundle)

    def exchange(self, message: dict) -> list[dict]:
        return self._roundtrip(message)

    def _roundtrip(self, message: dict) -> list[dict]:
        try:
            write_frame(self._conn, message)
            replies = []
            for _ in range(_expected_replies(message)):
                reply = read_frame(self._conn)
                if reply is None:
                    raise TransportError(f"client {self.client_id} disconnected")
                replies.append(reply)
            return replies
        except (OSError, ProtocolError) as exc:
            raise TransportError(f"client {self.client_id}: {exc}") from exc

    def close(self) -> None:
        try:
            self._conn.close()
        except OSError:
            pass


class TcpCoordinatorListener:
    """Accepts client registrations (and operator control frames) on a port."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0) -> None:
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen()
        self.address: tuple[str, int] = self._sock.getsockname()

    def accept_clients(
        self,
        count: int,
        control: RunControl | None = None,
        timeout: float | None = 120.0,
    ) -> list[TcpEndpoint]:
        if timeout is not None:
            self._sock.settimeout(timeout)
        endpoints: list[TcpEndpoint] = []
        while len(endpoints) < count:
            try:
                conn, peer = self._sock.accept()
            except socket.timeout as exc:
                raise TransportError(
                    f"timed out waiting for clients ({len(endpoints)}/{count})"
                ) from exc
            conn.settimeout(600.0)
            try:
                message = read_frame(conn)
            except ProtocolError as exc:
                logger.warning("rejecting connection from %s: %s", peer, exc)
                conn.close()
                continue
            if message is None:
                conn.close()
                continue
            validate_message(message)
            if message["type"] == "control":
                if control is not None:
                    control.post(message["action"])
                conn.close()
                continue
            if message["type"] != "register":
                logger.warning("expected register, got %s; dropping", message["type"])
                conn.close()
                continue
            endpoints.append(TcpEndpoint(conn, message))
        return endpoints

    def close(self) -> None:
        self._sock.close()


def run_client_over_tcp(
    host: str, port: int, node: ClientNode, timeout: float = 600.0
) -> None:
    """Connect a client to a coordinator and serve until the run finishes."""
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        write_frame(sock, node.register_message(""))
        while True:
            message = read_frame(sock)
            if message is None:
                return
            if message["type"] == "init_bundle":
                node.run_id = message["run_id"]
                replies = node.handle_init(message)
            elif message["type"] == "weights_broadcast":
                replies = node.handle_broadcast(message)
            else:
                raise ProtocolError(f"unexpected message {message['type']!r}")
            for reply in replies:
                write_frame(sock, reply)


def send_control_over_tcp(host: str, port: int, action: str, run_id: str = "") -> None:
    """Post an operator control frame to a listening coordinator."""
    with socket.create_connection((host, port), timeout=30.0) as sock:
        write_frame(
            sock,
            {
                "type": "control",
                "run_id": run_id,
                "round": 0,
                "client_id": "operator",
                "action": action,
            },
        )
