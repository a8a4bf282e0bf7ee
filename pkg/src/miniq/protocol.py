"""Wire protocol: newline-terminated JSON documents over TCP.

Each message is one JSON object on one line, so the protocol can be driven
from a plain socket tool.  Requests get exactly one ``{ok, code, payload}``
response, except ``attach`` which upgrades the connection to a stream of
``{"type": "data", "bytes": <base64>}`` frames closed by ``{"type": "end"}``.
"""

from __future__ import annotations

import base64
import json
import socket

from .errors import ProtocolError

MAX_LINE_BYTES = 16 * 1024 * 1024  # scripts and frames comfortably fit

DEFAULT_PORT = 7075


def send_message(sock: socket.socket, message: dict) -> None:
    line = json.dumps(message, separators=(",", ":")) + "\n"
    sock.sendall(line.encode("utf-8"))


def read_message(reader) -> dict | None:
    """Read one message from a file-like reader; None at EOF."""
    line = reader.readline(MAX_LINE_BYTES + 1)
    if not line:
        return None
    if len(line) > MAX_LINE_BYTES:
        raise ProtocolError("message exceeds maximum line length")
    try:
        message = json.loads(line)
    except ValueError as exc:
        raise ProtocolError(f"message is not valid JSON: {exc}") from None
    if not isinstance(message, dict):
        raise ProtocolError("message must be a JSON object")
    return message


def ok(payload: dict | None = None) -> dict:
    return {"ok": True, "code": "ok", "payload": payload or {}}


def err(code: str, message: str, **extra) -> dict:
    payload = {"message": message}
    payload.update(extra)
    return {"ok": False, "code": code, "payload": payload}


def data_frame(chunk: bytes) -> dict:
    return {"type": "data", "bytes": base64.b64encode(chunk).decode("ascii")}


def decode_data_frame(frame: dict) -> bytes:
    return base64.b64decode(frame["bytes"])


def end_frame(reason: str) -> dict:
    return {"type": "end", "reason": reason}


def parse_address(text: str) -> tuple[str, int]:
    """Parse ``host:port`` (port optional, default 7075)."""
    if ":" in text:
        host, _, port_text = text.rpartition(":")
        try:
            port = int(port_text)
        except ValueError:
            raise ProtocolError(f"bad port in address {text!r}") from None
        return host or "127.0.0.1", port
    return text or "127.0.0.1", DEFAULT_PORT
