"""Wire-level plumbing shared by the transport backends and the launcher.

Defines the message envelope, the socket frame format, and the tiny
length-prefixed JSON exchange used during rendezvous.  Frames are fixed
little machines: magic ``MPB1``, version byte, kind byte (data or control),
then four big-endian u32 header fields and the payload.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass

MAGIC = b"MPB1"
VERSION = 1

KIND_DATA = 0
KIND_CONTROL = 1

MAX_PAYLOAD = 2**31 - 1

_HEADER = struct.Struct(">4sBBIIIII")  # magic, version, kind, src, dest, comm_id, tag, len
HEADER_SIZE = _HEADER.size


class FrameError(Exception):
    """Raised when an incoming byte stream is not a valid frame."""


@dataclass(frozen=True)
class Envelope:
    """One routed message: world ranks, communicator, tag, raw payload."""

    src: int
    dest: int
    comm_id: int
    tag: int
    payload: bytes
    kind: int = KIND_DATA


def encode_frame(env: Envelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise FrameError(f"payload of {len(env.payload)} bytes exceeds the {MAX_PAYLOAD} maximum")
    header = _HEADER.pack(MAGIC, VERSION, env.kind, env.src, env.dest,
                          env.comm_id, env.tag, len(env.payload))
    return header + env.payload


def decode_header(header: bytes) -> tuple[int, int, int, int, int, int]:
    magic, version, kind, src, dest, comm_id, tag, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if kind not in (KIND_DATA, KIND_CONTROL):
        raise FrameError(f"unknown frame kind {kind}")
    if length > MAX_PAYLOAD:
        raise FrameError(f"declared payload of {length} bytes exceeds the {MAX_PAYLOAD} maximum")
    return kind, src, dest, comm_id, tag, length


def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes, or b"" if the peer closed before the first byte."""
    chunks = bytearray()
    while len(chunks) < n:
        chunk = sock.recv(n - len(chunks))
        if not chunk:
            if not chunks:
                return b""
            raise FrameError(f"connection closed mid-frame ({len(chunks)} of {n} bytes)")
        chunks += chunk
    return bytes(chunks)


def read_frame(sock: socket.socket) -> Envelope | None:
    """Read one frame; None on clean end of stream."""
    header = recv_exact(sock, HEADER_SIZE)
    if not header:
        return None
    kind, src, dest, comm_id, tag, length = decode_header(header)
    payload = recv_exact(sock, length) if length else b""
    if length and len(payload) != length:
        raise FrameError("connection closed mid-payload")
    return Envelope(src, dest, comm_id, tag, payload, kind)


# ---------------------------------------------------------------------------
# Rendezvous messages: u32 length + UTF-8 JSON object


def send_json(sock: socket.socket, obj: dict) -> None:
    body = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


def recv_json(sock: socket.socket) -> dict | None:
    prefix = recv_exact(sock, 4)
    if not prefix:
        return None
    (length,) = struct.unpack(">I", prefix)
    if length > 1_000_000:
        raise FrameError(f"rendezvous message of {length} bytes is implausible")
    body = recv_exact(sock, length)
    if len(body) != length:
        raise FrameError("connection closed mid-message")
    return json.loads(body.decode("utf-8"))
