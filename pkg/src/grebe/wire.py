"""Wire protocol: tagged, length-prefixed messages over ordered byte streams.

Frame layout (little-endian, bit-exact):

    tag     u8   one of the TAG_* values below
    length  u32  payload byte count
    payload length bytes

Payloads are defined per tag by the pack_/unpack_ helpers in this module.
Strings are u16 length + UTF-8; arrays are u8 ndim, ndim x u32 dims, then
little-endian f32 data.  The decoder is incremental and survives arbitrary
fragmentation of the stream; unknown tags raise ProtocolError.
"""

from __future__ import annotations

import socket
import struct

import numpy as np

TAG_ACQUIRE = 1
TAG_GRANT = 2
TAG_NONE_AVAILABLE = 3
TAG_RELEASE = 4
TAG_PART_GET = 5
TAG_PART_PUT = 6
TAG_PART_DATA = 7
TAG_PARAM_FETCH = 8
TAG_PARAM_VALUES = 9
TAG_PARAM_PUSH_ACC = 10
TAG_ACK = 11
TAG_EPOCH_BARRIER = 12

KNOWN_TAGS = frozenset(range(1, 13))

MAX_PAYLOAD = 1 << 30  # sanity cap

_FRAME = struct.Struct("<BI")


class ProtocolError(RuntimeError):
    pass


def encode_message(tag: int, payload: bytes = b"") -> bytes:
    if tag not in KNOWN_TAGS:
        raise ProtocolError(f"unknown tag {tag}")
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload too large: {len(payload)}")
    return _FRAME.pack(tag, len(payload)) + payload


class MessageDecoder:
    """Incremental frame decoder; feed() bytes in any fragmentation."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes]]:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < _FRAME.size:
                return out
            tag, length = _FRAME.unpack_from(self._buf)
            if tag not in KNOWN_TAGS:
                raise ProtocolError(f"unknown tag {tag}")
            if length > MAX_PAYLOAD:
                raise ProtocolError(f"payload too large: {length}")
            if len(self._buf) < _FRAME.size + length:
                return out
            payload = bytes(self._buf[_FRAME.size : _FRAME.size + length])
            del self._buf[: _FRAME.size + length]
            out.append((tag, payload))


def send_message(sock: socket.socket, tag: int, payload: bytes = b"") -> None:
    sock.sendall(encode_message(tag, payload))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed mid-message" if buf else "peer closed")
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, _FRAME.size)
    tag, length = _FRAME.unpack(header)
    if tag not in KNOWN_TAGS:
        raise ProtocolError(f"unknown tag {tag}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"payload too large: {length}")
    return tag, _recv_exact(sock, length) if length else b""


# ---------------------------------------------------------------------------
# payload helpers


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off : off + n].decode("utf-8"), off + n


def pack_array(a: np.ndarray) -> bytes:
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def unpack_array(buf: bytes, off: int = 0) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    n = int(np.prod(shape)) if ndim else 1
    a = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).copy()
    return a, off + 4 * n


def pack_acquire(rank: int, held: set[int]) -> bytes:
    held = sorted(held)
    return struct.pack(f"<IH{len(held)}I", rank, len(held), *held)


def unpack_acquire(buf: bytes) -> tuple[int, set[int]]:
    rank, n = struct.unpack_from("<IH", buf)
    return rank, set(struct.unpack_from(f"<{n}I", buf, 6))


def pack_bucket(i: int, j: int, trained: bool = True) -> bytes:
    return struct.pack("<IIB", i, j, int(trained))


def unpack_bucket(buf: bytes) -> tuple[tuple[int, int], bool]:
    i, j, trained = struct.unpack("<IIB", buf)
    return (i, j), bool(trained)


def pack_none_available(epoch_complete: bool, retry_ms: int) -> bytes:
    return struct.pack("<BI", int(epoch_complete), retry_ms)


def unpack_none_available(buf: bytes) -> tuple[bool, int]:
    flag, retry = struct.unpack("<BI", buf)
    return bool(flag), retry


def pack_part_key(entity_type: str, partition: int) -> bytes:
    return _pack_str(entity_type) + struct.pack("<I", partition)


def unpack_part_key(buf: bytes) -> tuple[str, int, int]:
    etype, off = _unpack_str(buf, 0)
    (p,) = struct.unpack_from("<I", buf, off)
    return etype, p, off + 4


def pack_part_put(entity_type: str, partition: int, blob: bytes) -> bytes:
    return pack_part_key(entity_type, partition) + blob


def unpack_part_put(buf: bytes) -> tuple[str, int, bytes]:
    etype, p, off = unpack_part_key(buf)
    return etype, p, buf[off:]


def pack_param_fetch(key: str) -> bytes:
    return _pack_str(key)


def unpack_param_fetch(buf: bytes) -> str:
    key, _ = _unpack_str(buf, 0)
    return key


def pack_param_values(version: int, values: np.ndarray, acc: np.ndarray) -> bytes:
    return struct.pack("<Q", version) + pack_array(values) + pack_array(acc)


def unpack_param_values(buf: bytes) -> tuple[int, np.ndarray, np.ndarray]:
    (version,) = struct.unpack_from("<Q", buf)
    values, off = unpack_array(buf, 8)
    acc, _ = unpack_array(buf, off)
    return version, values, acc


PUSH_GRAD = 0
PUSH_INIT = 1


def pack_param_push(mode: int, key: str, data: np.ndarray) -> bytes:
    return struct.pack("<B", mode) + _pack_str(key) + pack_array(data)


def unpack_param_push(buf: bytes) -> tuple[int, str, np.ndarray]:
    (mode,) = struct.unpack_from("<B", buf)
    key, off = _unpack_str(buf, 1)
    data, _ = unpack_array(buf, off)
    return mode, key, data


def pack_barrier(rank: int, epoch: int) -> bytes:
    return struct.pack("<IQ", rank, epoch)


def unpack_barrier(buf: bytes) -> tuple[int, int]:
    rank, epoch = struct.unpack("<IQ", buf)
    return rank, epoch
