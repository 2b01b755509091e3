"""``.bck`` checkpoint files for student and teacher networks.

Layout (little-endian)::

    "BCK1" | version u8 | kind u8 | config block | meta block | CRC32 u32 |
    tensor count u32 | per tensor: name length u16, UTF-8 name, rank u8,
    dims u32 * rank, f64 payload

The CRC covers every byte except itself, so any flipped bit is caught.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, IntegrityError
from .net import TAP2_CHOICES, BackboneConfig, StudentNet, TeacherNet, TrainMeta

MAGIC = b"BCK1"
VERSION = 1
KINDS = ("student", "teacher")
_CONFIG = struct.Struct("<4IIII3IIB")
_META = struct.Struct("<Idq")
_HEAD = 4 + 2 + _CONFIG.size + _META.size


def _pack_config(c: BackboneConfig) -> bytes:
    return _CONFIG.pack(
        *c.stage_blocks, c.base_width, c.cardinality, c.in_channels, *c.clip_shape, c.num_classes,
        TAP2_CHOICES.index(c.tap2),
    )


def _unpack_config(blob: bytes) -> BackboneConfig:
    v = _CONFIG.unpack(blob)
    if v[11] >= len(TAP2_CHOICES):
        raise FormatError(f"unknown tap2 code {v[11]}")
    return BackboneConfig(tuple(v[0:4]), v[4], v[5], v[6], tuple(v[7:10]), v[10], TAP2_CHOICES[v[11]])


def encode_checkpoint(net) -> bytes:
    kind = KINDS.index(net.kind)
    m = net.meta
    head = MAGIC + bytes([VERSION, kind]) + _pack_config(net.config) + _META.pack(m.epoch, m.lam, m.seed)
    body = bytearray()
    state = list(net.state())
    body += struct.pack("<I", len(state))
    for name, arr in state:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    crc = zlib.crc32(bytes(body), zlib.crc32(head))
    return head + struct.pack("<I", crc) + bytes(body)


def peek_kind(blob: bytes) -> str:
    """Kind tag of an encoded checkpoint, after checking magic and version only."""
    if len(blob) < 6:
        raise IntegrityError("truncated checkpoint header")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    if blob[4] != VERSION:
        raise FormatError(f"unsupported checkpoint version {blob[4]}")
    if blob[5] >= len(KINDS):
        raise FormatError(f"unknown checkpoint kind code {blob[5]}")
    return KINDS[blob[5]]


def decode_checkpoint(blob: bytes, expect: str | None = None, config: BackboneConfig | None = None):
    """Rebuild the network stored in ``blob``.

    ``expect`` rejects the wrong network kind before anything is constructed,
    ``config`` rejects an architecture mismatch.
    """
    kind = peek_kind(blob)
    if expect is not None and kind != expect:
        raise ConfigurationError(f"expected a {expect} checkpoint, got a {kind} checkpoint")
    if len(blob) < _HEAD + 8:
        raise IntegrityError("truncated checkpoint header")
    (crc,) = struct.unpack_from("<I", blob, _HEAD)
    body = blob[_HEAD + 4 :]
    if zlib.crc32(body, zlib.crc32(blob[:_HEAD])) != crc:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated file)")
    cfg = _unpack_config(blob[6 : 6 + _CONFIG.size])
    epoch, lam, seed = _META.unpack_from(blob, 6 + _CONFIG.size)
    if config is not None:
        want = config.for_teacher() if kind == "teacher" else config.for_student()
        if want != cfg:
            raise ConfigurationError(f"checkpoint config {cfg} does not match {want}")

    state, off = {}, 4
    (count,) = struct.unpack_from("<I", body, 0)
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, off)
            name = body[off + 2 : off + 2 + n].decode("utf-8")
            off += 2 + n
            rank = body[off]
            dims = struct.unpack_from(f"<{rank}I", body, off + 1)
            off += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(dims)
            state[name] = arr.astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError, IndexError) as exc:
        raise IntegrityError(f"malformed checkpoint tensor table: {exc}") from None
    if off != len(body):
        raise IntegrityError("trailing bytes after checkpoint tensors")

    net = (TeacherNet if kind == "teacher" else StudentNet)(cfg, seed)
    net.load_state(state)
    net.meta = TrainMeta(epoch, lam, seed)
    return net


def save_checkpoint(net, path) -> None:
    Path(path).write_bytes(encode_checkpoint(net))


def load_checkpoint(path, expect: str | None = None, config: BackboneConfig | None = None):
    return decode_checkpoint(Path(path).read_bytes(), expect, config)


def parameter_hash(net) -> str:
    """SHA-256 over every parameter and running statistic, in state order."""
    h = hashlib.sha256()
    for name, arr in net.state():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
