"""Little-endian tagged containers plus PGM/PPM writers.

A container is a 4-byte magic followed by sections, each ``tag (4 bytes) +
u64 payload length + payload``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

SAMPLE_MAGIC = b"AVD1"
CHECKPOINT_MAGIC = b"AVC1"


class FormatError(ValueError):
    """Malformed or unexpected container content."""


def pack_sections(magic: bytes, sections: Iterable[tuple[bytes, bytes]]) -> bytes:
    parts = [magic]
    for tag, payload in sections:
        if len(tag) != 4:
            raise FormatError(f"section tag {tag!r} must be 4 bytes")
        parts.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(parts)


def unpack_sections(blob: bytes, magic: bytes) -> list[tuple[bytes, bytes]]:
    if blob[:4] != magic:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    pos, out = 4, []
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise FormatError(f"truncated section header at byte {pos}")
        tag = blob[pos : pos + 4]
        (n,) = struct.unpack("<Q", blob[pos + 4 : pos + 12])
        pos += 12
        if pos + n > len(blob):
            raise FormatError(f"section {tag!r} claims {n} bytes, only {len(blob) - pos} left")
        out.append((tag, blob[pos : pos + n]))
        pos += n
    return out


def atomic_write(path: str | Path, blob: bytes) -> None:
    """Write via a temp file and rename so readers never see a partial file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# ----------------------------------------------------------------------------
# checkpoint: parameter path -> f64 array


def encode_checkpoint(state: dict[str, np.ndarray], config_text: str) -> bytes:
    sections = [(b"CFG ", config_text.encode("utf-8"))]
    for name in state:
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        key = name.encode("utf-8")
        head = struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        sections.append((b"PAR ", head + arr.tobytes()))
    return pack_sections(CHECKPOINT_MAGIC, sections)


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    state: dict[str, np.ndarray] = {}
    config = None
    for tag, payload in unpack_sections(blob, CHECKPOINT_MAGIC):
        if tag == b"CFG ":
            config = payload.decode("utf-8")
        elif tag == b"PAR ":
            try:
                (klen,) = struct.unpack_from("<I", payload, 0)
                name = payload[4 : 4 + klen].decode("utf-8")
                (ndim,) = struct.unpack_from("<I", payload, 4 + klen)
                off = 8 + klen
                shape = struct.unpack_from(f"<{ndim}Q", payload, off)
                off += 8 * ndim
                data = np.frombuffer(payload, dtype="<f8", offset=off)
            except (struct.error, UnicodeDecodeError, ValueError) as exc:
                raise FormatError(f"malformed parameter section: {exc}") from exc
            if data.size != int(np.prod(shape)):
                raise FormatError(f"{name}: {data.size} values for shape {shape}")
            if name in state:
                raise FormatError(f"duplicate parameter {name}")
            state[name] = data.reshape(shape).astype(np.float64)
        else:
            raise FormatError(f"unknown checkpoint section {tag!r}")
    if config is None:
        raise FormatError("checkpoint has no CFG section")
    return state, config


# ----------------------------------------------------------------------------
# netpbm


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError("PGM expects a 2-D array")
    h, w = v.shape
    body = np.clip(np.rint(v), 0, 65535).astype(">u2").tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode("ascii") + body)


def write_pgm8(path: str | Path, values: np.ndarray) -> None:
    v = np.asarray(values)
    h, w = v.shape
    body = np.clip(np.rint(v), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + body)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb`` is ``[3, H, W]`` in [0, 1]."""
    _, h, w = rgb.shape
    body = np.clip(np.rint(np.asarray(rgb).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


def read_pnm(path: str | Path) -> tuple[str, int, np.ndarray]:
    """Return ``(magic, maxval, pixels)`` for binary PGM/PPM files."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else np.uint8
    data = np.frombuffer(blob, dtype=dtype, offset=pos)
    if magic == "P5":
        return magic, maxval, data.reshape(h, w)
    if magic == "P6":
        return magic, maxval, data.reshape(h, w, 3)
    raise FormatError(f"unsupported netpbm magic {magic}")
