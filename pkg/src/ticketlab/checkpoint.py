"""Binary checkpoint format for parameters, masks and run metadata.

Layout (all integers little-endian)::

    magic        4s   b"TLCK"
    version      u16
    config       u32 length + UTF-8 JSON (ModelConfig)
    metadata     u32 length + UTF-8 JSON
    n_params     u32
    name table   n_params x [u16 name length, name, u8 prunable, u8 ndim, ndim x u32]
    payloads     float64 data of each param, in name-table order
    has_mask     u8
    [n_masks u32, then per mask: u16 name length, name, u8 ndim, ndim x u32,
     u64 popcount, u32 byte count, bits packed LSB-first]
    checksum     u64  first 8 bytes of BLAKE2b over every preceding byte
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ParamSet, param_layout
from .pruning import PruneMask

MAGIC = b"TLCK"
FORMAT_VERSION = 1


class CorruptionError(ValueError):
    """Checksum or popcount does not match the payload."""


class FormatError(ValueError):
    """Unsupported version, bad magic, or layout mismatch."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ParamSet
    mask: PruneMask | None = None
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def phase(self) -> str | None:
        return self.metadata.get("phase")


def checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _shape(buf: io.BytesIO, shape) -> None:
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def _blob(buf: io.BytesIO, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", ckpt.version))
    _blob(buf, ckpt.config.to_dict())
    _blob(buf, ckpt.metadata)
    entries = list(ckpt.params.entries())
    buf.write(struct.pack("<I", len(entries)))
    for name, value, prunable in entries:
        _name(buf, name)
        buf.write(struct.pack("<B", int(prunable)))
        _shape(buf, value.shape)
    for _, value, _ in entries:
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    if ckpt.mask is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01")
        buf.write(struct.pack("<I", len(ckpt.mask)))
        for name, m in ckpt.mask.items():
            _name(buf, name)
            _shape(buf, m.shape)
            bits = np.packbits(m.reshape(-1).astype(np.uint8), bitorder="little")
            buf.write(struct.pack("<QI", int(np.count_nonzero(m)), bits.size))
            buf.write(bits.tobytes())
    body = buf.getvalue()
    return body + checksum(body)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint")
        out = self.raw[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def name(self) -> str:
        return self.take(self.unpack("<H")).decode()

    def shape(self) -> tuple[int, ...]:
        nd = self.unpack("<B")
        return tuple(struct.unpack(f"<{nd}I", self.take(4 * nd)))

    def blob(self):
        return json.loads(self.take(self.unpack("<I")).decode())


def from_bytes(raw: bytes, expected_config: ModelConfig | None = None) -> Checkpoint:
    if len(raw) < len(MAGIC) + 2 + 8:
        raise FormatError("file too short to be a checkpoint")
    body, tail = raw[:-8], raw[-8:]
    if checksum(body) != tail:
        raise CorruptionError("checkpoint checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic; not a checkpoint file")
    version = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    config = ModelConfig.from_dict(r.blob())
    metadata = r.blob()
    table = []
    for _ in range(r.unpack("<I")):
        name = r.name()
        prunable = bool(r.unpack("<B"))
        table.append((name, prunable, r.shape()))
    if expected_config is not None:
        _check_layout(table, expected_config)
    params = ParamSet()
    for name, prunable, shape in table:
        n = int(np.prod(shape))
        params.add(name, np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64),
                   prunable)
    mask = None
    if r.unpack("<B"):
        masks = {}
        for _ in range(r.unpack("<I")):
            name = r.name()
            shape = r.shape()
            popcount, nbytes = r.unpack("<QI")
            n = int(np.prod(shape))
            bits = np.frombuffer(r.take(nbytes), dtype=np.uint8)
            m = np.unpackbits(bits, count=n, bitorder="little").astype(np.float64).reshape(shape)
            if int(np.count_nonzero(m)) != popcount:
                raise CorruptionError(f"mask {name}: popcount {popcount} does not match bits")
            masks[name] = m
        mask = PruneMask(masks)
        mask.check(params)
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes after checkpoint payload")
    return Checkpoint(config, params, mask, metadata, version)


def _check_layout(table, expected: ModelConfig) -> None:
    want = [(n, s) for n, s, _ in param_layout(expected)]
    have = [(n, s) for n, _, s in table]
    for (wn, ws), (hn, hs) in zip(want, have):
        if wn != hn:
            raise FormatError(f"parameter mismatch: file has {hn!r} where config expects {wn!r}")
        if ws != hs:
            raise FormatError(f"parameter mismatch: {hn!r} has shape {hs}, config expects {ws}")
    if len(want) != len(have):
        first = want[len(have)][0] if len(want) > len(have) else have[len(want)][0]
        raise FormatError(f"parameter mismatch: {first!r} present on one side only")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expected_config)
