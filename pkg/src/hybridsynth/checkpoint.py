"""Checkpoint container: a small self-describing binary format.

Byte layout (all integers little-endian, no alignment padding):

    offset  size  field
    0       4     magic "HSCK"
    4       4     format version (u32), currently 1
    8       4     section count (u32)
    12      ...   sections, back to back, each:
                      u16   name length
                      ...   name (utf-8)
                      u64   payload length
                      ...   payload bytes
    end-4   4     crc32 (u32) over everything before it

Sections written by this package, in fixed order: "meta" (JSON with
sorted keys: format, step, config snapshot text), "gen", "ema", "disc"
(tensor packs), "opt_g", "opt_d" (tensor packs of optimizer moments
keyed "<param>.exp_avg" / ".exp_avg_sq" / ".step"), "rng" (raw torch
generator state bytes).

A tensor pack payload is:

    u32  entry count
    per entry:
        u16  name length, then utf-8 name
        u8   dtype code (0=f32 1=f64 2=i64 3=u8 4=i32 5=bool 6=f16)
        u8   ndim
        u64 * ndim  shape
        raw data, C-contiguous, little-endian

Saving is deterministic for identical state, so save -> load -> save is
byte-identical; the crc32 makes truncation or corruption loud.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointIntegrityError

MAGIC = b"HSCK"
VERSION = 1

_DTYPE_CODES = {
    torch.float32: 0,
    torch.float64: 1,
    torch.int64: 2,
    torch.uint8: 3,
    torch.int32: 4,
    torch.bool: 5,
    torch.float16: 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NP_DTYPES = {
    0: np.float32, 1: np.float64, 2: np.int64,
    3: np.uint8, 4: np.int32, 5: np.bool_, 6: np.float16,
}


def pack_tensors(tensors: dict) -> bytes:
    out = bytearray(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointIntegrityError(
                f"tensor {name!r} has unsupported dtype {t.dtype}"
            )
        nb = name.encode("utf-8")
        t = t.detach().cpu().contiguous()
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
        if t.dim():
            out += struct.pack(f"<{t.dim()}Q", *t.shape)
        out += t.numpy().tobytes()
    return bytes(out)


def unpack_tensors(payload: bytes) -> dict:
    view = memoryview(payload)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointIntegrityError("tensor pack truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointIntegrityError(f"unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        numel = 1
        for s in shape:
            numel *= s
        np_dtype = np.dtype(_NP_DTYPES[code])
        raw = take(numel * np_dtype.itemsize)
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr).to(_CODE_DTYPES[code])
    if pos != len(view):
        raise CheckpointIntegrityError("trailing bytes in tensor pack")
    return tensors


def save_container(path, sections):
    """sections: ordered list of (name, payload bytes)."""
    body = bytearray(MAGIC)
    body += struct.pack("<II", VERSION, len(sections))
    for name, payload in sections:
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<Q", len(payload)) + payload
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(body)
    os.replace(tmp, path)


def load_container(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointIntegrityError(f"{path}: not a checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointIntegrityError(f"{path}: crc mismatch, file corrupt")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointIntegrityError(
            f"{path}: format version {version}, expected {VERSION}"
        )
    pos, end = 12, len(blob) - 4
    sections = []
    for _ in range(count):
        if pos + 2 > end:
            raise CheckpointIntegrityError(f"{path}: truncated section header")
        (name_len,) = struct.unpack("<H", blob[pos:pos + 2])
        pos += 2
        if pos + name_len + 8 > end:
            raise CheckpointIntegrityError(f"{path}: truncated section header")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (payload_len,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        if pos + payload_len > end:
            raise CheckpointIntegrityError(f"{path}: truncated section {name!r}")
        sections.append((name, blob[pos:pos + payload_len]))
        pos += payload_len
    if pos != end:
        raise CheckpointIntegrityError(f"{path}: trailing bytes after sections")
    return sections


@dataclass
class CheckpointData:
    step: int
    config_text: str
    gen: dict
    ema: dict
    disc: dict
    opt_g: dict
    opt_d: dict
    rng: bytes


def save_checkpoint(path, *, step: int, config_text: str, gen: dict,
                    ema: dict, disc: dict, opt_g: dict, opt_d: dict,
                    rng: bytes):
    meta = json.dumps(
        {"config": config_text, "format": VERSION, "step": step},
        sort_keys=True,
    ).encode("utf-8")
    save_container(path, [
        ("meta", meta),
        ("gen", pack_tensors(gen)),
        ("ema", pack_tensors(ema)),
        ("disc", pack_tensors(disc)),
        ("opt_g", pack_tensors(opt_g)),
        ("opt_d", pack_tensors(opt_d)),
        ("rng", rng),
    ])


def load_checkpoint(path) -> CheckpointData:
    sections = dict(load_container(path))
    for required in ("meta", "gen", "ema", "disc", "opt_g", "opt_d", "rng"):
        if required not in sections:
            raise CheckpointIntegrityError(f"{path}: missing section {required!r}")
    try:
        meta = json.loads(sections["meta"].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: bad meta section: {exc}") from exc
    return CheckpointData(
        step=int(meta["step"]),
        config_text=meta["config"],
        gen=unpack_tensors(sections["gen"]),
        ema=unpack_tensors(sections["ema"]),
        disc=unpack_tensors(sections["disc"]),
        opt_g=unpack_tensors(sections["opt_g"]),
        opt_d=unpack_tensors(sections["opt_d"]),
        rng=sections["rng"],
    )
