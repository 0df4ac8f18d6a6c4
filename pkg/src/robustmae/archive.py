"""Binary tensor archive (``.rmae``).

Layout, all integers little-endian::

    magic      b"RMAE"
    version    u32 (currently 1)
    entries    u32
    n_meta     u8
    n_meta x { key_len u32, key bytes (utf-8), value f64 }
    entries x {
        name_len u32, name bytes (utf-8),
        dtype u8   (0 = f32, 1 = f64, 2 = complex64 as interleaved f32 pairs),
        rank u8, dims u32 x rank,
        payload (little-endian, C order)
    }
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"RMAE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<f4")}


class ArchiveError(ValueError):
    pass


def _code(t: torch.Tensor) -> int:
    if t.dtype == torch.float32:
        return 0
    if t.dtype == torch.float64:
        return 1
    if t.dtype == torch.complex64:
        return 2
    raise ArchiveError(f"unsupported dtype {t.dtype}")


def encode(tensors: dict[str, torch.Tensor], meta: dict[str, float] | None = None) -> bytes:
    meta = meta or {}
    if len(meta) > 255:
        raise ArchiveError("at most 255 metadata entries")
    out = [MAGIC, struct.pack("<IIB", VERSION, len(tensors), len(meta))]
    for key, value in meta.items():
        k = key.encode()
        out.append(struct.pack("<I", len(k)) + k + struct.pack("<d", float(value)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        code = _code(t)
        n = name.encode()
        out.append(struct.pack("<I", len(n)) + n + struct.pack("<BB", code, t.dim()))
        out.append(struct.pack(f"<{t.dim()}I", *t.shape))
        arr = torch.view_as_real(t).numpy() if code == 2 else t.numpy()
        out.append(arr.astype(_DTYPES[code], copy=False).tobytes())
    return b"".join(out)


def decode(raw: bytes) -> tuple[dict[str, torch.Tensor], dict[str, float]]:
    if raw[:4] != MAGIC:
        raise ArchiveError("bad magic")
    try:
        version, count, n_meta = struct.unpack_from("<IIB", raw, 4)
    except struct.error as e:
        raise ArchiveError("truncated header") from e
    if version != VERSION:
        raise ArchiveError(f"unsupported version {version}")
    pos = 13
    meta = {}
    tensors = {}
    try:
        for _ in range(n_meta):
            (klen,) = struct.unpack_from("<I", raw, pos)
            key = raw[pos + 4 : pos + 4 + klen].decode()
            pos += 4 + klen
            (meta[key],) = struct.unpack_from("<d", raw, pos)
            pos += 8
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + nlen].decode()
            pos += 4 + nlen
            code, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            if code not in _DTYPES:
                raise ArchiveError(f"unknown dtype code {code} for entry {name!r}")
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count_el = int(np.prod(dims, dtype=np.int64)) * (2 if code == 2 else 1)
            nbytes = count_el * _DTYPES[code].itemsize
            if pos + nbytes > len(raw):
                raise ArchiveError(f"truncated payload for entry {name!r}")
            arr = np.frombuffer(raw, dtype=_DTYPES[code], count=count_el, offset=pos).copy()
            pos += nbytes
            if code == 2:
                t = torch.view_as_complex(torch.from_numpy(arr.reshape(*dims, 2)))
            else:
                t = torch.from_numpy(arr.reshape(dims)).to(torch.float32 if code == 0 else torch.float64)
            tensors[name] = t
    except struct.error as e:
        raise ArchiveError("truncated archive") from e
    return tensors, meta


def save_archive(path, tensors: dict[str, torch.Tensor], meta: dict[str, float] | None = None) -> None:
    """Atomically write ``tensors`` (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(tensors, meta))
    os.replace(tmp, path)


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict[str, float]]:
    return decode(Path(path).read_bytes())
