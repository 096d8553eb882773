"""Binary checkpoint container.

Layout (little-endian)::

    b"MVLCKPT\\0"            8 bytes magic
    u32 version             currently 1
    u32 header_len
    u32 header_crc32        zlib.crc32 of the header bytes
    header_len bytes        UTF-8 JSON: config, stage_tag, stage_index, variant,
                            rng_state, blob names in order, blob offsets,
                            free-form extra
    per parameter blob:
        u16 name_len, name bytes
        u8 dtype code (1 = float32, 2 = float64)
        u8 trainable flag
        u8 ndim, u8 reserved (0)
        u64[ndim] shape
        u64 nbytes
        32 bytes sha256 over everything above in this blob plus the data
        nbytes of C-order data

``blob_offsets[i]`` is where blob i starts, counted from the first byte after
the header, with one extra entry for the end of the last blob.  A damaged
length field therefore spoils only its own blob.

Files are written to a temporary name and renamed into place, so an aborted
write never replaces a good checkpoint.
"""

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ChecksumError
from .model import ModelConfig, ModelState

MAGIC = b"MVLCKPT\0"
VERSION = 1
_PREFIX = struct.Struct("<8sIII")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


@dataclass
class CheckpointMeta:
    config: dict
    stage_tag: str = ""
    stage_index: int = -1
    variant: str = ""
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    blob_names: list = field(default_factory=list)
    blob_offsets: list = field(default_factory=list)


def _blob_bytes(name, p):
    data = np.ascontiguousarray(p.data)
    nb = name.encode()
    meta = struct.pack("<H", len(nb)) + nb
    meta += struct.pack("<BBBB", _CODES[data.dtype], int(p.trainable), data.ndim, 0)
    meta += struct.pack(f"<{data.ndim}Q", *data.shape)
    raw = data.astype(data.dtype.newbyteorder("<"), copy=False).tobytes()
    meta += struct.pack("<Q", len(raw))
    digest = hashlib.sha256(meta + raw).digest()
    return meta + digest + raw


def save_checkpoint(path, model, stage_tag="", stage_index=-1, variant="", rng_state=None,
                    extra=None):
    blobs = [_blob_bytes(n, p) for n, p in model.params.items()]
    offsets = [0]
    for b in blobs:
        offsets.append(offsets[-1] + len(b))
    header = {"config": model.config.to_dict(), "stage_tag": stage_tag,
              "stage_index": stage_index, "variant": variant, "rng_state": rng_state,
              "blob_names": list(model.params), "blob_offsets": offsets, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [_PREFIX.pack(MAGIC, VERSION, len(hb), zlib.crc32(hb)), hb] + blobs
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(parts))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def _read_header(buf):
    if len(buf) < _PREFIX.size:
        raise ChecksumError("file too short for a checkpoint header", blob="header")
    magic, version, hlen, crc = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ChecksumError("bad magic: not a checkpoint file", blob="header")
    if version != VERSION:
        raise ChecksumError(f"unsupported checkpoint version {version}", blob="header")
    hb = buf[_PREFIX.size: _PREFIX.size + hlen]
    if len(hb) != hlen or zlib.crc32(hb) != crc:
        raise ChecksumError("header checksum mismatch", blob="header")
    h = json.loads(hb.decode())
    meta = CheckpointMeta(h["config"], h["stage_tag"], h["stage_index"], h["variant"],
                          h["rng_state"], h.get("extra", {}), h["blob_names"],
                          h["blob_offsets"])
    if len(meta.blob_offsets) != len(meta.blob_names) + 1:
        raise ChecksumError("header blob table is inconsistent", blob="header")
    return meta, _PREFIX.size + hlen


def _read_blob(buf, off, expected_name, end):
    """Parse the blob in ``buf[off:end]``; returns (name, array, trainable, ok)."""
    view = memoryview(buf)[:end]
    start = off
    try:
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off: off + nlen]).decode("utf-8", errors="replace")
        off += nlen
        code, trainable, ndim, _ = struct.unpack_from("<BBBB", view, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", view, off)
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", view, off)
        off += 8
        meta_end = off
        digest = bytes(view[off: off + 32])
        off += 32
        raw = view[off: off + nbytes]
        off += nbytes
        dtype = _DTYPES.get(code)
        if (dtype is None or off != end or len(raw) != nbytes or name != expected_name
                or int(np.prod(shape)) * dtype.itemsize != nbytes):
            return expected_name, None, False, False
        h = hashlib.sha256(view[start:meta_end])
        h.update(raw)
        if h.digest() != digest:
            return expected_name, None, False, False
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        return name, arr, bool(trainable), True
    except (struct.error, ValueError):
        return expected_name, None, False, False


def _blobs(buf, meta, body):
    for name, a, b in zip(meta.blob_names, meta.blob_offsets, meta.blob_offsets[1:]):
        yield _read_blob(buf, body + a, name, body + b)


def verify_checkpoint(path):
    """Per-blob integrity report: (meta, [(name, ok), ...]).  Never raises on
    blob corruption; a damaged header raises ChecksumError."""
    with open(path, "rb") as f:
        buf = f.read()
    meta, body = _read_header(buf)
    results = [(name, ok) for name, _, _, ok in _blobs(buf, meta, body)]
    if body + meta.blob_offsets[-1] != len(buf):
        results.append(("<trailing bytes>", False))
    return meta, results


def load_checkpoint(path, strict=True):
    """Rebuild a ModelState; raises ChecksumError naming the first bad blob."""
    with open(path, "rb") as f:
        buf = f.read()
    meta, body = _read_header(buf)
    arrays, flags = {}, {}
    for name, arr, trainable, ok in _blobs(buf, meta, body):
        if not ok:
            raise ChecksumError(f"checksum mismatch in blob {name!r}", blob=name)
        arrays[name], flags[name] = arr, trainable
    end = body + meta.blob_offsets[-1]
    if strict and end != len(buf):
        raise ChecksumError(f"{len(buf) - end} unexpected trailing bytes", blob="<trailing bytes>")
    model = ModelState(ModelConfig.from_dict(meta.config))
    model.load_arrays(arrays)
    for n, t in flags.items():
        model.params[n].trainable = t
    return model, meta
