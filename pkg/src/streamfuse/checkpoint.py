"""MELCKPT1 parameter files.

Layout (little-endian): magic ``MELCKPT1``, u32 parameter count, then per
parameter u16 name length, UTF-8 name, u8 ndims, u32 per dim, f32 row-major
data.
"""
import struct

import numpy as np

MAGIC = b"MELCKPT1"


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params):
    """Serialise ``params`` (name -> array-like or Tensor) in name order."""
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = params[name]
        arr = getattr(arr, "data", arr)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf):
    try:
        return _parse(buf)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(buf):
    if buf[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = 8
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).copy()
        pos += 4 * n
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
