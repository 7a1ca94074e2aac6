"""Weight checkpoint file: little-endian binary of named float32 arrays.

Layout: magic "FDIV", format version u32, array count u32, then per
array: name length u16 + UTF-8 name, rank u8, dims u32 x rank, raw f32
payload.  Round-trips must be bit-exact.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"FDIV"
VERSION = 1


class ChecksumMismatch(ValueError):
    """Checkpoint does not match the expected model layout."""


def save_arrays(path, arrays):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ChecksumMismatch(f"bad magic {blob[:4]!r} in {path}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ChecksumMismatch(f"unsupported checkpoint version {version}")
    off = 12
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(blob):
        raise ChecksumMismatch(f"{len(blob) - off} trailing bytes in {path}")
    return out
