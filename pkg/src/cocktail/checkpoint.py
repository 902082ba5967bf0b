"""CKTL tensor files.

Layout (little-endian)::

    b"CKTL" | version u32 | count u32 | count x record
    record = name_len u32 | name utf-8 | rank u32 | rank x dim u64 | float32 data
"""
import struct

import numpy as np

from cocktail.errors import CheckpointError

MAGIC = b"CKTL"
VERSION = 1


def dumps(tensors):
    """Serialize an ordered mapping of name -> array."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.array(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def loads(blob):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a CKTL file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported CKTL version {version}, expected {VERSION}")
        pos = 12
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", view, pos)
            pos += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * size > len(view):
                raise CheckpointError(f"tensor {name!r} runs past the end of the file")
            out[name] = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated CKTL file: {exc}") from None
    if pos != len(view):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save(path, tensors):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def prefixed(module, prefix):
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def strip(tensors, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}
