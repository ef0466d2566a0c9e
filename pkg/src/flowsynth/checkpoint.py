"""Versioned named-tensor checkpoint format, shared by every model.

Layout (little-endian): magic "CKPT" | version u32 | model-kind tag u8 |
entry count u32 | per entry: name length u16 + UTF-8 name + rank u8 +
extents u32[] + f32 payload.
"""

import hashlib
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"CKPT"
VERSION = 1

MODEL_KINDS = {"vae": 0, "flow": 1, "refiner": 2, "segmenter": 3}
_KIND_NAME = {v: k for k, v in MODEL_KINDS.items()}


def save_checkpoint(path, kind, state):
    """state: ordered mapping name -> float32 ndarray."""
    if kind not in MODEL_KINDS:
        raise CheckpointError("unknown model kind %r" % kind)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBI", VERSION, MODEL_KINDS[kind], len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expect_kind=None):
    """Returns (kind, ordered dict name -> float32 ndarray)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise CheckpointError("cannot read checkpoint %s: %s" % (path, exc))
    if raw[:4] != MAGIC:
        raise CheckpointError("%s: not a checkpoint (bad magic)" % path)
    off = 4
    version, kind_code, count = struct.unpack_from("<IBI", raw, off)
    off += struct.calcsize("<IBI")
    if version != VERSION:
        raise CheckpointError("%s: unsupported version %d" % (path, version))
    if kind_code not in _KIND_NAME:
        raise CheckpointError("%s: unknown model kind %d" % (path, kind_code))
    kind = _KIND_NAME[kind_code]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError("%s: expected a %s checkpoint, found %s"
                              % (path, expect_kind, kind))
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from("<%dI" % rank, raw, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
            off += 4 * n
            state[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError("%s: truncated or corrupt (%s)" % (path, exc))
    return kind, state


def checkpoint_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()
