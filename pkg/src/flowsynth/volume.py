"""3D scalar-field container and the on-disk "VOLF" format.

VOLF layout (little-endian): magic "VOLF" | format version u32 |
kind u8 (0 image, 1 binary_mask, 2 soft_mask) | channels u32 |
D,H,W u32 each | spacing 3*f32 | payload C*D*H*W f32 row-major.
"""

import struct

import numpy as np

from .errors import ShapeError, VolumeFormatError

MAGIC = b"VOLF"
FORMAT_VERSION = 1

KINDS = ("image", "binary_mask", "soft_mask")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}

_MAX_EXTENT = 1 << 16


class Volume:
    """Dense (C, D, H, W) float32 field with voxel spacing and a kind tag."""

    def __init__(self, data, kind="image", spacing=(1.0, 1.0, 1.0)):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError("volume data must be (C,D,H,W) or (D,H,W), "
                             "got %s" % (data.shape,))
        if kind not in _KIND_CODE:
            raise ValueError("unknown volume kind %r" % kind)
        self.data = np.ascontiguousarray(data)
        self.kind = kind
        self.spacing = tuple(float(s) for s in spacing)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def dims(self):
        return self.data.shape[1:]

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.kind == other.kind
                and self.spacing == other.spacing
                and np.array_equal(self.data, other.data))


def write_volume(path, v):
    d, h, w = v.dims
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBIIII", FORMAT_VERSION, _KIND_CODE[v.kind],
                            v.channels, d, h, w))
        f.write(struct.pack("<3f", *v.spacing))
        f.write(v.data.astype("<f4").tobytes())


def read_volume(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise VolumeFormatError("bad_magic", "%s: bad magic %r" %
                                (path, raw[:4]))
    header = struct.calcsize("<IBIIII") + struct.calcsize("<3f")
    if len(raw) < 4 + header:
        raise VolumeFormatError("truncated", "%s: truncated header" % path)
    version, kind_code, c, d, h, w = struct.unpack_from("<IBIIII", raw, 4)
    if version != FORMAT_VERSION:
        raise VolumeFormatError("bad_version", "%s: unsupported version %d"
                                % (path, version))
    if kind_code >= len(KINDS):
        raise VolumeFormatError("bad_kind", "%s: unknown kind %d"
                                % (path, kind_code))
    if max(d, h, w, c) >= _MAX_EXTENT or min(d, h, w, c) < 1:
        raise VolumeFormatError("dim_overflow", "%s: bad extents %s"
                                % (path, (c, d, h, w)))
    spacing = struct.unpack_from("<3f", raw, 4 + struct.calcsize("<IBIIII"))
    payload = raw[4 + header:]
    n = c * d * h * w
    if len(payload) != 4 * n:
        raise VolumeFormatError(
            "truncated", "%s: payload %d bytes, header implies %d"
            % (path, len(payload), 4 * n))
    data = np.frombuffer(payload, dtype="<f4").reshape(c, d, h, w)
    return Volume(data.copy(), kind=KINDS[kind_code], spacing=spacing)
