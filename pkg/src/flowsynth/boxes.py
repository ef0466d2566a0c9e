"""Boundary-aware pseudo mask generation: tight boxes around lesions,
randomized expansion, pixel-to-latent box mapping, and masked latents.

All functions are pure; boxes are inclusive on both ends.
"""

import dataclasses

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, mean_down

LATENT_FACTOR = 4


def _mask_array(mask):
    """(D,H,W) array from a Volume, Tensor, or plain array."""
    data = mask if isinstance(mask, np.ndarray) else \
        mask.data if hasattr(mask, "data") else np.asarray(mask)
    if data.ndim == 4:
        data = data[0]
    return data


@dataclasses.dataclass(frozen=True)
class BBox3:
    lo: tuple  # inclusive (z, y, x) voxel min
    hi: tuple  # inclusive (z, y, x) voxel max
    frame: str = "pixel"  # "pixel" or "latent"

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ShapeError("invalid box: lo %s > hi %s"
                             % (self.lo, self.hi))

    def extents(self):
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))


def tight_bbox(mask):
    """Minimal pixel-frame box containing every foreground voxel.

    ``mask`` is a binary Volume or a (D,H,W) array.
    """
    data = _mask_array(mask)
    fg = np.argwhere(data > 0.5)
    if fg.size == 0:
        raise DataError("empty mask")
    return BBox3(tuple(int(v) for v in fg.min(axis=0)),
                 tuple(int(v) for v in fg.max(axis=0)), "pixel")


def expand_bbox(box, rng, alpha, dims):
    """Expand each face by an independent offset ~ U(0, alpha * D_i),
    rounded to the nearest voxel and clamped to the volume bounds."""
    if alpha < 0:
        raise DataError("alpha must be >= 0")
    lo, hi = [], []
    for axis in range(3):
        d_lo = float(rng.uniform(0.0, alpha * dims[axis]))
        d_hi = float(rng.uniform(0.0, alpha * dims[axis]))
        lo.append(max(0, box.lo[axis] - int(round(d_lo))))
        hi.append(min(dims[axis] - 1, box.hi[axis] + int(round(d_hi))))
    return BBox3(tuple(lo), tuple(hi), box.frame)


def bbox_to_latent(box, factor=LATENT_FACTOR):
    """Smallest latent-frame box whose 4x upsampling covers the pixel box."""
    if box.frame != "pixel":
        raise ShapeError("expected a pixel-frame box")
    return BBox3(tuple(l // factor for l in box.lo),
                 tuple(h // factor for h in box.hi), "latent")


def box_indicator(box, latent_dims):
    """1-channel {0,1} field, 1.0 inside the (inclusive) box."""
    if box.frame != "latent":
        raise ShapeError("expected a latent-frame box")
    ind = np.zeros(latent_dims, dtype=np.float32)
    sl = tuple(slice(l, h + 1) for l, h in zip(box.lo, box.hi))
    ind[sl] = 1.0
    return Tensor(ind[None, None])  # (1, 1, D, H, W)


def mask_latents(z1, b_ind):
    """(1 - B) * z1: zero inside the box, untouched outside."""
    if z1.shape[2:] != b_ind.shape[2:]:
        raise ShapeError("latents %s and indicator %s disagree"
                         % (z1.shape, b_ind.shape))
    return (Tensor(1.0) - b_ind) * z1


def prepare_mask_latent(mask, factor=LATENT_FACTOR):
    """Mean-pool the pixel mask down to latent dims (soft occupancy)."""
    data = _mask_array(mask)
    t = Tensor(data[None, None])  # (1, 1, D, H, W)
    return mean_down(t, factor)
