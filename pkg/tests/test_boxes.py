"""Bounding-box pseudo-mask generation."""

import numpy as np
import pytest

from flowsynth.boxes import (BBox3, bbox_to_latent, box_indicator,
                             expand_bbox, mask_latents, prepare_mask_latent,
                             tight_bbox)
from flowsynth.errors import DataError, ShapeError
from flowsynth.rng import Rng
from flowsynth.tensor import Tensor


def test_bbox_validation_and_extents():
    b = BBox3((1, 2, 3), (4, 5, 6))
    assert b.extents() == (4, 4, 4)
    with pytest.raises(ShapeError):
        BBox3((5, 0, 0), (4, 9, 9))


def test_tight_bbox_matches_argwhere_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        mask = (rng.random((12, 12, 12)) > 0.97).astype(np.float32)
        if not mask.any():
            mask[3, 4, 5] = 1.0
        box = tight_bbox(mask)
        fg = np.argwhere(mask > 0.5)
        assert box.lo == tuple(fg.min(axis=0))
        assert box.hi == tuple(fg.max(axis=0))
        # minimality: every face of the box touches a foreground voxel
        for ax in range(3):
            assert (fg[:, ax] == box.lo[ax]).any()
            assert (fg[:, ax] == box.hi[ax]).any()


def test_tight_bbox_empty_mask():
    with pytest.raises(DataError):
        tight_bbox(np.zeros((8, 8, 8), np.float32))


def test_expand_bbox_contains_and_clamps():
    box = BBox3((5, 5, 5), (8, 8, 8))
    for seed in range(20):
        ex = expand_bbox(box, Rng(seed), 0.15, (16, 16, 16))
        for ax in range(3):
            assert 0 <= ex.lo[ax] <= box.lo[ax]
            assert box.hi[ax] <= ex.hi[ax] <= 15
            # offsets bounded by alpha * D rounded
            assert box.lo[ax] - ex.lo[ax] <= round(0.15 * 16)
            assert ex.hi[ax] - box.hi[ax] <= round(0.15 * 16)


def test_expand_bbox_alpha_zero_identity():
    box = BBox3((2, 3, 4), (6, 7, 8))
    ex = expand_bbox(box, Rng(0), 0.0, (16, 16, 16))
    assert (ex.lo, ex.hi) == (box.lo, box.hi)
    with pytest.raises(DataError):
        expand_bbox(box, Rng(0), -0.1, (16, 16, 16))


def test_bbox_to_latent_covers_pixel_box():
    box = BBox3((3, 4, 9), (10, 11, 14))
    lb = bbox_to_latent(box)
    assert lb.frame == "latent"
    assert lb.lo == (0, 1, 2)
    assert lb.hi == (2, 2, 3)
    # covering property: 4x upsample of the latent box spans the pixel box
    for ax in range(3):
        assert lb.lo[ax] * 4 <= box.lo[ax]
        assert lb.hi[ax] * 4 + 3 >= box.hi[ax]
    with pytest.raises(ShapeError):
        bbox_to_latent(lb)


def test_box_indicator_volume():
    lb = BBox3((1, 1, 1), (2, 2, 2), "latent")
    ind = box_indicator(lb, (4, 4, 4))
    assert ind.shape == (1, 1, 4, 4, 4)
    assert ind.data.sum() == 8.0
    assert ind.data[0, 0, 1, 1, 1] == 1.0 and ind.data[0, 0, 0, 0, 0] == 0.0
    with pytest.raises(ShapeError):
        box_indicator(BBox3((0, 0, 0), (1, 1, 1), "pixel"), (4, 4, 4))


def test_mask_latents_zero_inside_identity_outside():
    z = Tensor(np.random.default_rng(1)
               .standard_normal((1, 4, 4, 4, 4)).astype(np.float32))
    ind = box_indicator(BBox3((0, 0, 0), (1, 1, 1), "latent"), (4, 4, 4))
    zm = mask_latents(z, ind)
    inside = ind.data[0, 0] > 0.5
    assert np.all(zm.data[0][:, inside] == 0.0)
    assert np.array_equal(zm.data[0][:, ~inside], z.data[0][:, ~inside])


def test_prepare_mask_latent_occupancy():
    mask = np.zeros((8, 8, 8), np.float32)
    mask[0:4, 0:4, 0:4] = 1.0  # exactly one latent cell fully covered
    m1 = prepare_mask_latent(mask)
    assert m1.shape == (1, 1, 2, 2, 2)
    assert m1.data[0, 0, 0, 0, 0] == 1.0
    assert m1.data[0, 0, 1, 1, 1] == 0.0
    mask[4, 4, 4] = 1.0  # 1/64 occupancy in one block
    m1 = prepare_mask_latent(mask)
    assert abs(m1.data[0, 0, 1, 1, 1] - 1.0 / 64) < 1e-6
