"""Mask refiner: contracts, feature-path behavior, gradients."""

import numpy as np
import pytest

from flowsynth.errors import ShapeError
from flowsynth.refiner import (RefinerParams, RefinerTrainConfig, binarize,
                               loss_rec, nearest_up_mask, refine,
                               train_refiner)
from flowsynth.tensor import Tensor, grad_check


def _feats(seed, latent=2):
    rng = np.random.default_rng(seed)
    f1 = Tensor(rng.standard_normal((1, 32) + (latent,) * 3)
                .astype(np.float32))
    f2 = Tensor(rng.standard_normal((1, 16) + (2 * latent,) * 3)
                .astype(np.float32))
    f3 = Tensor(rng.random((1, 1) + (4 * latent,) * 3).astype(np.float32))
    return f1, f2, f3


def _m1(seed, latent=2):
    return Tensor(np.random.default_rng(seed)
                  .random((1, 1) + (latent,) * 3).astype(np.float32))


def test_refine_shape_and_range():
    p = RefinerParams()
    out = refine(p, _m1(0), _feats(1))
    assert out.shape == (1, 1, 8, 8, 8)
    assert out.data.min() > 0.0 and out.data.max() < 1.0


def test_refine_shape_mismatch():
    p = RefinerParams()
    f1, f2, f3 = _feats(2)
    with pytest.raises(ShapeError):
        refine(p, _m1(3, latent=3), (f1, f2, f3))


def test_zero_adapters_ignore_features():
    p = RefinerParams(seed=1)
    p.zero_adapters()
    m1 = _m1(4)
    a = refine(p, m1, _feats(5))
    b = refine(p, m1, _feats(6))
    assert np.array_equal(a.data, b.data)


def test_feature_path_is_live_by_default():
    p = RefinerParams(seed=1)
    m1 = _m1(7)
    a = refine(p, m1, _feats(8))
    b = refine(p, m1, _feats(9))
    assert np.abs(a.data - b.data).max() > 0


def test_grad_check_refine_and_loss_rec():
    p = RefinerParams(seed=2)
    m1 = _m1(10)
    feats = _feats(11)
    target = Tensor((np.random.default_rng(12).random((1, 1, 8, 8, 8))
                     > 0.5).astype(np.float32))
    w = p.ps["q1.w"]
    assert grad_check(
        lambda t: loss_rec(refine(p, m1, feats), target), w) < 1e-3


def test_loss_rec_shape_mismatch():
    p = RefinerParams()
    out = refine(p, _m1(13), _feats(14))
    with pytest.raises(ShapeError):
        loss_rec(out, Tensor(np.zeros((1, 1, 4, 4, 4), np.float32)))


def test_binarize_threshold_convention():
    soft = np.array([0.2, 0.5, 0.8], np.float32)
    out = binarize(soft, 0.5)
    assert out.tolist() == [0.0, 1.0, 1.0]  # >= convention at threshold
    with pytest.raises(ValueError):
        binarize(soft, 0.0)
    with pytest.raises(ValueError):
        binarize(soft, 1.0)


def test_nearest_up_mask_baseline():
    m1 = np.zeros((1, 2, 2, 2), np.float32)
    m1[0, 0, 0, 0] = 0.9
    up = nearest_up_mask(m1)
    assert up.shape == (1, 8, 8, 8)
    assert up[0, :4, :4, :4].min() == 1.0
    assert up[0, 4:, :, :].max() == 0.0


def test_smoke_training_decreases_loss(tiny_pairs, tiny_models):
    log = []
    train_refiner(RefinerTrainConfig(steps=60), tiny_pairs,
                  tiny_models["vae"], tiny_models["flow"], log=log)
    first = float(log[0].split("\t")[1])
    last = np.mean([float(l.split("\t")[1]) for l in log[-5:]])
    assert last < first


def test_training_determinism(tiny_pairs, tiny_models):
    cfg = RefinerTrainConfig(steps=6)
    a = train_refiner(cfg, tiny_pairs, tiny_models["vae"],
                      tiny_models["flow"])
    b = train_refiner(cfg, tiny_pairs, tiny_models["vae"],
                      tiny_models["flow"])
    for k in a.ps.names():
        assert np.array_equal(a.ps[k].data, b.ps[k].data), k
