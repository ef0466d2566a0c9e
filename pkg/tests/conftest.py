"""Shared fixtures: the acceptance-scale training artifacts are
expensive (tens of minutes), so they are built once into a disk cache
keyed by their exact configuration; every training routine is
bit-deterministic, so a cache hit is byte-identical to a fresh run."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from cachetools import (ACCEPT, cache_dir, get_dataset, get_refs,  # noqa
                        get_flow, get_refiner, get_segmenter, get_vae)


@pytest.fixture(scope="session")
def tiny_spec():
    from flowsynth.phantom import PhantomSpec
    return PhantomSpec(dims=(16, 16, 16), organ_radii=(5, 7),
                       lesion_radii=(2, 4))


@pytest.fixture(scope="session")
def tiny_pairs(tiny_spec):
    """Eight deterministic 16^3 (image, mask) pairs."""
    from flowsynth.phantom import gen_sample
    out = []
    for i in range(8):
        img, mask, _, _ = gen_sample(500 + i, tiny_spec)
        out.append((img, mask))
    return out


@pytest.fixture(scope="session")
def tiny_models(tiny_pairs):
    """Briefly trained 16^3 VAE/flow/refiner/segmenter for unit tests
    that need plausible (not converged) weights."""
    from flowsynth.flow import FlowTrainConfig, train_flow
    from flowsynth.refiner import RefinerTrainConfig, train_refiner
    from flowsynth.segmenter import SegTrainConfig, train_segmenter
    from flowsynth.vae import VaeTrainConfig, train_vae
    images = [img for img, _ in tiny_pairs]
    vae = train_vae(VaeTrainConfig(steps=40), images)
    flow = train_flow(FlowTrainConfig(steps=20, batch=2), tiny_pairs, vae)
    refiner = train_refiner(RefinerTrainConfig(steps=15), tiny_pairs,
                            vae, flow)
    seg = train_segmenter(SegTrainConfig(steps=20), tiny_pairs)
    return {"vae": vae, "flow": flow, "refiner": refiner, "seg": seg}


def rng_f32(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape) \
        .astype(np.float32)
