"""VAE-guided mask refiner: upsamples the latent-resolution mask to full
resolution, fusing hierarchical VAE decoder features by elementwise
addition (through 1x1x1 channel adapters) at each stage.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import NumericError, ShapeError
from .nn import ParamSet, conv_init
from .rng import Rng
from .tensor import Tensor
from .volume import Volume


class RefinerParams:
    """Three upsampling stages (latent -> 2x -> 4x) with per-stage
    feature adapters and a sigmoid head."""

    def __init__(self, seed=0):
        ps = ParamSet()
        rng = Rng(seed).split(20)
        conv_init(ps, rng.split(0), "q1", 16, 1, 3)
        conv_init(ps, rng.split(1), "adapt1", 16, 32, 1, scale=0.1)
        conv_init(ps, rng.split(2), "q2", 16, 16, 3)
        conv_init(ps, rng.split(3), "adapt2", 16, 16, 1, scale=0.1)
        conv_init(ps, rng.split(4), "q3", 4, 16, 3)
        conv_init(ps, rng.split(5), "adapt3", 4, 1, 1, scale=0.1)
        conv_init(ps, rng.split(6), "head", 1, 4, 1)
        self.ps = ps

    def params(self):
        return self.ps.tensors()

    @classmethod
    def from_state(cls, state):
        p = cls()
        p.ps.load_state_dict(state)
        return p

    def zero_adapters(self):
        """Null the feature path; refine then reduces to a pure
        upsampler of the mask."""
        for name in ("adapt1", "adapt2", "adapt3"):
            self.ps[name + ".w"].data[:] = 0.0
            self.ps[name + ".b"].data[:] = 0.0


def refine(params, m1_hat, features):
    """Full-resolution soft mask in (0,1) from the latent mask and the
    VAE decoder features (f1 latent-res, f2 2x, f3 full-res)."""
    f1, f2, f3 = features
    if m1_hat.shape[2:] != f1.shape[2:]:
        raise ShapeError("mask %s and f1 %s spatial dims differ"
                         % (m1_hat.shape, f1.shape))
    ps = params.ps

    def conv(name, x, pad):
        return T.conv3d(x, ps[name + ".w"], ps[name + ".b"], 1, pad)

    q1 = T.silu(conv("q1", m1_hat, 1)) + conv("adapt1", f1, 0)
    q2 = T.silu(conv("q2", T.nearest_up2(q1), 1)) + conv("adapt2", f2, 0)
    if q2.shape[2:] != f2.shape[2:]:
        raise ShapeError("refiner stage 2 dims %s do not match f2 %s"
                         % (q2.shape, f2.shape))
    q3 = T.silu(conv("q3", T.nearest_up2(q2), 1)) + conv("adapt3", f3, 0)
    return T.sigmoid(conv("head", q3, 0))


def loss_rec(refined, target):
    """MSE between the soft refined mask and the binary ground truth."""
    tgt = target if isinstance(target, Tensor) else Tensor(
        target.data[None] if isinstance(target, Volume) else target)
    if refined.shape != tgt.shape:
        raise ShapeError("refined %s vs target %s" %
                         (refined.shape, tgt.shape))
    diff = refined - tgt
    return T.tmean(diff * diff)


def binarize(soft, threshold=0.5):
    """Voxelwise indicator [soft >= threshold] (>= convention, so values
    exactly at the threshold map to 1)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0,1)")
    if isinstance(soft, Volume):
        return Volume((soft.data >= threshold).astype(np.float32),
                      kind="binary_mask", spacing=soft.spacing)
    data = soft.data if isinstance(soft, Tensor) else np.asarray(soft)
    return (data >= threshold).astype(np.float32)


def nearest_up_mask(m1, factor=4, threshold=0.5):
    """No-refiner baseline: nearest-neighbor upsample + threshold."""
    data = np.asarray(m1) if isinstance(m1, np.ndarray) \
        else m1.data if hasattr(m1, "data") else np.asarray(m1)
    up = data.repeat(factor, axis=-3).repeat(factor, axis=-2) \
        .repeat(factor, axis=-1)
    return (up >= threshold).astype(np.float32)


@dataclasses.dataclass
class RefinerTrainConfig:
    steps: int = 1000
    lr: float = 3e-3
    batch: int = 2
    alpha: float = 0.15  # box expansion; must match the flow's regime
    seed: int = 0


def train_refiner(cfg, samples, vae_params, flow_params, ckpt_path=None,
                  log=None):
    """Stage-3 training: teacher-forced m1_hat from the frozen flow model
    at random t, features from the frozen VAE decoder, MSE to the pixel
    ground-truth mask. samples: list of (image, mask) Volume pairs."""
    from .flow import build_flow_entries, forward_interpolate, \
        one_step_predict, prepare_flow_batch
    from .optim import AdamState, adam_step, zero_grads

    vae_params.ps.freeze()
    flow_params.ps.freeze()
    entries = build_flow_entries(samples, vae_params)
    params = RefinerParams(seed=cfg.seed)
    plist = params.params()
    state = AdamState(plist, lr=cfg.lr)
    rng = Rng(cfg.seed).split(300)
    alpha = cfg.alpha
    for step in range(cfg.steps):
        idx = rng.integers(0, len(entries), (cfg.batch,))
        batch = prepare_flow_batch([entries[i] for i in idx], rng, alpha)
        x_t = forward_interpolate(batch.x1, batch.eps, batch.t)
        v_z, v_m = flow_params.forward(x_t, batch.z_m, batch.b_ind, batch.t)
        z1_hat, m1_hat = one_step_predict(x_t, v_z, v_m, batch.t)
        _, f1, f2, f3 = vae_params.decode_with_features(z1_hat.detach())
        refined = refine(params, m1_hat.detach(), (f1, f2, f3))
        loss = loss_rec(refined, batch.masks_px)
        val = loss.item()
        if not np.isfinite(val):
            if ckpt_path:
                save_checkpoint(ckpt_path, "refiner", params.ps.state_dict())
            raise NumericError("NaN/inf refiner loss at step %d" % step)
        zero_grads(plist)
        loss.backward()
        adam_step(plist, state)
        if log is not None:
            log.append("%d\t%.6f" % (step, val))
    if ckpt_path:
        save_checkpoint(ckpt_path, "refiner", params.ps.state_dict())
    return params
