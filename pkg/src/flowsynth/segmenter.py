"""Toy 3D segmenter for image-mask pair-alignment scoring: a small
2-level U-Net trained with MSE against the binary mask.

The head is linear (no sigmoid): MSE through a sigmoid saturates on the
~2% foreground base rate — Adam's normalized steps drive every logit
tens of units negative within ~50 steps, after which gradients vanish
and the model is stuck predicting all-background. Plain regression to
{0,1} has no such trap; predictions are thresholded at 0.5."""

import dataclasses

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .errors import NumericError
from .nn import ParamSet, conv_init
from .rng import Rng
from .tensor import Tensor


class SegParams:
    def __init__(self, seed=0):
        ps = ParamSet()
        rng = Rng(seed).split(30)
        conv_init(ps, rng.split(0), "stem", 8, 1, 3)
        conv_init(ps, rng.split(1), "down", 16, 8, 3)
        conv_init(ps, rng.split(2), "up", 8, 16, 3)
        conv_init(ps, rng.split(3), "head", 1, 8, 1)
        self.ps = ps

    def params(self):
        return self.ps.tensors()

    @classmethod
    def from_state(cls, state):
        p = cls()
        p.ps.load_state_dict(state)
        return p

    def forward(self, x):
        ps = self.ps
        h0 = T.silu(T.conv3d(x, ps["stem.w"], ps["stem.b"], 1, 1))
        h1 = T.silu(T.conv3d(h0, ps["down.w"], ps["down.b"], 2, 1))
        u = T.silu(T.conv3d(T.nearest_up2(h1), ps["up.w"], ps["up.b"],
                            1, 1) + h0)
        return T.conv3d(u, ps["head.w"], ps["head.b"], 1, 0)

    def predict_mask(self, image, threshold=0.5):
        """Binary (D,H,W) prediction for one image Volume."""
        out = self.forward(Tensor(image.data[None]))
        return (out.data[0, 0] >= threshold).astype(np.float32)


@dataclasses.dataclass
class SegTrainConfig:
    steps: int = 2000
    lr: float = 5e-3
    batch: int = 2
    seed: int = 0


def train_segmenter(cfg, samples, ckpt_path=None, log=None):
    """samples: (image, mask) Volume pairs from the real training split."""
    from .optim import AdamState, adam_step, zero_grads

    params = SegParams(seed=cfg.seed)
    plist = params.params()
    state = AdamState(plist, lr=cfg.lr)
    rng = Rng(cfg.seed).split(400)
    images = np.stack([img.data for img, _ in samples])
    masks = np.stack([m.data for _, m in samples])
    for step in range(cfg.steps):
        idx = np.asarray(rng.integers(0, len(samples), (cfg.batch,)))
        pred = params.forward(Tensor(images[idx]))
        diff = pred - Tensor(masks[idx])
        loss = T.tmean(diff * diff)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError("NaN/inf segmenter loss at step %d" % step)
        zero_grads(plist)
        loss.backward()
        adam_step(plist, state)
        if log is not None:
            log.append("%d\t%.6f" % (step, val))
    if ckpt_path:
        save_checkpoint(ckpt_path, "segmenter", params.ps.state_dict())
    return params
