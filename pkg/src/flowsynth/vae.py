"""Small 3D KL-regularized autoencoder: 4x spatial compression into
4-channel latents, with hierarchical decoder feature taps for the mask
refiner.

Trained first and then frozen; deterministic encode (z = mu) is used
when building flow-training targets so they are stable across epochs.
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

LATENT_CHANNELS = 4
FACTOR = 4


class VaeParams:
    """Encoder 1->16->32 (two stride-2 stages) with 1x1 mu/logvar heads;
    decoder 4->32 then two nearest-up2+conv stages 32->16->1 (sigmoid)."""

    def __init__(self, seed=0):
        ps = ParamSet()
        rng = Rng(seed).split(0)
        conv_init(ps, rng.split(1), "enc1", 16, 1, 3)
        conv_init(ps, rng.split(2), "enc2", 32, 16, 3)
        conv_init(ps, rng.split(3), "mu", LATENT_CHANNELS, 32, 1)
        conv_init(ps, rng.split(4), "logvar", LATENT_CHANNELS, 32, 1,
                  scale=0.01)
        conv_init(ps, rng.split(5), "dec0", 32, LATENT_CHANNELS, 3)
        conv_init(ps, rng.split(6), "dec1", 16, 32, 3)
        conv_init(ps, rng.split(7), "dec2", 1, 16, 3)
        self.ps = ps

    def _conv(self, name, x, stride=1, pad=1):
        return T.conv3d(x, self.ps[name + ".w"], self.ps[name + ".b"],
                        stride, pad)

    def encode(self, x, rng=None):
        """x: Tensor (N,1,D,H,W) with dims divisible by 4.

        Returns (mu, logvar, z); z is the reparameterized draw when an
        rng is given, else mu (deterministic mode).
        """
        x = _as_batch(x)
        for n in x.shape[2:]:
            if n % FACTOR:
                raise ShapeError("input dims %s not divisible by %d"
                                 % (x.shape[2:], FACTOR))
        h = T.silu(self._conv("enc1", x, stride=2))
        h = T.silu(self._conv("enc2", h, stride=2))
        mu = T.conv3d(h, self.ps["mu.w"], self.ps["mu.b"], 1, 0)
        logvar = T.conv3d(h, self.ps["logvar.w"], self.ps["logvar.b"], 1, 0)
        if rng is None:
            z = mu
        else:
            eps = Tensor(rng.normal(mu.shape))
            z = mu + T.exp(logvar * Tensor(0.5)) * eps
        return mu, logvar, z

    def decode(self, z):
        return self.decode_with_features(z)[0]

    def decode_with_features(self, z):
        """Returns (image, f1, f2, f3): activations after each decoder
        stage at latent, 2x, and full resolution; f3 is the sigmoid
        image itself."""
        if z.shape[1] != LATENT_CHANNELS:
            raise ShapeError("latents must have %d channels, got %s"
                             % (LATENT_CHANNELS, z.shape))
        f1 = T.silu(self._conv("dec0", z))
        f2 = T.silu(self._conv("dec1", T.nearest_up2(f1)))
        img = T.sigmoid(self._conv("dec2", T.nearest_up2(f2)))
        return img, f1, f2, img

    def params(self):
        return self.ps.tensors()

    @classmethod
    def from_state(cls, state):
        p = cls()
        p.ps.load_state_dict(state)
        return p


def _as_batch(x):
    if isinstance(x, Volume):
        return Tensor(x.data[None])
    if isinstance(x, np.ndarray):
        return Tensor(x)
    return x


def kl_term(mu, logvar):
    """-1/2 mean(1 + logvar - mu^2 - exp(logvar)); nonnegative."""
    one = Tensor(1.0)
    return T.tmean(one + logvar - mu * mu - T.exp(logvar)) * Tensor(-0.5)


def vae_loss(params, batch, rng, beta=1e-4):
    """MSE reconstruction + beta * KL; returns (loss, parts dict)."""
    x = _as_batch(batch)
    mu, logvar, z = params.encode(x, rng)
    recon = params.decode(z)
    diff = recon - x
    mse = T.tmean(diff * diff)
    kl = kl_term(mu, logvar)
    loss = mse + Tensor(beta) * kl
    return loss, {"mse": mse.item(), "kl": kl.item()}


@dataclasses.dataclass
class VaeTrainConfig:
    steps: int = 2000
    lr: float = 2e-3
    batch: int = 2
    beta: float = 1e-4
    seed: int = 0


def train_vae(cfg, images, ckpt_path=None, log=None):
    """images: list of Volumes (the training split). Returns VaeParams;
    appends tab-separated "step<TAB>loss" lines to ``log`` if given."""
    if not images:
        raise NumericError("empty training set")
    from .optim import AdamState, adam_step, zero_grads

    params = VaeParams(seed=cfg.seed)
    plist = params.params()
    state = AdamState(plist, lr=cfg.lr)
    rng = Rng(cfg.seed).split(100)
    noise_rng = Rng(cfg.seed).split(101)
    data = np.stack([v.data for v in images])  # (n, 1, D, H, W)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(images), (cfg.batch,))
        batch = Tensor(data[np.asarray(idx)])
        loss, _ = vae_loss(params, batch, noise_rng, beta=cfg.beta)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError("NaN/inf VAE loss at step %d" % step)
        zero_grads(plist)
        loss.backward()
        adam_step(plist, state)
        if log is not None:
            log.append("%d\t%.6f" % (step, val))
    if ckpt_path:
        save_checkpoint(ckpt_path, "vae", params.ps.state_dict())
    return params
