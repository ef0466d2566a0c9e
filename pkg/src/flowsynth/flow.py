"""Spatial-constraint vector field estimator: joint rectified-flow
training of image-latent and mask channels.

Time convention everywhere: t=0 is pure noise, t=1 is data, with the
straight interpolant x_t = (1-t) eps + t x1 and regression target
x1 - eps. Coarse (bounding box) and fine (masked SSIM) constraints are
applied to the one-step clean-sample estimates.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .boxes import bbox_to_latent, box_indicator, expand_bbox, mask_latents, \
    prepare_mask_latent, tight_bbox
from .checkpoint import save_checkpoint
from .errors import DataError, NumericError, ShapeError
from .nn import TIME_EMBED_DIM, ParamSet, conv_init, dense_init, \
    time_embedding
from .rng import Rng
from .ssim import ssim3d
from .tensor import Tensor

JOINT_CHANNELS = 5  # 4 latent + 1 mask
LATENT_CHANNELS = 4


def pack_joint(z, m):
    """Joint variable: channel concatenation [z, m]."""
    if z.shape[2:] != m.shape[2:]:
        raise ShapeError("z %s and m %s spatial dims differ"
                         % (z.shape, m.shape))
    return T.concat([z, m], axis=1)


def unpack_joint(x):
    if x.shape[1] != JOINT_CHANNELS:
        raise ShapeError("joint latent needs %d channels, got %s"
                         % (JOINT_CHANNELS, x.shape))
    return (T.narrow(x, 1, 0, LATENT_CHANNELS),
            T.narrow(x, 1, LATENT_CHANNELS, 1))


def _t_factor(t, like_shape):
    """Broadcastable (N,1,1,1,1) tensor from scalar or per-sample t."""
    arr = np.asarray(t, dtype=np.float32)
    if arr.ndim == 0:
        return Tensor(arr)
    return Tensor(arr.reshape(-1, 1, 1, 1, 1))


def forward_interpolate(x1, eps, t):
    """x_t = (1-t) eps + t x1 along the straight path."""
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DataError("t must lie in [0,1], got %s" % arr)
    tf = _t_factor(t, x1.shape)
    one = Tensor(1.0)
    return (one - tf) * eps + tf * x1


def one_step_predict(x_t, v_z, v_m, t):
    """Clean-sample estimates z1_hat = z_t + (1-t) v_z (same for m).

    At t=1 the remaining time is zero and the state is returned as-is.
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DataError("t must lie in [0,1], got %s" % arr)
    z_t, m_t = unpack_joint(x_t)
    rem = Tensor(1.0) - _t_factor(t, x_t.shape)
    return z_t + rem * v_z, m_t + rem * v_m


class FlowParams:
    """3D U-Net over joint latents: stem + 2 stride-2 stages (32->64),
    mirrored upsampling with additive skips, sinusoidal time embedding
    injected additively per stage, 5-channel output head."""

    STAGES = (("stem", 32), ("down1", 64), ("down2", 64),
              ("up1", 64), ("up2", 32))

    def __init__(self, seed=0, include_box_channel=True):
        self.include_box_channel = bool(include_box_channel)
        in_ch = JOINT_CHANNELS + LATENT_CHANNELS + (
            1 if self.include_box_channel else 0)
        ps = ParamSet()
        rng = Rng(seed).split(10)
        conv_init(ps, rng.split(0), "stem", 32, in_ch, 3)
        conv_init(ps, rng.split(1), "down1", 64, 32, 3)
        conv_init(ps, rng.split(2), "down2", 64, 64, 3)
        conv_init(ps, rng.split(3), "up1", 64, 64, 3)
        conv_init(ps, rng.split(4), "up2", 32, 64, 3)
        conv_init(ps, rng.split(5), "head", JOINT_CHANNELS, 32, 1,
                  scale=0.02)
        for i, (name, ch) in enumerate(self.STAGES):
            dense_init(ps, rng.split(10 + i), "temb_" + name,
                       TIME_EMBED_DIM, ch, scale=0.1)
        self.ps = ps

    def params(self):
        return self.ps.tensors()

    @classmethod
    def from_state(cls, state):
        in_ch = state["stem.w"].shape[1]
        p = cls(include_box_channel=(
            in_ch == JOINT_CHANNELS + LATENT_CHANNELS + 1))
        p.ps.load_state_dict(state)
        return p

    def _conv(self, name, x, stride=1, pad=1):
        return T.conv3d(x, self.ps[name + ".w"], self.ps[name + ".b"],
                        stride, pad)

    def _temb(self, name, emb, n):
        out = T.matmul(emb, self.ps["temb_%s.w" % name]) \
            + self.ps["temb_%s.b" % name]
        return T.reshape(out, (n, out.shape[1], 1, 1, 1))

    def forward(self, x_t, z_m, b_ind, t):
        """Returns (v_z, v_m); b_ind may be None when the box channel is
        disabled."""
        if x_t.shape[2:] != z_m.shape[2:]:
            raise ShapeError("x_t %s and z_m %s spatial dims differ"
                             % (x_t.shape, z_m.shape))
        parts = [x_t, z_m]
        if self.include_box_channel:
            if b_ind is None:
                raise ShapeError("box-indicator channel enabled but "
                                 "no indicator given")
            if b_ind.shape[0] != x_t.shape[0]:
                b_ind = Tensor(np.broadcast_to(
                    b_ind.data, (x_t.shape[0],) + b_ind.shape[1:]).copy())
            parts.append(b_ind)
        x = T.concat(parts, axis=1)
        n = x.shape[0]
        arr = np.asarray(t, dtype=np.float32)
        if arr.ndim == 0:
            arr = np.full(n, float(arr), dtype=np.float32)
        emb = time_embedding(arr)
        h0 = T.silu(self._conv("stem", x) + self._temb("stem", emb, n))
        h1 = T.silu(self._conv("down1", h0, stride=2)
                    + self._temb("down1", emb, n))
        h2 = T.silu(self._conv("down2", h1, stride=2)
                    + self._temb("down2", emb, n))
        u1 = T.silu(self._conv("up1", T.nearest_up2(h2)) + h1
                    + self._temb("up1", emb, n))
        u2 = T.silu(self._conv("up2", T.nearest_up2(u1)) + h0
                    + self._temb("up2", emb, n))
        v = T.conv3d(u2, self.ps["head.w"], self.ps["head.b"], 1, 0)
        return unpack_joint(v)


def vfe_forward(params, x_t, z_m, b_ind, t):
    return params.forward(x_t, z_m, b_ind, t)


def loss_rfm(v_z, v_m, x1, eps):
    """Mean squared residual of the joint field vs x1 - eps."""
    v = pack_joint(v_z, v_m)
    resid = v - (x1 - eps)
    return T.tmean(resid * resid)


def loss_coarse(z1_hat, z1, b_ind):
    """Box-restricted MSE, normalized by the total element count (not
    the box volume), so its scale is box-size independent in
    expectation."""
    diff = b_ind * (z1_hat - z1)
    return T.tmean(diff * diff)


def loss_fine(z1_hat, m1_hat, z1, m1, window=3):
    """1 - SSIM of the mask-gated latents; the continuous mask is used
    directly to stay differentiable."""
    return Tensor(1.0) - ssim3d(m1_hat * z1_hat, m1 * z1, window=window)


@dataclasses.dataclass
class FlowTrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch: int = 4
    lambda1: float = 1.0   # coarse box constraint
    lambda2: float = 0.5   # fine masked-SSIM constraint
    lambda3: float = 1.0   # refined-mask reconstruction (joint mode only)
    alpha: float = 0.15    # box expansion fraction
    include_box_channel: bool = True
    joint_rec: bool = False
    t_law: str = "uniform"
    seed: int = 0

    def validate(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise DataError("loss weights must be >= 0")
        if self.batch < 1:
            raise DataError("batch must be >= 1")
        if self.t_law not in ("uniform", "logit_normal"):
            raise DataError("unknown t law %r" % self.t_law)


def _draw_t(rng, law, n):
    if law == "uniform":
        return rng.uniform(0.0, 1.0, (n,))
    z = rng.normal((n,), dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-z))


class FlowBatch:
    """Per-step training inputs with fresh noise, t, and expanded boxes."""

    def __init__(self, x1, z_m, b_ind, eps, t, masks_px=None):
        self.x1 = x1            # (N,5,...) targets [z1, m1]
        self.z_m = z_m          # (N,4,...) masked conditioning latents
        self.b_ind = b_ind      # (N,1,...) box indicator
        self.eps = eps          # (N,5,...)
        self.t = t              # (N,)
        self.masks_px = masks_px  # (N,1,D,H,W) ground-truth binary masks


def prepare_flow_batch(entries, rng, alpha, t=None, eps=None):
    """entries: list of dicts with z1 (4,l,l,l), m1 (1,l,l,l),
    mask (Volume), dims (pixel dims). Draws boxes/noise/t from rng when
    not supplied."""
    x1s, zms, binds, masks = [], [], [], []
    for e in entries:
        box = expand_bbox(e["tight_box"], rng, alpha, e["dims"])
        ind = box_indicator(bbox_to_latent(box), e["z1"].shape[1:])
        z1 = Tensor(e["z1"][None])
        zms.append(mask_latents(z1, ind).data[0])
        binds.append(ind.data[0])
        x1s.append(np.concatenate([e["z1"], e["m1"]], axis=0))
        masks.append(e["mask"].data)
    n = len(entries)
    x1 = np.stack(x1s)
    if eps is None:
        eps = rng.normal(x1.shape)
    if t is None:
        t = _draw_t(rng, "uniform", n)
    return FlowBatch(Tensor(x1), Tensor(np.stack(zms)),
                     Tensor(np.stack(binds)), Tensor(eps),
                     np.asarray(t, dtype=np.float32),
                     Tensor(np.stack(masks)))


def total_flow_loss(params, batch, cfg, refiner=None, vae=None):
    """Weighted Eq.-style sum; returns (loss, components dict).

    The reconstruction term is included only when a refiner (and the
    frozen VAE, for decoder features) is supplied; by default gradients
    are stopped at m1_hat on that path (joint_rec enables full joint
    training).
    """
    x_t = forward_interpolate(batch.x1, batch.eps, batch.t)
    v_z, v_m = params.forward(x_t, batch.z_m, batch.b_ind, batch.t)
    rfm = loss_rfm(v_z, v_m, batch.x1, batch.eps)
    z1_hat, m1_hat = one_step_predict(x_t, v_z, v_m, batch.t)
    z1 = T.narrow(batch.x1, 1, 0, LATENT_CHANNELS)
    m1 = T.narrow(batch.x1, 1, LATENT_CHANNELS, 1)
    coarse = loss_coarse(z1_hat, z1, batch.b_ind)
    fine = loss_fine(z1_hat, m1_hat, z1, m1)
    parts = {"rfm": rfm.item(), "coarse": coarse.item(),
             "fine": fine.item()}
    loss = rfm + Tensor(cfg.lambda1) * coarse + Tensor(cfg.lambda2) * fine
    if refiner is not None and vae is not None and cfg.lambda3 > 0:
        from .refiner import loss_rec, refine
        if cfg.joint_rec:
            zh, mh = z1_hat, m1_hat
        else:
            zh, mh = z1_hat.detach(), m1_hat.detach()
        _, f1, f2, f3 = vae.decode_with_features(zh)
        refined = refine(refiner, mh, (f1, f2, f3))
        rec = loss_rec(refined, batch.masks_px)
        parts["rec"] = rec.item()
        loss = loss + Tensor(cfg.lambda3) * rec
    else:
        parts["rec"] = 0.0
    parts["total"] = loss.item()
    return loss, parts


def build_flow_entries(samples, vae_params):
    """Precompute per-sample flow-training inputs from (image, mask)
    volume pairs using the frozen VAE (deterministic encode)."""
    entries = []
    for img, mask in samples:
        _, _, z = vae_params.encode(Tensor(img.data[None]))
        m1 = prepare_mask_latent(mask)
        entries.append({
            "z1": z.data[0],
            "m1": m1.data[0],
            "mask": mask.data,
            "dims": img.dims,
            "tight_box": tight_bbox(mask),
        })
    return entries


def train_flow(cfg, samples, vae_params, ckpt_path=None, log=None,
               refiner=None):
    """samples: list of (image Volume, mask Volume) training pairs.

    Returns FlowParams. Log columns: step, loss_total, loss_rfm,
    loss_coarse, loss_fine, loss_rec.
    """
    cfg.validate()
    from .optim import AdamState, adam_step, zero_grads

    entries = build_flow_entries(samples, vae_params)
    params = FlowParams(seed=cfg.seed,
                        include_box_channel=cfg.include_box_channel)
    plist = params.params()
    if refiner is not None and cfg.joint_rec:
        plist = plist + refiner.params()
    state = AdamState(plist, lr=cfg.lr)
    rng = Rng(cfg.seed).split(200)
    for step in range(cfg.steps):
        idx = rng.integers(0, len(entries), (cfg.batch,))
        batch = prepare_flow_batch([entries[i] for i in idx], rng,
                                   cfg.alpha)
        loss, parts = total_flow_loss(params, batch, cfg, refiner=refiner,
                                      vae=vae_params)
        if not np.isfinite(parts["total"]):
            if ckpt_path:
                save_checkpoint(ckpt_path, "flow", params.ps.state_dict())
            raise NumericError("NaN/inf flow loss at step %d "
                               "(last-good checkpoint saved)" % step)
        zero_grads(plist)
        loss.backward()
        adam_step(plist, state)
        if log is not None:
            log.append("%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f"
                       % (step, parts["total"], parts["rfm"],
                          parts["coarse"], parts["fine"], parts["rec"]))
    if ckpt_path:
        save_checkpoint(ckpt_path, "flow", params.ps.state_dict())
    return params
