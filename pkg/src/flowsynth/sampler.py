"""Few-step Euler integration along the learned field, conditional
inpainting synthesis, and the step-count efficiency benchmark.

Integration runs from t=0 (noise) to t=1 (data) with uniform steps:
x_{t+dt} = x_t + dt * v(x_t, z_m, t).
"""

import dataclasses
import time

import numpy as np

from .boxes import BBox3, bbox_to_latent, box_indicator, expand_bbox, \
    mask_latents, tight_bbox
from .errors import DataError, NumericError
from .flow import unpack_joint
from .refiner import binarize, nearest_up_mask, refine
from .rng import Rng
from .tensor import Tensor
from .volume import Volume

JOINT_CHANNELS = 5


@dataclasses.dataclass
class SampleRequest:
    host: Volume
    bbox: object = "auto"  # pixel-frame BBox3 or "auto"
    steps: int = 10
    seed: int = 0
    threshold: float = 0.5
    composite: bool = True  # keep host latents outside the box
    auto_edge: tuple = (8, 16)

    def validate(self):
        if self.steps < 1:
            raise DataError("steps must be >= 1")
        if self.bbox != "auto" and not isinstance(self.bbox, BBox3):
            raise DataError("bbox must be 'auto' or a BBox3")


def euler_integrate(params, z_m, b_ind, steps, rng, x0=None):
    """Integrate the joint state from pure noise to t=1 in ``steps``
    uniform Euler updates; returns the final (N,5,...) state."""
    if steps < 1:
        raise DataError("steps must be >= 1")
    spatial = z_m.shape[2:]
    n = z_m.shape[0]
    if x0 is None:
        x = Tensor(rng.normal((n, JOINT_CHANNELS) + tuple(spatial)))
    else:
        x = x0
    dt = 1.0 / steps
    acc = x.data.astype(np.float64)  # accumulate in float64
    for k in range(steps):
        t = k / steps
        v_z, v_m = params.forward(x, z_m, b_ind, t)
        v = np.concatenate([v_z.data, v_m.data], axis=1)
        acc = acc + dt * v.astype(np.float64)
        if not np.isfinite(acc).all():
            raise NumericError("non-finite state at integration step %d" % k)
        x = Tensor(acc)
    return x


def auto_bbox(host, rng, edge_range=(8, 16), organ_threshold=0.35):
    """Stand-in inference-time box for hosts without a lesion mask: the
    center is uniform over an intensity-threshold organ proxy, edge
    lengths uniform in ``edge_range``."""
    data = host.data[0]
    proxy = data >= organ_threshold
    if not proxy.any():
        proxy = np.ones_like(data, dtype=bool)
    coords = np.argwhere(proxy)
    center = coords[int(rng.integers(0, len(coords)))]
    dims = data.shape
    lo, hi = [], []
    for ax in range(3):
        edge = int(rng.integers(edge_range[0], edge_range[1] + 1))
        a = int(center[ax]) - edge // 2
        b = a + edge - 1
        a = max(0, a)
        b = min(dims[ax] - 1, b)
        lo.append(min(a, b))
        hi.append(max(a, b))
    return BBox3(tuple(lo), tuple(hi), "pixel")


class Conditioning:
    """Host-side inputs shared by every step count: deterministic host
    latents, the latent box indicator, and the masked latents."""

    def __init__(self, z1_host, b_ind, z_m, box_px):
        self.z1_host = z1_host
        self.b_ind = b_ind
        self.z_m = z_m
        self.box_px = box_px


def prepare_conditioning(req, vae_params):
    req.validate()
    rng = Rng(req.seed)
    if req.bbox == "auto":
        box = auto_bbox(req.host, rng.split(1), req.auto_edge)
    else:
        box = req.bbox
    _, _, z1 = vae_params.encode(Tensor(req.host.data[None]))
    z1 = z1.detach()
    b_ind = box_indicator(bbox_to_latent(box), z1.shape[2:])
    z_m = mask_latents(z1, b_ind).detach()
    return Conditioning(z1, b_ind, z_m, box)


def generate(cond, req, vae_params, flow_params, refiner_params):
    """Integration + decode + refine for prepared conditioning.
    Returns (image Volume, soft mask Volume, binary mask Volume)."""
    rng = Rng(req.seed)
    x1 = euler_integrate(flow_params, cond.z_m, cond.b_ind, req.steps,
                         rng.split(2))
    return finish_sample(cond, req, x1, vae_params, refiner_params)


def finish_sample(cond, req, x1, vae_params, refiner_params):
    """Composite, decode, and refine an integrated joint state."""
    z1_hat, m1_hat = unpack_joint(x1)
    if req.composite:
        one = Tensor(1.0)
        z_out = (one - cond.b_ind) * cond.z1_host + cond.b_ind * z1_hat
    else:
        z_out = z1_hat
    img, f1, f2, f3 = vae_params.decode_with_features(z_out)
    if refiner_params is not None:
        soft = refine(refiner_params, m1_hat, (f1, f2, f3)).data[0]
    else:
        soft = nearest_up_mask(m1_hat.data[0])
    image = Volume(np.clip(img.data[0], 0.0, 1.0), kind="image",
                   spacing=req.host.spacing)
    soft_v = Volume(soft, kind="soft_mask", spacing=req.host.spacing)
    bin_v = Volume(binarize(soft, req.threshold), kind="binary_mask",
                   spacing=req.host.spacing)
    return image, soft_v, bin_v


def synthesize(req, vae_params, flow_params, refiner_params,
               ckpt_hashes=None):
    """Full pipeline on one host; returns (image, soft mask, binary
    mask, provenance dict)."""
    t0 = time.time()
    cond = prepare_conditioning(req, vae_params)
    image, soft, binary = generate(cond, req, vae_params, flow_params,
                                   refiner_params)
    provenance = {
        "seed": req.seed,
        "steps": req.steps,
        "bbox_lo": list(cond.box_px.lo),
        "bbox_hi": list(cond.box_px.hi),
        "threshold": req.threshold,
        "composite": req.composite,
        "checkpoints": ckpt_hashes or {},
        "wall_seconds": time.time() - t0,
    }
    return image, soft, binary, provenance


def mask_bbox_request(host, mask, rng, alpha=0.15, steps=10, seed=0,
                      **kw):
    """Request whose box is the mask's tight box expanded by alpha."""
    box = expand_bbox(tight_bbox(mask), rng, alpha, host.dims)
    return SampleRequest(host=host, bbox=box, steps=steps, seed=seed, **kw)


def benchmark_steps(step_list, hosts, real_refs, vae_params, flow_params,
                    refiner_params, extractor, seed=0):
    """Per step count: mean wall seconds per sample and slice-
    Fréchet(avg) of the generated images vs ``real_refs``. Returns a
    list of row dicts.

    The timed region is the Euler integration loop only — the part
    whose cost scales with the step count. Conditioning, decode, and
    refinement are step-count-independent and run outside the timer;
    on CPU at desk scale the decoder would otherwise dominate and mask
    the scaling this benchmark is meant to expose."""
    from .metrics import slice_frechet

    if len(hosts) < 8:
        raise DataError("benchmark needs >= 8 host samples")
    conds = []
    for i, host in enumerate(hosts):
        req = SampleRequest(host=host, bbox="auto", seed=seed + i)
        conds.append((req, prepare_conditioning(req, vae_params)))
    rows = []
    for steps in step_list:
        images = []
        elapsed = 0.0
        for req, cond in conds:
            req = dataclasses.replace(req, steps=steps)
            rng = Rng(req.seed)
            t0 = time.time()
            x1 = euler_integrate(flow_params, cond.z_m, cond.b_ind,
                                 steps, rng.split(2))
            elapsed += time.time() - t0
            img, _, _ = finish_sample(cond, req, x1, vae_params,
                                      refiner_params)
            images.append(img)
        fr = slice_frechet(real_refs, images, extractor)
        rows.append({"steps": steps,
                     "seconds_per_sample": elapsed / len(conds),
                     "frechet_avg": fr["avg"]})
    return rows


def benchmark_table(rows):
    lines = ["steps\tseconds_per_sample\tfrechet_avg"]
    for r in rows:
        lines.append("%d\t%.6f\t%.6f" % (r["steps"], r["seconds_per_sample"],
                                         r["frechet_avg"]))
    return "\n".join(lines) + "\n"
