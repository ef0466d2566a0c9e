"""End-to-end orchestration shared by the CLI and the acceptance
suite: dataset loading, batched synthesis, metric reports, and the
five-row ablation grid."""

import dataclasses

import numpy as np

from .errors import DataError
from .metrics import (FeatureExtractor, MetricReport, evaluate_pairs, psnr,
                      slice_frechet)
from .phantom import load_sample
from .refiner import binarize, nearest_up_mask
from .sampler import SampleRequest, prepare_conditioning, generate
from .tensor import Tensor
from .vae import VaeParams
from .volume import Volume

ABLATION_ROWS = ("no_bapmg", "no_coarse", "no_fine", "no_vmr", "full")


def load_pairs(manifest, split=None):
    """(image, binary mask) Volume pairs for one split (None = all)."""
    return [load_sample(manifest, i)[:2] for i in manifest.ids(split)]


def synthesize_set(hosts, vae, flow, refiner, steps=10, seed=0,
                   threshold=0.5, composite=True, auto_edge=(8, 16),
                   host_masks=None):
    """One synthetic (image, binary mask) pair per host, seeds
    seed+i; refiner=None falls back to nearest-upsampled masks.

    When ``host_masks`` (the hosts' own lesion masks) is given, each
    returned mask is the true lesion mask of the composited image: the
    generated mask plus the host's lesions outside the replaced box —
    those stay visible in the output and would otherwise count against
    image-mask alignment."""
    images, masks = [], []
    for i, host in enumerate(hosts):
        req = SampleRequest(host=host, bbox="auto", steps=steps,
                            seed=seed + i, threshold=threshold,
                            composite=composite, auto_edge=auto_edge)
        cond = prepare_conditioning(req, vae)
        img, _, binm = generate(cond, req, vae, flow, refiner)
        if host_masks is not None:
            outside = host_masks[i].data.copy()
            lo, hi = cond.box_px.lo, cond.box_px.hi
            outside[..., lo[0]:hi[0] + 1, lo[1]:hi[1] + 1,
                    lo[2]:hi[2] + 1] = 0.0
            binm = Volume(np.maximum(binm.data, outside),
                          kind="binary_mask", spacing=binm.spacing)
        images.append(img)
        masks.append(binm)
    return images, masks


def reconstruction_psnr(vae, images):
    vals = []
    for img in images:
        _, _, z = vae.encode(Tensor(img.data[None]))
        rec = vae.decode(z)
        vals.append(psnr(rec.data[0], img.data))
    finite = [v for v in vals if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


def build_report(real_images, synth_images, synth_masks, seg_params,
                 vae, extractor=None, tau=1.0, config_hash=""):
    """MetricReport: slice-Fréchet real-vs-synth, segmenter pair
    alignment (DSC/NSD) on the synthetic pairs, and VAE reconstruction
    PSNR on the real images."""
    ext = extractor or FeatureExtractor()
    fr = slice_frechet(real_images, synth_images, ext)
    dsc, surf = evaluate_pairs(synth_images, synth_masks, seg_params,
                               tau=tau)
    return MetricReport(
        frechet_axial=fr["axial"], frechet_sagittal=fr["sagittal"],
        frechet_coronal=fr["coronal"], frechet_avg=fr["avg"],
        dice=dsc, nsd=surf, psnr=reconstruction_psnr(vae, real_images),
        n_real=len(real_images), n_synth=len(synth_images),
        config_hash=config_hash)


def ablation_flow_config(base_cfg, row):
    """Flow training config for one ablation row."""
    if row == "no_bapmg":
        return dataclasses.replace(base_cfg, alpha=0.0)
    if row == "no_coarse":
        return dataclasses.replace(base_cfg, lambda1=0.0)
    if row == "no_fine":
        return dataclasses.replace(base_cfg, lambda2=0.0)
    if row in ("no_vmr", "full"):
        return base_cfg
    raise DataError("unknown ablation row %r" % row)


def run_ablation(train_pairs, real_refs, vae, seg_params, flow_cfg,
                 refiner_cfg, sampler_kw=None, extractor=None, tau=1.0,
                 trainer=None, log=None):
    """Train and score the five-row grid; returns rows as dicts with
    keys config/frechet_avg/dice/nsd.

    ``trainer(row, flow_cfg, refiner_cfg)`` may be injected to supply
    (flow, refiner) params — the acceptance suite uses it for disk
    caching; the default trains from scratch.
    """
    from .flow import train_flow
    from .refiner import train_refiner

    ext = extractor or FeatureExtractor()
    kw = dict(sampler_kw or {})
    hosts = [img for img, _ in train_pairs]
    host_masks = [m for _, m in train_pairs]
    rows = []
    for row in ABLATION_ROWS:
        fcfg = ablation_flow_config(flow_cfg, row)
        rcfg = dataclasses.replace(refiner_cfg, alpha=fcfg.alpha)
        if trainer is not None:
            flow, refiner = trainer(row, fcfg, rcfg)
        else:
            flow = train_flow(fcfg, train_pairs, vae)
            refiner = None if row == "no_vmr" else train_refiner(
                rcfg, train_pairs, vae, flow)
        if row == "no_vmr":
            refiner = None
        # identical hosts, boxes, and noise across rows; pair metrics
        # use the composited image's true lesion mask (host lesions
        # outside the box stay visible and are included)
        images, masks = synthesize_set(hosts, vae, flow, refiner,
                                       host_masks=host_masks, **kw)
        fr = slice_frechet(real_refs, images, ext)
        dsc, surf = evaluate_pairs(images, masks, seg_params, tau=tau)
        rows.append({"config": row, "frechet_avg": fr["avg"],
                     "dice": dsc, "nsd": surf})
        if log is not None:
            log.append("%s\t%.6f\t%.6f\t%.6f"
                       % (row, fr["avg"], dsc, surf))
    return rows


def ablation_table(rows):
    lines = ["config\tfrechet_avg\tdice\tnsd"]
    for r in rows:
        lines.append("%s\t%.6f\t%.6f\t%.6f"
                     % (r["config"], r["frechet_avg"], r["dice"], r["nsd"]))
    return "\n".join(lines) + "\n"


def refiner_vs_upsample_dice(pairs, vae, refiner, threshold=0.5):
    """Latent-mask reconstruction control for the refiner: push each
    ground-truth mask through the latent bottleneck and score refined
    vs nearest-upsampled recovery against the original."""
    from .boxes import prepare_mask_latent
    from .metrics import dice
    from .refiner import refine

    d_ref, d_up = [], []
    for img, mask in pairs:
        m1 = prepare_mask_latent(mask)
        _, _, z = vae.encode(Tensor(img.data[None]))
        _, f1, f2, f3 = vae.decode_with_features(z)
        soft = refine(refiner, m1, (f1, f2, f3))
        d_ref.append(dice(binarize(soft.data[0], threshold), mask))
        d_up.append(dice(nearest_up_mask(m1.data[0]), mask))
    return float(np.mean(d_ref)), float(np.mean(d_up))
