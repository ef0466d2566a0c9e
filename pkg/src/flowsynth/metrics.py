"""Evaluation suite: slice-level Fréchet distance with a fixed random
feature extractor, Dice, normalized surface distance, PSNR, and
image-mask pair-alignment scoring via the toy segmenter.

The extractor deliberately replaces Inception with a seeded, untrained
conv stack, so absolute Fréchet values are not comparable to any
published FID; only relative comparisons within this artifact are
meaningful.
"""

import dataclasses

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import DataError, ShapeError
from .rng import Rng

PLANES = ("axial", "sagittal", "coronal")
FEATURE_DIM = 32


def _raw(v):
    """Underlying ndarray of a Volume/Tensor or a plain array."""
    if isinstance(v, np.ndarray):
        return v
    return v.data if hasattr(v, "data") else np.asarray(v)


def middle_slices(volume, plane):
    """Central slice (floor(n/2)) of channel 0 along the plane normal:
    axial cuts the first spatial axis, sagittal the last, coronal the
    middle one."""
    data = _raw(volume)
    if data.ndim == 4:
        data = data[0]
    d, h, w = data.shape
    if plane == "axial":
        return data[d // 2, :, :]
    if plane == "coronal":
        return data[:, h // 2, :]
    if plane == "sagittal":
        return data[:, :, w // 2]
    raise ValueError("unknown plane %r" % plane)


class FeatureExtractor:
    """Fixed, seeded, untrained 2D conv stack (3 stride-2 stages,
    1->8->16->32, SiLU) with global average pooling to 32-dim features."""

    def __init__(self, seed=7):
        self.seed = seed
        rng = Rng(seed).split(40)
        plan = [(1, 8), (8, 16), (16, 32)]
        self.weights = []
        for i, (cin, cout) in enumerate(plan):
            s = np.sqrt(2.0 / (cin * 9))
            self.weights.append(
                s * rng.split(i).normal((cout, cin, 3, 3)))

    @staticmethod
    def _conv2d(x, w, stride, pad):
        # x (C,H,W), w (O,C,3,3); valid after zero pad
        c, h, wd = x.shape
        o, _, k, _ = w.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::stride, ::stride]
        oh, ow = win.shape[1:3]
        col = win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * k * k)
        y = col.astype(np.float32) @ w.reshape(o, -1).astype(np.float32).T
        return y.T.reshape(o, oh, ow)

    def features(self, slice2d):
        x = np.asarray(slice2d, dtype=np.float32)[None]
        for w in self.weights:
            x = self._conv2d(x, w, 2, 1)
            x = x / (1.0 + np.exp(-x))  # SiLU
        return x.mean(axis=(1, 2), dtype=np.float64).astype(np.float32)


def _sym_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)  # clamp tiny negative eigenvalues
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b):
    """Squared Fréchet distance between two Gaussians:
    ||mu_a-mu_b||^2 + Tr(cov_a + cov_b - 2 (cov_a cov_b)^{1/2}),
    with the cross term computed via the symmetric eigendecomposition of
    cov_a^{1/2} cov_b cov_a^{1/2}."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    diff = mu_a - mu_b
    sa = _sym_sqrt(cov_a)
    inner = sa @ cov_b @ sa
    vals = np.linalg.eigvalsh(inner)
    neg = vals < -1e-8
    if neg.any():
        import warnings
        warnings.warn("clamping negative eigenvalues in Frechet cross term")
    vals = np.clip(vals, 0.0, None)
    tr_cross = 2.0 * np.sqrt(vals).sum()
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - tr_cross)
    return max(d2, 0.0)


def frechet_distance(feats_a, feats_b):
    """Squared Fréchet distance between two feature sets (rows are
    samples); needs >= 2 samples per side."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets must be 2-d with equal dim: %s vs %s"
                         % (a.shape, b.shape))
    if len(a) < 2 or len(b) < 2:
        raise DataError("need >= 2 samples per side for Frechet distance")
    return frechet_from_moments(a.mean(axis=0), np.cov(a, rowvar=False),
                                b.mean(axis=0), np.cov(b, rowvar=False))


def slice_frechet(real, synth, extractor):
    """Per-plane Fréchet distance over middle-slice features plus the
    3-plane average; real/synth are lists of image Volumes."""
    if len(real) < 8 or len(synth) < 8:
        raise DataError("need >= 8 volumes per side")
    if len(real) < 32 or len(synth) < 32:
        import warnings
        warnings.warn("fewer than 32 volumes per side; Frechet estimates "
                      "will be noisy")
    out = {}
    for plane in PLANES:
        fa = np.stack([extractor.features(middle_slices(v, plane))
                       for v in real])
        fb = np.stack([extractor.features(middle_slices(v, plane))
                       for v in synth])
        out[plane] = frechet_distance(fa, fb)
    out["avg"] = sum(out[p] for p in PLANES) / 3.0
    return out


def _as_mask(v):
    data = _raw(v)
    if data.ndim == 4:
        data = data[0]
    return data > 0.5


def dice(a, b):
    """2|A^B| / (|A|+|B|); both-empty convention: 1."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise ShapeError("mask dims differ: %s vs %s" % (ma.shape, mb.shape))
    tot = ma.sum() + mb.sum()
    if tot == 0:
        return 1.0
    return 2.0 * np.logical_and(ma, mb).sum() / tot


def _surface(mask):
    # foreground voxels with at least one 6-neighbor background voxel;
    # outside the volume counts as background
    eroded = ndimage.binary_erosion(
        mask, structure=ndimage.generate_binary_structure(3, 1),
        border_value=0)
    return mask & ~eroded


def nsd(a, b, tau=1.0):
    """Normalized surface distance at tolerance tau (voxels):
    (|S_a within tau of S_b| + |S_b within tau of S_a|) / (|S_a|+|S_b|)."""
    ma, mb = _as_mask(a), _as_mask(b)
    if ma.shape != mb.shape:
        raise ShapeError("mask dims differ: %s vs %s" % (ma.shape, mb.shape))
    if not ma.any() or not mb.any():
        raise DataError("empty mask")
    sa, sb = _surface(ma), _surface(mb)
    dist_to_sb = ndimage.distance_transform_edt(~sb)
    dist_to_sa = ndimage.distance_transform_edt(~sa)
    hits = (dist_to_sb[sa] <= tau).sum() + (dist_to_sa[sb] <= tau).sum()
    return float(hits) / float(sa.sum() + sb.sum())


def psnr(a, b, peak=1.0):
    """10 log10(peak^2 / MSE) in dB; +inf for identical inputs."""
    da, db = _raw(a), _raw(b)
    if da.shape != db.shape:
        raise ShapeError("dims differ: %s vs %s" % (da.shape, db.shape))
    mse = np.mean((da.astype(np.float64) - db.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def evaluate_pairs(images, masks, seg_params, tau=1.0, threshold=0.5):
    """Mean (DSC, NSD) of the segmenter's predictions on ``images``
    against the paired ``masks``. Pairs where either mask is empty score
    NSD 0 (and Dice by its own convention)."""
    if len(images) != len(masks):
        raise DataError("got %d images but %d masks"
                        % (len(images), len(masks)))
    dscs, nsds = [], []
    for img, mask in zip(images, masks):
        pred = seg_params.predict_mask(img, threshold=threshold)
        dscs.append(dice(pred, mask))
        try:
            nsds.append(nsd(pred, mask, tau=tau))
        except DataError:
            nsds.append(0.0)
    return float(np.mean(dscs)), float(np.mean(nsds))


@dataclasses.dataclass
class MetricReport:
    frechet_axial: float
    frechet_sagittal: float
    frechet_coronal: float
    frechet_avg: float
    dice: float
    nsd: float
    psnr: float
    n_real: int
    n_synth: int
    config_hash: str = ""

    def to_text(self):
        lines = []
        for key in ("frechet_axial", "frechet_sagittal", "frechet_coronal",
                    "frechet_avg", "dice", "nsd", "psnr"):
            lines.append("%s\t%.6f" % (key, getattr(self, key)))
        lines.append("n_real\t%d" % self.n_real)
        lines.append("n_synth\t%d" % self.n_synth)
        lines.append("config_hash\t%s" % self.config_hash)
        return "\n".join(lines) + "\n"
