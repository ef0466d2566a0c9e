"""Procedural 3D phantoms: smooth backgrounds with a brighter organ
region and soft-boundary ellipsoidal lesions, plus dataset generation.

Everything is a pure function of (seed, spec); per-sample seeds are
derived by splitting the master seed, so generation order never matters.
"""

import dataclasses
import hashlib
import json
import os
import time

import numpy as np

from .errors import DataError
from .rng import Rng
from .volume import Volume, read_volume, write_volume

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclasses.dataclass
class PhantomSpec:
    dims: tuple = (32, 32, 32)
    modes: int = 6                      # cosine background modes
    organ_center: tuple = (0.35, 0.65)  # center range, fraction of extent
    organ_radii: tuple = (10.0, 14.0)   # voxels; hi <= 0 disables the organ
    lesion_count: tuple = (1, 2)
    lesion_radii: tuple = (3.0, 6.0)    # voxels
    edge_softness: tuple = (0.08, 0.2)  # sigmoid width in generalized radius
    lesion_amplitude: tuple = (0.25, 0.45)
    noise_sigma: float = 0.01

    def validate(self):
        if min(self.dims) < 16:
            raise DataError("phantom dims must be >= 16 per axis, got %s"
                            % (self.dims,))
        for name in ("organ_center", "organ_radii", "lesion_count",
                     "lesion_radii", "edge_softness", "lesion_amplitude"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise DataError("empty range for %s: %s" % (name, (lo, hi)))
        if self.lesion_radii[0] < 2:
            raise DataError("minimum lesion radius must be >= 2 voxels")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise DataError("unknown phantom spec keys: %s" % sorted(unknown))
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _grid(dims):
    d, h, w = dims
    return np.meshgrid(np.arange(d), np.arange(h), np.arange(w),
                       indexing="ij")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _background_field(rng, spec):
    """Raw background in [0.05, 0.6] plus the organ interior mask."""
    spec.validate()
    dims = spec.dims
    zz, yy, xx = _grid(dims)
    field = np.zeros(dims, dtype=np.float64)
    for _ in range(spec.modes):
        kv = rng.integers(1, 5, (3,)).astype(np.float64)
        sign = np.where(rng.uniform(shape=(3,)) < 0.5, -1.0, 1.0)
        kv *= sign
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = 1.0 / np.linalg.norm(kv)
        ang = 2.0 * np.pi * (kv[0] * zz / dims[0] + kv[1] * yy / dims[1]
                             + kv[2] * xx / dims[2]) + phase
        field += amp * np.cos(ang)

    organ_mask = np.zeros(dims, dtype=bool)
    has_organ = spec.organ_radii[1] > 0
    if has_organ:
        frac = rng.uniform(spec.organ_center[0], spec.organ_center[1], (3,))
        center = frac * np.asarray(dims)
        radii = rng.uniform(spec.organ_radii[0], spec.organ_radii[1], (3,))
        # super-ellipsoid (exponent 4): flatter interior than an ellipsoid
        rho4 = (((zz - center[0]) / radii[0]) ** 4
                + ((yy - center[1]) / radii[1]) ** 4
                + ((xx - center[2]) / radii[2]) ** 4)
        rho = rho4 ** 0.25
        field += 0.3 * _sigmoid((1.0 - rho) / 0.08)
        organ_mask = rho <= 0.8
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        out = np.full(dims, 0.05)
    else:
        out = 0.05 + (field - lo) * (0.6 - 0.05) / (hi - lo)
    return out, organ_mask


def gen_background(rng, spec):
    field, _ = _background_field(rng, spec)
    return Volume(field.astype(np.float32), kind="image")


def _rotation(rng):
    q, r = np.linalg.qr(rng.normal((3, 3), dtype=np.float64))
    q *= np.sign(np.diag(r))
    return q


def gen_lesion(rng, spec, organ_mask):
    """Random-oriented soft-boundary ellipsoid centered inside the organ.

    Returns (soft mask Volume, binary mask Volume, params). The soft mask
    is sigmoid((1 - rho)/w) of the generalized radius rho, so it decreases
    monotonically along rays from the center; the binary mask is its 0.5
    threshold (exactly rho <= 1).
    """
    spec.validate()
    dims = organ_mask.shape
    coords = np.argwhere(organ_mask)
    if coords.size == 0:
        raise DataError("empty organ region: cannot place a lesion")
    zz, yy, xx = _grid(dims)
    for _ in range(100):
        center = coords[int(rng.integers(0, len(coords)))].astype(np.float64)
        radii = rng.uniform(spec.lesion_radii[0], spec.lesion_radii[1], (3,))
        rot = _rotation(rng)
        softness = float(rng.uniform(spec.edge_softness[0],
                                     spec.edge_softness[1]))
        # lesion must fit inside the volume with a 1-voxel margin
        rmax = radii.max()
        if (center - rmax < 1).any() or (center + rmax > np.asarray(dims) - 2).any():
            continue
        rel = np.stack([zz - center[0], yy - center[1], xx - center[2]],
                       axis=-1)
        local = rel @ rot  # rotate into lesion frame
        rho = np.sqrt(((local / radii) ** 2).sum(axis=-1))
        soft = _sigmoid((1.0 - rho) / softness)
        binary = (soft >= 0.5).astype(np.float32)
        if binary.sum() == 0:
            continue
        params = {"center": center.tolist(), "radii": radii.tolist(),
                  "softness": softness}
        return (Volume(soft.astype(np.float32), kind="soft_mask"),
                Volume(binary, kind="binary_mask"), params)
    raise DataError("could not place a lesion inside the organ "
                    "after 100 tries")


def gen_sample(seed, spec):
    """Paired (image, binary mask, soft mask) volumes for one seed."""
    spec.validate()
    rng = Rng(seed)
    bg, organ_mask = _background_field(rng.split(0), spec)
    rl = rng.split(1)
    lo, hi = spec.lesion_count
    count = int(rl.integers(lo, hi + 1))
    if count == 0:
        raise DataError("sample with zero lesions requested; training "
                        "requires a nonempty mask")
    image = bg.copy()
    soft = np.zeros(spec.dims, dtype=np.float32)
    binary = np.zeros(spec.dims, dtype=np.float32)
    params = []
    for i in range(count):
        lr = rl.split(10 + i)
        s, b, p = gen_lesion(lr, spec, organ_mask)
        amp = float(lr.uniform(spec.lesion_amplitude[0],
                               spec.lesion_amplitude[1]))
        p["amplitude"] = amp
        image = image + amp * s.data[0].astype(np.float64)
        soft = np.maximum(soft, s.data[0])
        binary = np.maximum(binary, b.data[0])
        params.append(p)
    if spec.noise_sigma > 0:
        image = image + spec.noise_sigma * rng.split(2).normal(
            spec.dims, dtype=np.float64)
    image = np.clip(image, 0.0, 1.0)
    return (Volume(image.astype(np.float32), kind="image"),
            Volume(binary, kind="binary_mask"),
            Volume(soft, kind="soft_mask"),
            params)


@dataclasses.dataclass
class DatasetManifest:
    version: int
    seed: int
    spec: PhantomSpec
    samples: list  # dicts: id, image, mask, soft_mask, split, lesions

    def to_dict(self):
        return {"version": self.version, "seed": self.seed,
                "spec": self.spec.to_dict(),
                "spec_hash": self.spec.hash(),
                "samples": self.samples}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def ids(self, split=None):
        return [s["id"] for s in self.samples
                if split is None or s["split"] == split]


def sample_seed(master_seed, index):
    return Rng(master_seed).split(1000 + index).key


def make_dataset(n, seed, spec, out_dir):
    """Generate n phantom samples plus a JSON manifest; ids ending the
    0..9 cycle at 9 form the deterministic 10% test split."""
    if n < 2:
        raise DataError("dataset needs n >= 2 samples")
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    samples = []
    t0 = time.time()
    for i in range(n):
        img, mask, soft, params = gen_sample(sample_seed(seed, i), spec)
        rec = {"id": i,
               "image": "sample_%04d_image.volf" % i,
               "mask": "sample_%04d_mask.volf" % i,
               "soft_mask": "sample_%04d_soft.volf" % i,
               "split": "test" if i % 10 == 9 else "train",
               "lesions": params}
        write_volume(os.path.join(out_dir, rec["image"]), img)
        write_volume(os.path.join(out_dir, rec["mask"]), mask)
        write_volume(os.path.join(out_dir, rec["soft_mask"]), soft)
        samples.append(rec)
    manifest = DatasetManifest(MANIFEST_VERSION, seed, spec, samples)
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest.to_dict(), f, indent=1, sort_keys=True)
    manifest.elapsed = time.time() - t0
    return manifest


def load_manifest(dataset_dir):
    path = os.path.join(dataset_dir, MANIFEST_NAME)
    try:
        with open(path) as f:
            d = json.load(f)
    except OSError as exc:
        raise DataError("cannot read manifest %s: %s" % (path, exc))
    except json.JSONDecodeError as exc:
        raise DataError("malformed manifest %s: %s" % (path, exc))
    spec = PhantomSpec.from_dict(d["spec"])
    m = DatasetManifest(d["version"], d["seed"], spec, d["samples"])
    m.dir = dataset_dir
    return m


def load_sample(manifest, sample_id):
    """(image, binary mask, soft mask) volumes for one manifest entry."""
    rec = next(s for s in manifest.samples if s["id"] == sample_id)
    base = manifest.dir
    return (read_volume(os.path.join(base, rec["image"])),
            read_volume(os.path.join(base, rec["mask"])),
            read_volume(os.path.join(base, rec["soft_mask"])))
