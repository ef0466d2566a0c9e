"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 checkpoint, 6 numeric.
Every command writes a JSON run-record next to its outputs with the
canonical config, content hashes of inputs/outputs, and wall time.
"""

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import (CheckpointError, ConfigError, DataError, NumericError,
                     ShapeError)
from .flow import FlowParams, train_flow
from .metrics import FeatureExtractor, middle_slices
from .phantom import PhantomSpec, load_manifest, make_dataset
from .pipeline import (ablation_table, build_report, load_pairs,
                       run_ablation, synthesize_set)
from .refiner import RefinerParams, train_refiner
from .sampler import SampleRequest, benchmark_steps, benchmark_table, \
    synthesize
from .segmenter import SegParams, train_segmenter
from .vae import VaeParams, train_vae
from .volume import read_volume, write_volume

USAGE_EXIT = 2
EXIT_CODES = (
    (ConfigError, 3),
    (CheckpointError, 5),
    (NumericError, 6),
    (DataError, 4),       # after its VolumeFormatError subclass users
    (ShapeError, 4),
)

PARAM_CLASSES = {"vae": VaeParams, "flow": FlowParams,
                 "refiner": RefinerParams, "segmenter": SegParams}


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_params(path, kind):
    if not os.path.exists(path):
        raise CheckpointError("checkpoint not found: %s" % path)
    _, state = load_checkpoint(path, expect_kind=kind)
    return PARAM_CLASSES[kind].from_state(state)


def _config(args):
    return load_config(args.config) if args.config else RunConfig()


def _manifest(path):
    if not os.path.isdir(path):
        raise DataError("dataset directory not found: %s" % path)
    return load_manifest(path)


class RunRecord:
    def __init__(self, command, cfg):
        self.t0 = time.time()
        self.record = {"command": command, "argv": sys.argv[1:],
                       "config": cfg.canonical(),
                       "config_hash": cfg.hash(),
                       "inputs": {}, "outputs": {}}

    def add_input(self, name, path):
        if os.path.isfile(path):
            self.record["inputs"][name] = _file_hash(path)

    def add_output(self, name, path):
        if os.path.isfile(path):
            self.record["outputs"][name] = _file_hash(path)

    def write(self, path):
        self.record["wall_seconds"] = round(time.time() - self.t0, 3)
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.record, f, indent=1, sort_keys=True)
            f.write("\n")


def _write_text(path, text):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def cmd_gen_data(args):
    cfg = _config(args)
    rec = RunRecord("gen-data", cfg)
    data = cfg["data"]
    n = args.n if args.n is not None else data["n"]
    seed = args.seed if args.seed is not None else data["seed"]
    spec = PhantomSpec(dims=tuple(data["dims"]),
                       organ_radii=tuple(data["organ_radii"]),
                       lesion_radii=tuple(data["lesion_radii"]))
    manifest = make_dataset(n, seed, spec, args.out)
    rec.add_output("manifest", os.path.join(args.out, "manifest.json"))
    rec.write(os.path.join(args.out, "run_record.json"))
    print("dataset %s: %d samples, manifest hash %s"
          % (args.out, n, manifest.hash()))
    return 0


def _train_command(args, stage):
    cfg = _config(args)
    rec = RunRecord("train-" + stage, cfg)
    manifest = _manifest(args.data)
    rec.add_input("manifest", os.path.join(args.data, "manifest.json"))
    pairs = load_pairs(manifest, "train")
    tcfg = cfg.train_config(stage)
    if args.steps is not None:
        tcfg.steps = args.steps
    log = []
    if stage == "vae":
        train_vae(tcfg, [img for img, _ in pairs], args.out, log=log)
    elif stage == "flow":
        vae = _load_params(args.vae, "vae")
        rec.add_input("vae", args.vae)
        train_flow(tcfg, pairs, vae, args.out, log=log)
    elif stage == "refiner":
        vae = _load_params(args.vae, "vae")
        flow = _load_params(args.flow, "flow")
        rec.add_input("vae", args.vae)
        rec.add_input("flow", args.flow)
        train_refiner(tcfg, pairs, vae, flow, args.out, log=log)
    else:
        train_segmenter(tcfg, pairs, args.out, log=log)
    _write_text(args.out + ".log", "\n".join(log) + "\n")
    rec.add_output("checkpoint", args.out)
    rec.write(args.out + ".run_record.json")
    print("%s checkpoint written to %s (%d steps, final loss line: %s)"
          % (stage, args.out, tcfg.steps, log[-1] if log else "n/a"))
    return 0


def cmd_synthesize(args):
    cfg = _config(args)
    rec = RunRecord("synthesize", cfg)
    vae = _load_params(args.vae, "vae")
    flow = _load_params(args.flow, "flow")
    refiner = _load_params(args.refiner, "refiner") if args.refiner else None
    for name in ("vae", "flow", "refiner"):
        p = getattr(args, name)
        if p:
            rec.add_input(name, p)
    host = read_volume(args.host)
    rec.add_input("host", args.host)
    samp = cfg["sampler"]
    req = SampleRequest(
        host=host, bbox="auto",
        steps=args.steps if args.steps is not None else samp["steps"],
        seed=args.seed if args.seed is not None else samp["seed"],
        threshold=samp["threshold"], composite=samp["composite"],
        auto_edge=(samp["auto_edge_lo"], samp["auto_edge_hi"]))
    hashes = {n: _file_hash(getattr(args, n))
              for n in ("vae", "flow", "refiner") if getattr(args, n)}
    image, soft, binary, prov = synthesize(req, vae, flow, refiner,
                                           ckpt_hashes=hashes)
    os.makedirs(args.out, exist_ok=True)
    paths = {"image": os.path.join(args.out, "synth_image.volf"),
             "soft_mask": os.path.join(args.out, "synth_soft.volf"),
             "mask": os.path.join(args.out, "synth_mask.volf")}
    write_volume(paths["image"], image)
    write_volume(paths["soft_mask"], soft)
    write_volume(paths["mask"], binary)
    with open(os.path.join(args.out, "provenance.json"), "w") as f:
        json.dump(prov, f, indent=1, sort_keys=True)
        f.write("\n")
    for name, p in paths.items():
        rec.add_output(name, p)
    rec.write(os.path.join(args.out, "run_record.json"))
    print("synthesized sample in %s (box %s..%s)"
          % (args.out, prov["bbox_lo"], prov["bbox_hi"]))
    return 0


def cmd_evaluate(args):
    cfg = _config(args)
    rec = RunRecord("evaluate", cfg)
    manifest = _manifest(args.data)
    vae = _load_params(args.vae, "vae")
    flow = _load_params(args.flow, "flow")
    refiner = _load_params(args.refiner, "refiner") if args.refiner else None
    seg = _load_params(args.segmenter, "segmenter")
    refs_dir = args.refs or args.data
    refs = [img for img, _ in load_pairs(_manifest(refs_dir),
                                         None if args.refs else "test")]
    host_pairs = load_pairs(manifest, "train")[:args.n_synth]
    hosts = [img for img, _ in host_pairs]
    samp = cfg["sampler"]
    images, masks = synthesize_set(
        hosts, vae, flow, refiner, steps=samp["steps"], seed=samp["seed"],
        threshold=samp["threshold"], composite=samp["composite"],
        auto_edge=(samp["auto_edge_lo"], samp["auto_edge_hi"]),
        host_masks=[m for _, m in host_pairs])
    report = build_report(refs, images, masks, seg, vae,
                          FeatureExtractor(cfg["metrics"]["extractor_seed"]),
                          tau=cfg["metrics"]["tau"], config_hash=cfg.hash())
    _write_text(args.out, report.to_text())
    rec.add_output("report", args.out)
    rec.write(args.out + ".run_record.json")
    print(report.to_text(), end="")
    return 0


def cmd_benchmark(args):
    cfg = _config(args)
    rec = RunRecord("benchmark", cfg)
    manifest = _manifest(args.data)
    vae = _load_params(args.vae, "vae")
    flow = _load_params(args.flow, "flow")
    refiner = _load_params(args.refiner, "refiner") if args.refiner else None
    pairs = load_pairs(manifest, "train")
    hosts = [img for img, _ in pairs][:max(8, args.n_samples)]
    refs = [img for img, _ in pairs][:len(hosts)]
    steps = [int(s) for s in args.steps.split(",")] if args.steps \
        else list(cfg["sampler"]["step_list"])
    rows = benchmark_steps(steps, hosts, refs, vae, flow, refiner,
                           FeatureExtractor(cfg["metrics"]["extractor_seed"]),
                           seed=cfg["sampler"]["seed"])
    table = benchmark_table(rows)
    _write_text(args.out, table)
    rec.add_output("table", args.out)
    rec.write(args.out + ".run_record.json")
    print(table, end="")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    rec = RunRecord("ablate", cfg)
    manifest = _manifest(args.data)
    pairs = load_pairs(manifest, "train")
    vae = _load_params(args.vae, "vae")
    seg = _load_params(args.segmenter, "segmenter")
    refs_dir = args.refs or args.data
    refs = [img for img, _ in load_pairs(_manifest(refs_dir),
                                         None if args.refs else "test")]
    samp = cfg["sampler"]
    rows = run_ablation(
        pairs, refs, vae, seg, cfg.train_config("flow"),
        cfg.train_config("refiner"),
        sampler_kw=dict(steps=samp["steps"], seed=samp["seed"],
                        threshold=samp["threshold"],
                        composite=samp["composite"],
                        auto_edge=(samp["auto_edge_lo"],
                                   samp["auto_edge_hi"])),
        extractor=FeatureExtractor(cfg["metrics"]["extractor_seed"]),
        tau=cfg["metrics"]["tau"])
    table = ablation_table(rows)
    _write_text(args.out, table)
    rec.add_output("table", args.out)
    rec.write(args.out + ".run_record.json")
    print(table, end="")
    return 0


def _to_pgm(slice2d):
    arr = np.clip(np.asarray(slice2d, dtype=np.float64), 0.0, 1.0)
    pix = np.round(arr * 255.0).astype(np.uint8)
    header = b"P5\n%d %d\n255\n" % (pix.shape[1], pix.shape[0])
    return header + pix.tobytes()


def cmd_export_slices(args):
    cfg = _config(args)
    rec = RunRecord("export-slices", cfg)
    vol = read_volume(args.volume)
    rec.add_input("volume", args.volume)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.splitext(os.path.basename(args.volume))[0]
    planes = args.planes.split(",") if args.planes \
        else ["axial", "coronal", "sagittal"]
    for plane in planes:
        path = os.path.join(args.out, "%s_%s.pgm" % (base, plane))
        with open(path, "wb") as f:
            f.write(_to_pgm(middle_slices(vol, plane)))
        rec.add_output(plane, path)
    rec.write(os.path.join(args.out, base + ".run_record.json"))
    print("wrote %d slice(s) to %s" % (len(planes), args.out))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="flowsynth",
        description="Boundary-aware joint 3D image+mask synthesis via "
                    "rectified flow matching on procedural phantoms.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI run configuration")

    sp = sub.add_parser("gen-data", help="generate a phantom dataset")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    for stage in ("vae", "flow", "refiner", "segmenter"):
        sp = sub.add_parser("train-" + stage, help="train the " + stage)
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--out", required=True)
        if stage in ("flow", "refiner"):
            sp.add_argument("--vae", required=True)
        if stage == "refiner":
            sp.add_argument("--flow", required=True)
        sp.set_defaults(func=lambda a, s=stage: _train_command(a, s))

    sp = sub.add_parser("synthesize", help="inpaint one host volume")
    common(sp)
    sp.add_argument("--host", required=True, help="host image .volf")
    sp.add_argument("--vae", required=True)
    sp.add_argument("--flow", required=True)
    sp.add_argument("--refiner")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("evaluate", help="full metric report")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--refs", help="separate real reference dataset "
                                   "(default: test split of --data)")
    sp.add_argument("--vae", required=True)
    sp.add_argument("--flow", required=True)
    sp.add_argument("--refiner")
    sp.add_argument("--segmenter", required=True)
    sp.add_argument("--n-synth", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("benchmark", help="step-count timing table")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--flow", required=True)
    sp.add_argument("--refiner")
    sp.add_argument("--steps", help="comma-separated step counts")
    sp.add_argument("--n-samples", type=int, default=8)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("ablate", help="five-row ablation grid")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--refs")
    sp.add_argument("--vae", required=True)
    sp.add_argument("--segmenter", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("export-slices", help="middle slices as PGM")
    common(sp)
    sp.add_argument("--volume", required=True)
    sp.add_argument("--planes", help="comma list: axial,coronal,sagittal")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_slices)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(cls for cls, _ in EXIT_CODES) as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print("error: %s" % exc, file=sys.stderr)
                return code
        raise  # unreachable


if __name__ == "__main__":
    sys.exit(main())
