"""Acceptance criteria A1-A8.

Each test prints exactly one ``A<k> PASS/FAIL: <measurements>`` line and
asserts on it. A3-A6 use the acceptance-scale artifacts (64 phantoms at
32^3, pinned step counts) from the disk cache in tests/.cache; training
them from scratch is bit-identical to a cache hit and takes about an
hour of CPU in total (warm with ``python3 tests/cachetools.py``).
"""

import dataclasses
import json
import os
import time
import warnings

import numpy as np

import cachetools
from flowsynth import tensor as T
from flowsynth.flow import (FlowBatch, FlowParams, FlowTrainConfig,
                            forward_interpolate, one_step_predict,
                            total_flow_loss, train_flow, unpack_joint)
from flowsynth.metrics import (FeatureExtractor, dice, frechet_distance,
                               frechet_from_moments, evaluate_pairs, nsd,
                               slice_frechet)
from flowsynth.phantom import PhantomSpec, make_dataset
from flowsynth.pipeline import (build_report, load_pairs,
                                refiner_vs_upsample_dice, run_ablation,
                                synthesize_set)
from flowsynth.refiner import (RefinerParams, RefinerTrainConfig, loss_rec,
                               refine, train_refiner)
from flowsynth.rng import Rng
from flowsynth.sampler import (SampleRequest, benchmark_steps,
                               euler_integrate, synthesize)
from flowsynth.segmenter import SegTrainConfig, train_segmenter
from flowsynth.tensor import Tensor, grad_check
from flowsynth.vae import VaeParams, VaeTrainConfig, train_vae, vae_loss

from test_kernels import naive_conv3d
from test_metrics import brute_force_nsd, _random_blob


def _criterion(name, ok, detail):
    line = "%s %s: %s" % (name, "PASS" if ok else "FAIL", detail)
    print("\n" + line)
    assert ok, line


def _t32(rng, shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32),
                  requires_grad=True)


# ---------------------------------------------------------------- A1 --

def _op_cases(rng, i):
    """One random configuration per differentiable op family."""
    n = 2 + (i % 3)
    a = _t32(rng, (n, 3))
    pos = Tensor(rng.uniform(0.5, 2.0, (n, 3)).astype(np.float32),
                 requires_grad=True)
    other = Tensor(rng.standard_normal((1, 3)).astype(np.float32))
    mat = Tensor(rng.standard_normal((3, 4)).astype(np.float32))
    vol = _t32(rng, (1, 2, 2, 2, 2))
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32)
               * 0.2)
    wt = Tensor(w.data, requires_grad=True)
    xfix = Tensor(rng.standard_normal((1, 2, 2, 2, 2)).astype(np.float32))
    down = _t32(rng, (1, 1, 4, 4, 4))
    return [
        ("add", lambda x: T.tsum(x + other), a),
        ("sub", lambda x: T.tsum(other - x), a),
        ("mul", lambda x: T.tsum(x * other), a),
        ("div", lambda x: T.tsum(x / Tensor(pos.data)), a),
        ("div_num", lambda x: T.tsum(Tensor(a.data) / x), pos),
        ("exp", lambda x: T.tsum(T.exp(x)), a),
        ("log", lambda x: T.tsum(T.log(x)), pos),
        ("sigmoid", lambda x: T.tsum(T.sigmoid(x)), a),
        ("silu", lambda x: T.tsum(T.silu(x)), a),
        ("square", lambda x: T.tsum(T.square(x)), a),
        ("mean", lambda x: T.tmean(x * x), a),
        ("sum_axes", lambda x: T.tmean(T.square(T.tsum(x, axes=(0,)))), a),
        ("reshape", lambda x: T.tmean(T.square(T.reshape(x, (-1,)))), a),
        ("concat", lambda x: T.tmean(T.square(T.concat([x, x], axis=1))),
         a),
        ("narrow", lambda x: T.tmean(T.square(T.narrow(x, 1, 1, 2))), a),
        ("matmul", lambda x: T.tmean(T.square(T.matmul(x, mat))), a),
        ("conv3d_x", lambda x: T.tmean(T.square(
            T.conv3d(x, w, stride=1, pad=1))), vol),
        ("conv3d_w", lambda x: T.tmean(T.square(
            T.conv3d(xfix, x, stride=1, pad=1))), wt),
        ("nearest_up2", lambda x: T.tmean(T.square(T.nearest_up2(x))), vol),
        ("mean_down", lambda x: T.tmean(T.square(T.mean_down(x, 2))), down),
    ]


def test_a1_numeric_core():
    t0 = time.time()
    rng = np.random.default_rng(42)
    # forward conv3d against the naive-loop oracle
    fwd_err = 0.0
    for i in range(3):
        x = rng.standard_normal((1, 2, 4, 4, 4)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32) * 0.2
        b = rng.standard_normal((3,)).astype(np.float32)
        got = T.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1)
        want = naive_conv3d(x, w, b, 1, 1)
        fwd_err = max(fwd_err, float(np.abs(got.data - want).max()))
    # 10 random configurations of every differentiable op
    worst_op, worst = "", 0.0
    for i in range(10):
        for name, f, x in _op_cases(rng, i):
            err = grad_check(f, x)
            if err > worst:
                worst_op, worst = name, err
    # full loss compositions
    vae = VaeParams(seed=3)
    img = Tensor(rng.uniform(0, 1, (1, 1, 8, 8, 8)).astype(np.float32),
                 requires_grad=True)
    e_vae = grad_check(lambda x: vae_loss(vae, x, None)[0], img)
    flow = FlowParams(seed=3)
    cfg = FlowTrainConfig(steps=1)
    ll = 4
    zm = Tensor(rng.standard_normal((1, 4, ll, ll, ll)).astype(np.float32))
    bi = Tensor((rng.random((1, 1, ll, ll, ll)) > 0.5).astype(np.float32))
    eps = Tensor(rng.standard_normal((1, 5, ll, ll, ll)).astype(np.float32))
    tval = np.array([0.37], np.float32)
    x1 = _t32(rng, (1, 5, ll, ll, ll))

    def f_flow(x):
        batch = FlowBatch(x, zm, bi, eps, tval)
        return total_flow_loss(flow, batch, cfg)[0]

    e_flow = grad_check(f_flow, x1)
    refiner = RefinerParams(seed=3)
    feats = [Tensor(rng.standard_normal(s).astype(np.float32))
             for s in ((1, 32, 4, 4, 4), (1, 16, 8, 8, 8),
                       (1, 1, 16, 16, 16))]
    target = Tensor((rng.random((1, 1, 16, 16, 16)) > 0.5)
                    .astype(np.float32))
    m1 = _t32(rng, (1, 1, 4, 4, 4))
    e_rec = grad_check(
        lambda x: loss_rec(refine(refiner, x, feats), target), m1)
    elapsed = time.time() - t0
    worst_all = max(worst, e_vae, e_flow, e_rec)
    _criterion(
        "A1", fwd_err < 1e-5 and worst_all < 1e-3 and elapsed < 120,
        "conv fwd err %.2e (<1e-5); worst grad err %.2e (<1e-3, op=%s; "
        "vae %.2e flow %.2e rec %.2e); %.1fs (<120s)"
        % (fwd_err, worst_all, worst_op, e_vae, e_flow, e_rec, elapsed))


# ---------------------------------------------------------------- A2 --

class _FieldStub:
    def __init__(self, fn):
        self.fn = fn

    def forward(self, x, z_m, b_ind, t):
        return unpack_joint(Tensor(self.fn(x.data, t)))


def test_a2_algebraic_identities():
    t0 = time.time()
    rng = np.random.default_rng(7)
    x1 = Tensor(rng.standard_normal((2, 5, 4, 4, 4)).astype(np.float32))
    eps = Tensor(rng.standard_normal((2, 5, 4, 4, 4)).astype(np.float32))
    e0 = np.abs(forward_interpolate(x1, eps, 0.0).data - eps.data).max()
    e1 = np.abs(forward_interpolate(x1, eps, 1.0).data - x1.data).max()
    # oracle field x1 - eps recovers x1 via the one-step estimate
    e_os = 0.0
    for t in rng.uniform(0.0, 1.0, 20):
        x_t = forward_interpolate(x1, eps, float(t))
        v = x1 - eps
        vz, vm = unpack_joint(v)
        z1h, m1h = one_step_predict(x_t, vz, vm, float(t))
        rec = np.concatenate([z1h.data, m1h.data], axis=1)
        e_os = max(e_os, float(np.abs(rec - x1.data).max()))
    # per-trajectory-constant field: Euler is step-count invariant
    x0 = Tensor(rng.standard_normal((1, 5, 4, 4, 4)).astype(np.float32))
    tgt = rng.standard_normal((1, 5, 4, 4, 4)).astype(np.float32)
    stub = _FieldStub(lambda x, t: tgt - x0.data)
    zm = Tensor(np.zeros((1, 4, 4, 4, 4), np.float32))
    e_euler = 0.0
    for steps in (1, 2, 5, 10, 50):
        out = euler_integrate(stub, zm, None, steps, Rng(0), x0=x0)
        e_euler = max(e_euler, float(np.abs(out.data - tgt).max()))
    elapsed = time.time() - t0
    _criterion(
        "A2",
        e0 < 1e-6 and e1 < 1e-6 and e_os < 1e-6 and e_euler < 1e-6
        and elapsed < 60,
        "endpoint errs %.2e/%.2e, one-step err %.2e, constant-field "
        "Euler err %.2e (all <1e-6); %.1fs (<60s)"
        % (e0, e1, e_os, e_euler, elapsed))


# ----------------------------------------------------- shared cache --

_EXT = FeatureExtractor(seed=7)


def _refs_images():
    return [img for img, _ in load_pairs(cachetools.get_refs())]


def _train_hosts(n):
    pairs = load_pairs(cachetools.get_dataset(), "train")
    return [img for img, _ in pairs[:n]]


# ---------------------------------------------------------------- A3 --

def test_a3_training_efficacy():
    """Synthesis runs with latent compositing off so the score reflects
    the flow's generated content everywhere; with compositing on, host
    passthrough outside the box dominates the slices and an untrained
    flow looks nearly as good as a trained one."""
    vae = cachetools.get_vae()
    flow = cachetools.get_flow("full")
    refs = _refs_images()
    hosts = _train_hosts(32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        imgs, _ = synthesize_set(hosts, vae, flow, None, steps=10,
                                 seed=0, composite=False)
        trained = slice_frechet(refs, imgs, _EXT)["avg"]
        u_imgs, _ = synthesize_set(hosts, vae, FlowParams(seed=0), None,
                                   steps=10, seed=0, composite=False)
        untrained = slice_frechet(refs, u_imgs, _EXT)["avg"]
        split_half = slice_frechet(refs[:16], refs[16:], _EXT)["avg"]
    times = cachetools.train_times()
    stage_keys = ("vae_s2000", "flow_full_s3000", "refiner_full_s1000")
    budget = sum(times.get(k, 0.0) for k in stage_keys)
    budget_ok = budget < 10800 if all(k in times for k in stage_keys) \
        else True
    _criterion(
        "A3",
        trained <= 0.5 * untrained and trained <= 2.0 * split_half
        and budget_ok,
        "frechet trained %.4f <= 0.5*untrained %.4f and <= 2*split-half "
        "%.4f; train wall %.0fs (<10800s)"
        % (trained, untrained, split_half, budget))


# ---------------------------------------------------------------- A4 --

def test_a4_step_efficiency():
    t0 = time.time()
    vae = cachetools.get_vae()
    flow = cachetools.get_flow("full")
    refiner = cachetools.get_refiner("full")
    refs = _refs_images()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = benchmark_steps([10, 50], _train_hosts(8), refs, vae, flow,
                               refiner, _EXT, seed=0)
    ratio = rows[1]["seconds_per_sample"] / rows[0]["seconds_per_sample"]
    fr10, fr50 = rows[0]["frechet_avg"], rows[1]["frechet_avg"]
    elapsed = time.time() - t0
    _criterion(
        "A4",
        3.5 <= ratio <= 6.5 and fr10 <= 1.3 * fr50 and elapsed < 600,
        "time(50)/time(10) = %.2f in [3.5, 6.5]; frechet(10) %.4f <= "
        "1.3*frechet(50) %.4f; %.0fs (<600s)"
        % (ratio, fr10, fr50, elapsed))


# ---------------------------------------------------------------- A5 --

def test_a5_refiner_direction():
    vae = cachetools.get_vae()
    flow = cachetools.get_flow("full")
    refiner = cachetools.get_refiner("full")
    seg = cachetools.get_segmenter()
    test_pairs = load_pairs(cachetools.get_dataset(), "test")
    d_ref, d_up = refiner_vs_upsample_dice(test_pairs, vae, refiner)
    hosts = _train_hosts(16)
    imgs, masks_vmr = synthesize_set(hosts, vae, flow, refiner, steps=10,
                                     seed=0)
    _, masks_raw = synthesize_set(hosts, vae, flow, None, steps=10, seed=0)
    dsc_vmr, _ = evaluate_pairs(imgs, masks_vmr, seg)
    dsc_raw, _ = evaluate_pairs(imgs, masks_raw, seg)
    _criterion(
        "A5",
        d_ref >= d_up + 0.03 and dsc_vmr >= dsc_raw - 1e-9,
        "latent-mask recovery dice refined %.4f >= upsampled %.4f + 0.03; "
        "synthesized-pair DSC with refiner %.4f >= without %.4f"
        % (d_ref, d_up, dsc_vmr, dsc_raw))


# ---------------------------------------------------------------- A6 --

def test_a6_ablation_direction():
    vae = cachetools.get_vae()
    seg = cachetools.get_segmenter()
    train_pairs = load_pairs(cachetools.get_dataset(), "train")
    refs = _refs_images()

    def trainer(row, fcfg, rcfg):
        return cachetools.get_flow(row), cachetools.get_refiner(row)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rows = run_ablation(
            train_pairs, refs, vae, seg,
            FlowTrainConfig(steps=cachetools.ACCEPT["flow_steps"]),
            RefinerTrainConfig(steps=cachetools.ACCEPT["refiner_steps"]),
            sampler_kw=dict(steps=10, seed=0), extractor=_EXT,
            trainer=trainer)
    by_name = {r["config"]: r for r in rows}
    full = by_name["full"]
    # Tie margins are pinned at half the measured sampling-seed noise
    # of the full pipeline on this grid (rerunning with a different
    # sampler seed moves DSC/NSD by ~0.047 and frechet by ~2.1e-5);
    # differences inside the margin are ties, not losses.
    eps_fr = 1e-5
    eps_seg = 0.02
    verdicts = []
    ok = True
    for name, r in by_name.items():
        if name == "full":
            continue
        wins = (int(full["frechet_avg"] <= r["frechet_avg"] + eps_fr)
                + int(full["dice"] >= r["dice"] - eps_seg)
                + int(full["nsd"] >= r["nsd"] - eps_seg))
        verdicts.append("%s %d/3" % (name, wins))
        ok = ok and wins >= 2
    detail = "full (fr %.6f dsc %.4f nsd %.4f) best/tied vs: %s (need 2/3)"\
        % (full["frechet_avg"], full["dice"], full["nsd"],
           ", ".join(verdicts))
    _criterion("A6", ok, detail)


# ---------------------------------------------------------------- A7 --

def test_a7_metric_self_consistency():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((40, 6))
    e_self = frechet_distance(feats, feats)
    cov = np.eye(4)
    e_shift = abs(frechet_from_moments(
        np.zeros(4), cov, [3.0, 0.0, 4.0, 0.0], cov) - 25.0)
    e_1d = abs(frechet_from_moments([0.0], [[1.0]], [2.0], [[9.0]])
               - (4.0 + 4.0))
    a = np.zeros((4, 4, 4), np.float32)
    b = a.copy()
    b[0, 0, 0] = 1.0
    dice_ok = (dice(a, a) == 1.0 and dice(b, b) == 1.0
               and dice(a, b) == 0.0)
    m = _random_blob(5).astype(np.float32)
    nsd_ok = nsd(m, m) == 1.0
    worst_nsd = 0.0
    checked = 0
    for seed in range(20):
        ma = _random_blob(2 * seed)
        mb = _random_blob(2 * seed + 1)
        if not ma.any() or not mb.any():
            continue
        checked += 1
        for tau in (1.0, 2.0):
            got = nsd(ma.astype(np.float32), mb.astype(np.float32),
                      tau=tau)
            worst_nsd = max(worst_nsd,
                            abs(got - brute_force_nsd(ma, mb, tau)))
    _criterion(
        "A7",
        e_self < 1e-6 and e_shift < 1e-6 and e_1d < 1e-6 and dice_ok
        and nsd_ok and worst_nsd < 1e-9 and checked >= 15,
        "frechet(A,A) %.2e, mean-shift err %.2e, 1-D err %.2e (<1e-6); "
        "dice/nsd trivial cases exact; NSD vs brute force max err %.2e "
        "over %d pairs" % (e_self, e_shift, e_1d, worst_nsd, checked))


# ---------------------------------------------------------------- A8 --

def _ckpt_bytes(params):
    state = params.ps.state_dict()
    return b"".join(k.encode() + np.ascontiguousarray(v).tobytes()
                    for k, v in sorted(state.items()))


def _dir_bytes(path):
    out = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as f:
            out[name] = f.read()
    return out


def test_a8_reproducibility(tmp_path, tiny_pairs):
    spec = PhantomSpec(dims=(16, 16, 16), organ_radii=(5, 7),
                       lesion_radii=(2, 4))
    mismatches = []

    d1, d2 = str(tmp_path / "d1"), str(tmp_path / "d2")
    make_dataset(6, 11, spec, d1)
    make_dataset(6, 11, spec, d2)
    if _dir_bytes(d1) != _dir_bytes(d2):
        mismatches.append("dataset")

    images = [img for img, _ in tiny_pairs]
    vaes = [train_vae(VaeTrainConfig(steps=50), images) for _ in range(2)]
    if _ckpt_bytes(vaes[0]) != _ckpt_bytes(vaes[1]):
        mismatches.append("vae")
    flows = [train_flow(FlowTrainConfig(steps=30, batch=2), tiny_pairs,
                        vaes[0]) for _ in range(2)]
    if _ckpt_bytes(flows[0]) != _ckpt_bytes(flows[1]):
        mismatches.append("flow")
    refs = [train_refiner(RefinerTrainConfig(steps=20), tiny_pairs,
                          vaes[0], flows[0]) for _ in range(2)]
    if _ckpt_bytes(refs[0]) != _ckpt_bytes(refs[1]):
        mismatches.append("refiner")
    segs = [train_segmenter(SegTrainConfig(steps=30), tiny_pairs)
            for _ in range(2)]
    if _ckpt_bytes(segs[0]) != _ckpt_bytes(segs[1]):
        mismatches.append("segmenter")

    req = SampleRequest(host=images[0], steps=4, seed=21, auto_edge=(4, 8))
    outs = [synthesize(req, vaes[0], flows[0], refs[0]) for _ in range(2)]
    vol_same = all(np.array_equal(a.data, b.data)
                   for a, b in zip(outs[0][:3], outs[1][:3]))
    prov = [dict(o[3]) for o in outs]
    for p in prov:
        p.pop("wall_seconds")
    if not vol_same or json.dumps(prov[0], sort_keys=True) \
            != json.dumps(prov[1], sort_keys=True):
        mismatches.append("synthesize")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reports = []
        for _ in range(2):
            s_imgs, s_masks = synthesize_set(images, vaes[0], flows[0],
                                             refs[0], steps=4, seed=1,
                                             auto_edge=(4, 8))
            reports.append(build_report(images, s_imgs, s_masks, segs[0],
                                        vaes[0], config_hash="h").to_text())
    if reports[0] != reports[1]:
        mismatches.append("report")

    _criterion(
        "A8", not mismatches,
        "bit-identical reruns for dataset, vae/flow/refiner/segmenter "
        "checkpoints, synthesis, and report"
        if not mismatches else "mismatch in: %s" % ", ".join(mismatches))
