"""Oracle and invariant suites behind ``grcseg verify``.

Each suite returns a list of :class:`Check` rows holding the measured worst
error next to its threshold, so callers can print or assert on them.
"""
from __future__ import annotations

import json
import math
import os
import subprocess
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .cic import (DistributionHead, FeatureDistribution, PairedSites, cic_loss, distribution_head,
                  kl_diag_gaussian, reparameterize)
from .fusion import AttentionParams, cross_attention, fusion_weight, global_fuse, local_fuse
from .lidar_io import PointCloud, SensorModel, generate_scene, random_scene_spec
from .model import GRCNet, ModelConfig
from .rangeview import (InvertedResidualBlock, depthwise_conv2d, instance_norm2d,
                        inverted_residual_forward, project_pixels, spherical_project)
from .rng import make_rng
from .sparsevoxel import SparseConvBlock, SparseVoxelGrid, sparse_conv3d, unpack_keys, pack_keys
from .train import cross_entropy, total_loss

SUITES = ("grad", "kl", "projection", "fusion")


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self):
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.value:.3e} (limit {self.threshold:.3e}) {self.detail}".rstrip()


def _check_below(name, value, threshold, detail=""):
    return Check(name, float(value), float(threshold), bool(value < threshold), detail)


# -------------------------------------------------------------- gradients

def random_grid(rng, n_voxels, extent, c, voxel_size=1.0) -> SparseVoxelGrid:
    """Random sparse grid with ``n_voxels`` distinct keys inside ``[0, extent)^3``."""
    flat = rng.choice(extent ** 3, size=n_voxels, replace=False)
    keys = np.stack(np.unravel_index(flat, (extent,) * 3), axis=1).astype(np.int64)
    keys = unpack_keys(np.sort(pack_keys(keys)))
    rep = (keys + 0.5) * voxel_size
    return SparseVoxelGrid(voxel_size, keys, ad.parameter(rng.normal(size=(n_voxels, c))), rep,
                           np.ones(n_voxels), np.arange(n_voxels), 1)


def _tiny_model_case(rng):
    sensor = SensorModel(beams=8, azimuth_steps=48, max_range=12.0)
    cloud = generate_scene(random_scene_spec(7, 4, sensor, extent=8.0))
    cfg = ModelConfig.for_ablation("full", n_classes=4, voxel_size=0.5, range_h=8, range_w=48,
                                   geo_channels=(3, 4, 8), geo_strides=(1, 2),
                                   ref_channels=(2, 4, 8), ref_strides=(2, 1),
                                   n_queries=2, heads=2, decoder_hidden=6).validate()
    model = GRCNet(cfg, seed=3)
    # perturb the neutral initializations so every path carries gradient
    for name, p in model.parameters().items():
        if name.endswith(("bias", "beta", "b_mu", "b_sigma")):
            p.data = p.data + rng.normal(0, 0.1, p.shape)

    def f(*_):
        res = model.forward(cloud, train=True, rng=make_rng(11, 9), update_stats=False)
        return total_loss(res.logits, cloud.labels, res.cic, 0.5, cfg.ignore_label)[0]

    return f, list(model.parameters().values())


def gradient_cases(seed=0):
    """(name, f, inputs) for every differentiable building block."""
    rng = np.random.default_rng(seed)
    P = ad.parameter
    cases = []

    for stride in (1, 2):
        grid = random_grid(rng, 40, 5, 3)
        blk = SparseConvBlock.init(3, 4, stride, rng)
        blk.running_mean = rng.normal(0, 0.3, 4)
        blk.running_var = rng.uniform(0.5, 2.0, 4)
        blk.beta = P(rng.normal(0, 0.5, 4))
        blk.bias = P(rng.normal(0, 0.5, 4))
        w = rng.normal(size=(1,))

        def f(*_, grid=grid, blk=blk, w=w):
            return ad.sum(sparse_conv3d(grid, blk).features) * float(w[0])

        cases.append((f"sparse_conv3d/stride{stride}", f,
                      [grid.features, blk.kernel, blk.bias, blk.gamma, blk.beta]))

    x = P(rng.normal(size=(5, 6, 3)))
    gamma, beta, wt = P(rng.uniform(0.5, 1.5, 3)), P(rng.normal(size=3)), rng.normal(size=(5, 6, 3))
    cases.append(("instance_norm2d", lambda *_: ad.sum(instance_norm2d(x, gamma, beta) * wt), [x, gamma, beta]))

    for stride in (1, 2):
        xd, wd = P(rng.normal(size=(6, 8, 3))), P(rng.normal(size=(3, 3, 3)))
        out_shape = depthwise_conv2d(xd, wd, stride).shape
        wo = rng.normal(size=out_shape)
        cases.append((f"depthwise_conv2d/stride{stride}",
                      lambda *_, xd=xd, wd=wd, s=stride, wo=wo: ad.sum(depthwise_conv2d(xd, wd, s) * wo),
                      [xd, wd]))

    blk2 = InvertedResidualBlock.init(3, 3, 1, rng)
    xi = P(rng.normal(size=(4, 6, 3)))
    wi = rng.normal(size=(4, 6, 3))
    cases.append(("inverted_residual", lambda *_: ad.sum(inverted_residual_forward(xi, blk2) * wi),
                  [xi] + list(blk2.parameters().values())))

    feats = P(rng.normal(size=(6, 5)))
    head = DistributionHead.init(5, 4, rng)
    head.b_sigma = P(rng.normal(size=4))
    eps = rng.normal(size=(6, 4))
    wm = rng.normal(size=(6, 4))

    def f_head(*_):
        d = distribution_head(feats, head)
        return ad.sum(reparameterize(d, eps) * wm) + ad.sum(ad.log(d.sigma))

    cases.append(("distribution_head+reparameterize", f_head, [feats] + list(head.parameters().values())))

    mp, sp = P(rng.normal(size=(5, 4))), P(rng.uniform(0.3, 2.0, (5, 4)))
    mq, sq = P(rng.normal(size=(5, 4))), P(rng.uniform(0.3, 2.0, (5, 4)))
    cases.append(("kl_diag_gaussian", lambda *_: ad.sum(kl_diag_gaussian(
        FeatureDistribution(mp, sp), FeatureDistribution(mq, sq))), [mp, sp, mq, sq]))

    pairs = PairedSites(np.array([0, 1, 2, 4, 4]), np.array([3, 0, 2, 1, 4]))
    cases.append(("cic_loss/tau=inf", lambda *_: cic_loss(
        pairs, FeatureDistribution(mp, sp), FeatureDistribution(mq, sq), math.inf), [mp, sp, mq, sq]))

    mug, sgg = P(rng.normal(size=(6, 4))), P(rng.uniform(0.3, 2.0, (6, 4)))
    mur, sgr = P(rng.normal(size=(6, 4))), P(rng.uniform(0.3, 2.0, (6, 4)))
    paired = np.array([1, 1, 0, 1, 1, 0], dtype=bool)
    wf = rng.normal(size=(6, 4))
    cases.append(("local_fuse(alpha)", lambda *_: ad.sum(local_fuse(
        FeatureDistribution(mug, sgg), FeatureDistribution(mur, sgr), paired) * wf), [mug, sgg, mur, sgr]))

    q, ctx = P(rng.normal(size=(3, 8))), P(rng.normal(size=(7, 8)))
    att = AttentionParams.init(8, 2, rng)
    mask = np.array([1, 1, 0, 1, 1, 1, 0], dtype=bool)
    wa = rng.normal(size=(3, 8))
    cases.append(("cross_attention", lambda *_: ad.sum(cross_attention(q, ctx, att, mask) * wa),
                  [q, ctx] + list(att.parameters().values())))

    mg = P(rng.normal(size=(5, 8)))
    s1, s2 = AttentionParams.init(8, 2, rng), AttentionParams.init(8, 2, rng)
    wg = rng.normal(size=(5, 8))
    cases.append(("global_fuse", lambda *_: ad.sum(global_fuse(mg, ctx, q, s1, s2, mask) * wg),
                  [mg, ctx, q] + list(s1.parameters().values()) + list(s2.parameters().values())))

    logits = P(rng.normal(size=(9, 4)))
    labels = np.array([0, 1, 2, 3, 255, 1, 0, 2, 3])
    cases.append(("cross_entropy", lambda *_: cross_entropy(logits, labels), [logits]))

    f, inputs = _tiny_model_case(rng)
    cases.append(("network_total_loss", f, inputs))
    return cases


def grad_suite(samples_per_case=20, seed=0, tol=1e-4, step=1e-5):
    checks, total = [], 0
    for k, (name, f, inputs) in enumerate(gradient_cases(seed)):
        rep = ad.gradient_check(f, inputs, step=step, tol=tol, n_samples=samples_per_case, seed=seed + k)
        total += len(rep.positions)
        checks.append(_check_below(f"grad/{name}", rep.max_rel_err, tol, f"n={len(rep.positions)}"))
    checks.append(Check("grad/sampled_parameters", total, 200, total >= 200, ">= 200 required"))
    return checks


# --------------------------------------------------------------------- KL

def kl_monte_carlo(mu_p, sd_p, mu_q, sd_q, n, rng, chunk=250_000):
    """Sample mean and standard error of log p(x) - log q(x) for x ~ p."""
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = mu_p + sd_p * rng.standard_normal((m, mu_p.size))
        lp = -0.5 * ((x - mu_p) / sd_p) ** 2 - np.log(sd_p)
        lq = -0.5 * ((x - mu_q) / sd_q) ** 2 - np.log(sd_q)
        d = (lp - lq).sum(axis=1)
        total += d.sum()
        total_sq += (d * d).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return mean, math.sqrt(var / n)


def _kl(mp, sp, mq, sq):
    d = lambda m, s: FeatureDistribution(ad.tensor(m), ad.tensor(s))
    return float(kl_diag_gaussian(d(mp, sp), d(mq, sq)).data)


def kl_suite(pairs=100, samples=1_000_000, seed=0):
    rng = make_rng(seed, 7)
    worst, fails = 0.0, 0
    for _ in range(pairs):
        c = int(rng.integers(1, 9))
        mp, mq = rng.normal(size=c), rng.normal(size=c)
        sp, sq = rng.uniform(0.1, 3.0, c), rng.uniform(0.1, 3.0, c)
        mc, se = kl_monte_carlo(mp, sp, mq, sq, samples, rng)
        z = abs(_kl(mp, sp, mq, sq) - mc) / se
        worst = max(worst, z)
        fails += z > 3.0
    one = np.ones(1)
    case_a = abs(_kl(np.zeros(1), one, one, one) - 0.5)
    case_b = abs(_kl(np.zeros(1), 2 * one, np.zeros(1), one) - (math.log(0.5) + 1.5))
    return [
        Check("kl/monte_carlo_max_z", worst, 3.0, fails == 0, f"{fails} of {pairs} pairs beyond 3 SE"),
        _check_below("kl/shifted_mean", case_a, 1e-12),
        _check_below("kl/wider_p", case_b, 1e-12),
    ]


# -------------------------------------------------------------- projection

def random_fov_points(n, rng, fov_up=3.0, fov_down=-25.0, r_min=1.0, r_max=40.0):
    yaw = rng.uniform(-np.pi, np.pi, n)
    pitch = np.radians(rng.uniform(fov_down, fov_up, n))
    r = rng.uniform(r_min, r_max, n)
    xyz = np.stack([r * np.cos(pitch) * np.cos(yaw), r * np.cos(pitch) * np.sin(yaw), r * np.sin(pitch)], 1)
    return np.column_stack([xyz, rng.uniform(0, 1, n)])


def projection_suite(n=10_000, seed=0, H=64, W=512):
    rng = make_rng(seed, 8)
    pts = random_fov_points(n, rng)
    img = spherical_project(PointCloud(pts), H, W)
    u, v, ok, r = project_pixels(pts[:, :3], H, W, img.fov_up, img.fov_down)
    vv, uu = np.nonzero(img.mask)
    src = img.point_index[vv, uu]
    back_u, back_v, _, _ = project_pixels(pts[src, :3], H, W, img.fov_up, img.fov_down)
    reproject_bad = int(((back_u != uu) | (back_v != vv)).sum())
    # every point is either stored at its pixel or lost to a point no farther away
    stored = img.point_index[v, u]
    winner_ok = (stored == np.arange(n)) | (r[stored] <= r)
    depth_bad = float(np.abs(img.depth[vv, uu] - r[src]).max())
    refl_bad = float(np.abs(img.reflectance[vv, uu] - pts[src, 3]).max())
    return [
        Check("projection/in_fov", int((~ok).sum()), 1, bool(ok.all()), f"{n} points"),
        Check("projection/reprojection_mismatches", reproject_bad, 1, reproject_bad == 0,
              f"{len(src)} valid pixels"),
        Check("projection/back_pointer_violations", int((~winner_ok).sum()), 1, bool(winner_ok.all())),
        Check("projection/stored_values", max(depth_bad, refl_bad), 1e-300, depth_bad == 0 and refl_bad == 0),
    ]


# ------------------------------------------------------------------ fusion

def alpha_value(sg, sr):
    return float(fusion_weight(ad.tensor(sg), ad.tensor(sr)).data)


def attention_scaling_exponent(sizes=(2048, 3251, 5161, 8192), c=8, m=8, voxels=32, rounds=50,
                               work=40_000, seed=0):
    """Fit log(cost) against log(cells) for ``global_fuse`` at fixed query count.

    Cost is the time per call minus the time with an 8-cell context, i.e. the
    part that depends on the number of cells at all.  Sizes are timed
    round-robin for ``rounds`` rounds and each keeps its fastest round, so slow
    phases of a shared machine hit every size alike.  Width 8 keeps the largest
    context with its keys and values (about 1.5 MB) inside a 2 MB L2; wider
    contexts spill out of it and the per-cell cost steps up partway.
    """
    rng = np.random.default_rng(seed)
    s1, s2 = AttentionParams.init(c, 4, rng), AttentionParams.init(c, 4, rng)
    q = ad.tensor(rng.normal(size=(m, c)))
    mg = ad.tensor(rng.normal(size=(voxels, c)))
    ns = (8,) + tuple(sizes)
    ctx = {n: ad.tensor(rng.normal(size=(n, c))) for n in ns}
    best = dict.fromkeys(ns, math.inf)
    for n in ns:
        global_fuse(mg, ctx[n], q, s1, s2)
    for _ in range(rounds):
        for n in ns:
            calls = max(1, work // max(n, 256))
            t0 = time.perf_counter()
            for _ in range(calls):
                global_fuse(mg, ctx[n], q, s1, s2)
            best[n] = min(best[n], (time.perf_counter() - t0) / calls)
    cost = [best[n] - best[8] for n in sizes]
    slope = np.polyfit(np.log(sizes), np.log(cost), 1)[0]
    return float(slope), cost


# Fixed glibc allocation thresholds: every temporary comes from the already
# touched heap, so the timings measure arithmetic rather than page faults.
_ALLOC_ENV = {"MALLOC_MMAP_THRESHOLD_": str(32 * 1024 * 1024), "MALLOC_TRIM_THRESHOLD_": str(1 << 30)}


def measure_scaling_isolated(trials=5, timeout=900):
    """Median exponent of ``trials`` independent fits, each in a fresh interpreter
    with fixed allocator settings.  Also returns the per-trial exponents."""
    env = dict(os.environ, **_ALLOC_ENV)
    code = "import json; from grcseg.verify import attention_scaling_exponent as f; print(json.dumps(f()[0]))"
    slopes = []
    for _ in range(trials):
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                             timeout=timeout, check=True)
        slopes.append(float(json.loads(out.stdout.strip().splitlines()[-1])))
    return float(np.median(slopes)), slopes


def fusion_suite(seed=0, timing=True):
    rng = np.random.default_rng(seed)
    checks = []
    # beyond |1/sg - 1/sr| ~ 36 the complement 1 - alpha rounds to 0 in float64
    s = np.exp(rng.uniform(np.log(0.1), np.log(10.0), 10_000))
    t = np.exp(rng.uniform(np.log(0.1), np.log(10.0), 10_000))
    a = fusion_weight(ad.tensor(s), ad.tensor(t)).data
    checks.append(Check("fusion/alpha_open_interval", float(np.min(np.minimum(a, 1 - a))), 0.0,
                        bool(((a > 0) & (a < 1)).all())))
    eq = fusion_weight(ad.tensor(s), ad.tensor(s)).data
    checks.append(Check("fusion/alpha_equal_sigma", float(np.abs(eq - 0.5).max()), 0.0,
                        bool((eq == 0.5).all()), "exact"))
    g = np.linspace(0.05, 5.0, 50)
    A = fusion_weight(ad.tensor(np.repeat(g, 50)), ad.tensor(np.tile(g, 50))).data.reshape(50, 50)
    worst = max(float(np.diff(A, axis=0).max()), float(-np.diff(A, axis=1).min()))
    checks.append(Check("fusion/alpha_monotone", worst, 0.0, worst < 0, "decreasing in geo, increasing in ref"))
    checks.append(_check_below("fusion/alpha_worked_value", abs(alpha_value(0.5, 1.0) - 0.731059), 1e-6))

    c, m = 16, 4
    att = AttentionParams.init(c, 4, rng)
    q, ctx = ad.tensor(rng.normal(size=(m, c))), ad.tensor(rng.normal(size=(30, c)))
    mask = rng.random(30) < 0.7
    _, weights = cross_attention(q, ctx, att, mask, return_weights=True)
    row_err = max(float(np.abs(w.data.sum(axis=-1) - 1).max()) for w in weights)
    checks.append(_check_below("fusion/attention_row_sums", row_err, 1e-12))

    s1, s2 = AttentionParams.init(c, 4, rng), AttentionParams.init(c, 4, rng)
    mg = ad.tensor(rng.normal(size=(12, c)))
    base = global_fuse(mg, ctx, q, s1, s2, mask).data
    perm = rng.permutation(30)
    permuted = global_fuse(mg, ad.tensor(ctx.data[perm]), q, s1, s2, mask[perm]).data
    checks.append(_check_below("fusion/cell_permutation", float(np.abs(base - permuted).max()), 1e-12))
    nested = cross_attention(mg, cross_attention(q, ctx, s1, mask), s2).data
    checks.append(_check_below("fusion/two_stage_composition", float(np.abs(base - nested).max()), 1e-12))

    if timing:
        slope, trials = measure_scaling_isolated()
        checks.append(Check("fusion/cost_exponent", slope, 0.1, abs(slope - 1.0) <= 0.1,
                            f"target 1.0 +- 0.1; median of {[round(x, 3) for x in trials]}"))
    return checks


def run_suite(name, **kw):
    fns = {"grad": grad_suite, "kl": kl_suite, "projection": projection_suite, "fusion": fusion_suite}
    if name == "all":
        return [c for n in SUITES for c in fns[n](**kw)]
    if name not in fns:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
    return fns[name](**kw)
