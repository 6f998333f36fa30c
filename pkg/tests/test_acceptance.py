"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

Every criterion prints one ``criterion N: PASS|FAIL`` line (also collected in
the terminal summary). The desk-scale training runs (criteria 5-8) share one
session cache so each configuration is trained once.
"""

import statistics
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from helpers import brute_force_resize, fd_check, module_fd_check, report
from seemvsr.data import synthetic_clips
from seemvsr.degrade import bicubic_resize, rgb_to_y
from seemvsr.evaluate import (evaluate_bicubic, evaluate_model, format_ablation_table,
                              format_table, output_indices, run_ablation, summarize)
from seemvsr.masks import MaskStack, load_archive, normalize_masks, save_archive
from seemvsr.metrics import psnr, ssim
from seemvsr.ops import deform_conv2d, flow_warp
from seemvsr.representation import FrNet
from seemvsr.seem import SEEM, ChannelAttention
from seemvsr.training import (ModelConfig, ParamSet, TrainClip, TrainConfig, apply_params,
                              build_model, charbonnier_loss, freeze_base, frozen_checksum,
                              load_checkpoint, save_checkpoint, train_loop)
from seemvsr.window import MiniTSA

pytestmark = pytest.mark.acceptance

# Desk-scale setting: x4, 64x64 LR patches, 2k iterations, 3 training seeds.
# Narrow models at batch 1 keep one run at roughly 7-9 CPU minutes.
SEEDS = (0, 1, 2)
ITERATIONS = 2000
DESK_MODEL = dict(mid_channels=16, up_channels=16, reduction=4)
DESK_TRAIN = dict(iterations=ITERATIONS, batch_size=1, patch_size=64, lr=1e-3)
TRAIN_SCENES = dict(seeds=range(100, 108), t=7, extent=(320, 320))
EVAL_SCENES = dict(seeds=range(200, 204), t=7, extent=(128, 128))
FRAMES = {"window": 5, "recurrent": 3}


class DeskRuns:
    """Lazily trained desk-scale models keyed by (kind, branches, seed)."""

    def __init__(self):
        self.train = [TrainClip(f, m) for f, m in synthetic_clips(**TRAIN_SCENES)]
        self.eval = [(f"scene_{i}", f, m)
                     for i, (f, m) in enumerate(synthetic_clips(**EVAL_SCENES))]
        self.runs = {}

    def config(self, kind, branches=(), seed=0, **overrides):
        mcfg = ModelConfig(kind=kind, num_frames=FRAMES[kind], seem=bool(branches),
                           branches=branches or ("forward", "backward"), **DESK_MODEL)
        args = dict(DESK_TRAIN, seed=seed)
        args.update(overrides)
        return TrainConfig(model=mcfg, **args)

    def run(self, kind, branches=(), seed=0):
        key = (kind, tuple(branches), seed)
        if key not in self.runs:
            cfg = self.config(kind, branches, seed)
            t0 = time.process_time()
            res = train_loop(cfg, self.train)
            seconds = time.process_time() - t0
            rows = evaluate_model(res.model, self.eval, use_masks=bool(branches))
            self.runs[key] = dict(result=res, rows=rows, psnr=summarize(rows)[1][0],
                                  seconds=seconds)
        return self.runs[key]

    def bicubic(self, kind):
        model = build_model(self.config(kind).model)
        rows = evaluate_bicubic(self.eval, frames=lambda t: output_indices(model, t))
        return summarize(rows)[1][0], rows


@pytest.fixture(scope="session")
def desk():
    return DeskRuns()


def _fmt_minutes(seconds):
    return f"{seconds / 60:.1f} min"


# ------------------------------------------------------------- criterion 1

def test_criterion_1_zero_init_transparency(desk):
    bases = {kind: desk.run(kind)["result"].model for kind in ("window", "recurrent")}
    t0 = time.process_time()
    worst = {}
    for kind, base in bases.items():
        seeded = build_model(desk.config(kind, ("forward", "backward")).model)
        apply_params(seeded, ParamSet.from_module(base), partial=True)
        seeded.eval()
        diffs = []
        with torch.no_grad():
            for _, frames, masks in desk.eval:
                lr = bicubic_resize(torch.from_numpy(frames).double(), 0.25).float()
                m = torch.from_numpy(masks.astype(np.float32))
                if kind == "window":
                    x, mm = lr[None, :5], m[None, 2]
                else:
                    x, mm = lr[None], m[None]
                diffs.append((seeded(x, mm) - base(x)).abs().max().item())
        worst[kind] = max(diffs)
    elapsed = time.process_time() - t0
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} max|diff| {v:.2e}" for k, v in worst.items())
    assert report(1, ok, f"{detail} (<= 1e-6); {elapsed:.1f} s (< 1 min)")


# ------------------------------------------------------------- criterion 2

def _fractional(shape, gen, lo=-2, hi=2):
    """Sampling positions kept 0.1 px away from integer lattice points, where
    bilinear interpolation has kinks."""
    whole = torch.randint(lo, hi, shape, generator=gen).double()
    return whole + 0.1 + 0.8 * torch.rand(shape, generator=gen, dtype=torch.float64)


def test_criterion_2_gradient_verification():
    t0 = time.process_time()
    gen = torch.Generator().manual_seed(0)
    rnd = lambda *s: torch.randn(*s, generator=gen, dtype=torch.float64)
    errs = {}

    cab = ChannelAttention(8, 2).double()
    errs["cab"] = module_fd_check(cab, lambda m, x: m(x)[1], (rnd(2, 8, 5, 5),), n_probes=20)

    seem = SEEM(8, 2, zero_init=False).double()
    errs["seem_forward"] = module_fd_check(seem, lambda m, f, r: m(f, r),
                                           (rnd(1, 8, 6, 6), rnd(1, 8, 6, 6)), n_probes=20)

    frnet = FrNet(c_max=4, mid_channels=8).double()
    masks = (torch.rand(1, 4, 6, 6, generator=gen) > 0.5).double()
    errs["f_r"] = module_fd_check(frnet, lambda m, x: m(x, masks), (torch.rand(
        1, 3, 6, 6, generator=gen, dtype=torch.float64),), n_probes=20)

    x, w, b = rnd(1, 3, 6, 7), rnd(4, 3, 3, 3), rnd(4)
    off = _fractional((1, 18, 6, 7), gen)
    errs["dcn feature"] = fd_check(lambda t: deform_conv2d(t, off, w, b), (x,))
    errs["dcn offsets"] = fd_check(lambda o: deform_conv2d(x, o, w, b), (off,))
    errs["dcn weights"] = fd_check(lambda ww, bb: deform_conv2d(x, off, ww, bb), (w, b))

    h, flow = rnd(1, 3, 7, 8), _fractional((1, 2, 7, 8), gen)
    errs["warp feature"] = fd_check(lambda t: flow_warp(t, flow), (h,))
    errs["warp flow"] = fd_check(lambda fl: flow_warp(h, fl), (flow,))

    tsa = MiniTSA(4, 3).double()
    with torch.no_grad():
        for p in tsa.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.3)
    errs["tsa_fuse"] = module_fd_check(tsa, lambda m, a, r: m(a, r),
                                       (rnd(1, 3, 4, 5, 5), rnd(1, 4, 5, 5)), n_probes=20)

    errs["loss"] = fd_check(charbonnier_loss, (rnd(2, 3, 4, 4), rnd(2, 3, 4, 4)))
    elapsed = time.process_time() - t0
    worst = max(errs, key=errs.get)
    ok = all(v < 1e-4 for v in errs.values()) and elapsed < 600
    assert report(2, ok, f"{len(errs)} checks x 20 probes, worst {worst} rel err "
                         f"{errs[worst]:.1e} (< 1e-4); {elapsed:.1f} s (< 10 min)")


# ------------------------------------------------------------- criterion 3

def test_criterion_3_oracle_equivalences():
    t0 = time.process_time()
    torch.manual_seed(3)
    x, w, b = torch.randn(2, 6, 11, 13), torch.randn(5, 6, 3, 3), torch.randn(5)
    dcn = (deform_conv2d(x, torch.zeros(2, 18, 11, 13), w, b)
           - F.conv2d(x, w, b, padding=1)).abs().max().item()
    feat = torch.randn(2, 8, 9, 10)
    warp_exact = torch.equal(flow_warp(feat, torch.zeros(2, 2, 9, 10)), feat)
    img = np.random.default_rng(3).random((20, 16))
    resize = max(np.abs(bicubic_resize(img, s) - brute_force_resize(img, s)).max()
                 for s in (0.25, 4))
    elapsed = time.process_time() - t0
    ok = dcn < 1e-5 and warp_exact and resize < 1e-6 and elapsed < 300
    assert report(3, ok, f"dcn vs conv {dcn:.1e} (< 1e-5), zero-flow warp bitwise "
                         f"{warp_exact}, bicubic vs brute force {resize:.1e} (< 1e-6); "
                         f"{elapsed:.1f} s (< 5 min)")


# ------------------------------------------------------------- criterion 4

def test_criterion_4_metric_oracles():
    t0 = time.process_time()
    x = np.random.default_rng(4).uniform(0.1, 0.8, (3, 32, 32))
    p = psnr(x + 16 / 255, x)
    s_same = ssim(x, x)
    mu1, mu2, c1 = 0.5 * 255, 0.6 * 255, (0.01 * 255) ** 2
    closed = (2 * mu1 * mu2 + c1) / (mu1 ** 2 + mu2 ** 2 + c1)
    s_const = ssim(np.full((3, 16, 16), 0.5), np.full((3, 16, 16), 0.6))
    white, black = rgb_to_y(np.ones(3)), rgb_to_y(np.zeros(3))
    elapsed = time.process_time() - t0
    ok = (abs(p - 24.0483) <= 1e-3 and s_same == 1.0 and abs(s_const - closed) <= 1e-4
          and white == 235 / 255 and black == 16 / 255 and elapsed < 60)
    assert report(4, ok, f"psnr {p:.4f} dB (24.0483 +- 1e-3), ssim(x,x) {s_same}, constant "
                         f"ssim {s_const:.5f} vs {closed:.5f}, Y white/black "
                         f"{white * 255:.0f}/{black * 255:.0f}; {elapsed:.2f} s (< 1 min)")


# ------------------------------------------------------------- criterion 5

@pytest.mark.slow
def test_criterion_5_desk_training_beats_bicubic(desk):
    parts, ok = [], True
    for kind in ("window", "recurrent"):
        runs = [desk.run(kind, seed=s) for s in SEEDS]
        bic, _ = desk.bicubic(kind)
        gain = float(np.mean([r["psnr"] for r in runs])) - bic
        ratios = [r["result"].final_probe_loss / r["result"].initial_probe_loss for r in runs]
        seconds = max(r["seconds"] for r in runs)
        kind_ok = gain >= 1.0 and max(ratios) < 0.5 and seconds < 1800
        ok &= kind_ok
        parts.append(f"{kind} +{gain:.2f} dB over bicubic {bic:.2f} (>= 1.0), loss ratio max "
                     f"{max(ratios):.2f} (< 0.5), {_fmt_minutes(seconds)}/model (< 30 min)")
    assert report(5, ok, "; ".join(parts))


# ------------------------------------------------------------- criterion 6

@pytest.mark.slow
def test_criterion_6_refinement_non_inferiority(desk):
    parts, ok, total = [], True, 0.0
    for kind in ("window", "recurrent"):
        branches = ("forward", "backward")
        base = statistics.median(desk.run(kind, seed=s)["psnr"] for s in SEEDS)
        runs = [desk.run(kind, branches, seed=s) for s in SEEDS]
        total += sum(r["seconds"] for r in runs)
        with_seem = statistics.median(r["psnr"] for r in runs)
        ok &= with_seem >= base - 0.05
        parts.append(f"{kind} +SEEM {with_seem:.3f} vs base {base:.3f} dB "
                     f"(delta {with_seem - base:+.3f}, >= -0.05)")
    ok &= total < 3600
    assert report(6, ok, "; ".join(parts) + f"; {_fmt_minutes(total)} (< 60 min)")


# ------------------------------------------------------------- criterion 7

@pytest.mark.slow
def test_criterion_7_efficient_tuning(desk):
    base = desk.run("recurrent")["result"].model
    cfg = desk.config("recurrent", ("forward", "backward"), freeze_base=True, iterations=500,
                      lr=None)
    model = build_model(cfg.model)
    apply_params(model, ParamSet.from_module(base), partial=True)
    freeze_base(model)
    before = frozen_checksum(model)
    t0 = time.process_time()
    res = train_loop(cfg, desk.train, model=model)
    rows = evaluate_model(res.model, desk.eval, use_masks=True)
    table = format_table(rows, "Recurrent+SEEM*", desk.run("recurrent")["rows"], "Recurrent")
    elapsed = time.process_time() - t0
    print(table)
    stable = len(res.frozen_checksums) == 500 and set(res.frozen_checksums) == {before}
    default = build_model(ModelConfig(kind="recurrent", seem=True))
    trainable, frozen = freeze_base(default)
    frac_default = trainable / (trainable + frozen)
    ok = (stable and res.trainable_fraction < 0.15 and frac_default < 0.15
          and "+Δ" in table and elapsed < 900)
    assert report(7, ok, f"frozen checksums stable over {len(res.frozen_checksums)} logged "
                         f"steps: {stable}; trainable fraction {res.trainable_fraction:.1%} "
                         f"desk / {frac_default:.1%} default (< 15%); delta row reported; "
                         f"{_fmt_minutes(elapsed)} (< 15 min)")


# ------------------------------------------------------------- criterion 8

@pytest.mark.slow
def test_criterion_8_branch_ablation(desk):
    trained = []

    def train_fn(cfg):
        branches = cfg.model.branches if cfg.model.seem else ()
        run = desk.run("recurrent", branches, seed=0)
        trained.append(run)
        return run["result"]

    rows = run_ablation(desk.train, desk.eval, desk.config("recurrent"), train_fn)
    table = format_ablation_table(rows)
    print(table)
    ratios = [r["final_loss"] / r["initial_loss"] for r in rows]
    seconds = sum(r["seconds"] for r in trained)
    ok = len(table.splitlines()) == 5 and max(ratios) < 0.5 and seconds < 2700
    assert report(8, ok, f"4-row table emitted, loss ratios "
                         f"{', '.join(f'{r:.2f}' for r in ratios)} (< 0.5); "
                         f"{_fmt_minutes(seconds)} of training (< 45 min)")


# ------------------------------------------------------------- criterion 9

def test_criterion_9_serialization_round_trips(tmp_path):
    t0 = time.process_time()
    rng = np.random.default_rng(9)
    masks_ok = ckpt_ok = 0
    for i in range(100):
        c_max = int(rng.integers(1, 9))
        h, w = (int(v) for v in rng.integers(1, 20, 2))
        stacks = []
        for _ in range(int(rng.integers(1, 5))):
            planes = list((rng.random((int(rng.integers(0, c_max + 3)), h, w))
                           < rng.random()).astype(np.uint8))
            stacks.append(normalize_masks(planes, c_max, extent=(h, w)) if planes
                          else MaskStack.empty(c_max, h, w))
        path = tmp_path / f"m{i}.mask"
        save_archive(stacks, path)
        back = load_archive(path)
        data = path.read_bytes()
        save_archive(back, path)
        masks_ok += back == stacks and path.read_bytes() == data

        ps = ParamSet()
        for j in range(int(rng.integers(1, 6))):
            shape = tuple(int(v) for v in rng.integers(1, 5, int(rng.integers(0, 4))))
            vals = rng.standard_normal(shape).astype(np.float32)
            vals.reshape(-1)[:1] = rng.choice([np.inf, -np.inf, np.nan, 0.0, -0.0])
            ps[f"layer{j}.{'w' * int(rng.integers(1, 30))}"] = vals
        path = tmp_path / f"c{i}.ckpt"
        save_checkpoint(ps, path)
        back = load_checkpoint(path)
        ckpt_ok += (list(back) == list(ps)
                    and all(back[k].shape == ps[k].shape
                            and back[k].tobytes() == ps[k].tobytes() for k in ps))
    elapsed = time.process_time() - t0
    ok = masks_ok == 100 and ckpt_ok == 100 and elapsed < 120
    assert report(9, ok, f"mask archives {masks_ok}/100, checkpoints {ckpt_ok}/100 bit-exact; "
                         f"{elapsed:.1f} s (< 2 min)")
