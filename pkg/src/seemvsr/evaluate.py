"""Inference over whole clips, PSNR/SSIM scoring and paper-style tables."""

from collections import OrderedDict
from dataclasses import replace

import numpy as np
import torch

from .data import lr_frames, to_uint8
from .degrade import bicubic_resize
from .metrics import EvalConfig, psnr, ssim
from .recurrent import RecurrentVSR
from .window import WindowVSR


def output_indices(model, t):
    if isinstance(model, WindowVSR):
        n = model.num_frames // 2
        return list(range(n, t - n))
    return list(range(t))


@torch.no_grad()
def infer_clip(model, lr, masks=None, flows=None, chunk=4):
    """Super-resolve one LR clip (T, 3, h, w).

    Window models emit one frame per full window position (centres
    ``N .. T-N-1``); recurrent models emit one frame per input.
    Returns ``(indices, frames)`` with frames (K, 3, 4h, 4w) clipped to [0, 1].
    """
    model.eval()
    lr_t = torch.as_tensor(np.asarray(lr), dtype=torch.float32)
    m_t = None if masks is None else torch.as_tensor(np.asarray(masks), dtype=torch.float32)
    idx = output_indices(model, lr_t.shape[0])
    if isinstance(model, WindowVSR):
        n = model.num_frames // 2
        outs = []
        for s in range(0, len(idx), chunk):
            centres = idx[s:s + chunk]
            x = torch.stack([lr_t[c - n:c + n + 1] for c in centres])
            m = None if m_t is None else torch.stack([m_t[c] for c in centres])
            outs.append(model(x, m) if m is not None else model(x, seem_enabled=False))
        out = torch.cat(outs) if outs else lr_t.new_zeros(0, 3, *[4 * d for d in lr_t.shape[-2:]])
    else:
        f = None
        if flows is not None:
            f = tuple(torch.as_tensor(np.asarray(a), dtype=torch.float32)[None] for a in flows)
        m = None if m_t is None else m_t[None]
        out = model(lr_t[None], m, seem_enabled=m is not None, flows=f)[0]
    return idx, out.clamp(0, 1).numpy()


def quantize(img):
    return to_uint8(img).astype(np.float32) / 255.0


def score_frames(clip_name, preds, targets, indices, config):
    rows = []
    for i, p, t in zip(indices, preds, targets):
        p = quantize(p)
        rows.append(OrderedDict(clip=clip_name, frame=int(i), psnr_db=psnr(p, t, config),
                                ssim=ssim(p, t, config), channel_mode=config.channel,
                                crop_border=config.crop_border))
    return rows


def evaluate_model(model, clips, config=EvalConfig(), use_masks=True):
    """``clips``: iterable of (name, hr_frames, lr_masks_or_None[, flows])."""
    rows = []
    for item in clips:
        name, hr, masks = item[:3]
        flows = item[3] if len(item) > 3 else None
        lr = lr_frames(hr)
        idx, preds = infer_clip(model, lr, masks if use_masks else None, flows)
        rows.extend(score_frames(name, preds, hr[idx], idx, config))
    return rows


def evaluate_bicubic(clips, config=EvalConfig(), frames=None):
    """Bicubic x4 upsampling of the BI-degraded frames. ``frames`` optionally
    maps clip length -> indices to score."""
    rows = []
    for item in clips:
        name, hr = item[:2]
        lr = lr_frames(hr)
        idx = list(range(len(hr))) if frames is None else frames(len(hr))
        up = np.clip(bicubic_resize(lr[idx].astype(np.float64), 4), 0, 1)
        rows.extend(score_frames(name, up, hr[idx], idx, config))
    return rows


def summarize(rows):
    """Per-clip means and the average over clips (mean of clip means)."""
    clips = OrderedDict()
    for r in rows:
        clips.setdefault(r["clip"], []).append(r)
    per_clip = OrderedDict(
        (name, (float(np.mean([r["psnr_db"] for r in rs])),
                float(np.mean([r["ssim"] for r in rs]))))
        for name, rs in clips.items())
    avg = (float(np.mean([v[0] for v in per_clip.values()])),
           float(np.mean([v[1] for v in per_clip.values()])))
    return per_clip, avg


def format_table(rows, label="Model", baseline_rows=None, baseline_label="Baseline"):
    """Text table: one column pair per clip plus the average. With a baseline
    it prints the baseline row, the model row and a signed delta row."""
    per_clip, avg = summarize(rows)
    names = list(per_clip)
    header = ["Method"] + [f"{n} PSNR | SSIM" for n in names] + ["Average PSNR | SSIM"]
    out = [" | ".join(header)]

    def line(lbl, pc, a):
        cells = [f"{pc[n][0]:.4f} | {pc[n][1]:.5f}" for n in names]
        return " | ".join([lbl] + cells + [f"{a[0]:.4f} | {a[1]:.5f}"])

    if baseline_rows is not None:
        bpc, bavg = summarize(baseline_rows)
        out.append(line(baseline_label, bpc, bavg))
        out.append(line(label, per_clip, avg))
        cells = [f"{per_clip[n][0] - bpc[n][0]:+.4f} | {per_clip[n][1] - bpc[n][1]:+.5f}"
                 for n in names]
        out.append(" | ".join(["+Δ"] + cells
                              + [f"{avg[0] - bavg[0]:+.4f} | {avg[1] - bavg[1]:+.5f}"]))
    else:
        out.append(line(label, per_clip, avg))
    return "\n".join(out)


def delta_rows(rows, baseline_rows):
    """Per-clip and average (PSNR, SSIM) differences, model minus baseline."""
    pc, avg = summarize(rows)
    bpc, bavg = summarize(baseline_rows)
    deltas = OrderedDict((n, (pc[n][0] - bpc[n][0], pc[n][1] - bpc[n][1])) for n in pc)
    deltas["Average"] = (avg[0] - bavg[0], avg[1] - bavg[1])
    return deltas


# --------------------------------------------------------------- ablation

ABLATION_GRID = ((), ("forward",), ("backward",), ("forward", "backward"))


def run_ablation(train_clips, eval_clips, base_cfg, train_fn, grid=ABLATION_GRID,
                 config=EvalConfig()):
    """Train one recurrent model per branch subset and score it.

    ``train_fn(cfg) -> TrainResult``; the empty subset is the plain model.
    """
    rows = []
    for branches in grid:
        mcfg = replace(base_cfg.model, kind="recurrent", seem=bool(branches),
                       branches=branches or ("forward", "backward"))
        cfg = replace(base_cfg, model=mcfg)
        res = train_fn(cfg)
        _, avg = summarize(evaluate_model(res.model, eval_clips, config,
                                          use_masks=bool(branches)))
        rows.append(dict(forward="forward" in branches, backward="backward" in branches,
                         psnr=avg[0], ssim=avg[1], initial_loss=res.initial_probe_loss,
                         final_loss=res.final_probe_loss))
    return rows


def format_ablation_table(rows, label="Recurrent"):
    out = [f"{'Method':<12} | Forward | Backward | PSNR    | SSIM    | loss ratio"]
    for r in rows:
        out.append(f"{label:<12} | {'✓' if r['forward'] else ' ':^7} | "
                   f"{'✓' if r['backward'] else ' ':^8} | {r['psnr']:.4f} | {r['ssim']:.5f} | "
                   f"{r['final_loss'] / r['initial_loss']:.3f}")
    return "\n".join(out)
