"""Command-line entry point.

    seemvsr synth  --out <root> --clips 4
    seemvsr masks gen --provider synthetic --grid 8 --cmax 64 --dataset <root>
    seemvsr train --model window --seem off --data <root> --out base.ckpt
    seemvsr train --model window --seem on --freeze-base --init-from base.ckpt ...
    seemvsr eval  --ckpt tuned.ckpt --baseline base.ckpt --data <root> --channel rgb
    seemvsr infer --ckpt tuned.ckpt --in <clip dir> --out <dir>
    seemvsr ablate --data <root> --eval-data <root2>

Exit codes: 0 success, 2 usage, 3 data, 4 numeric failure.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BRANCH_SPECS = {"f": ("forward",), "b": ("backward",), "fb": ("forward", "backward")}

log = logging.getLogger("seemvsr")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _default_seed():
    try:
        return int(os.environ.get("SEEMVSR_SEED", "0"))
    except ValueError:
        return 0


def _dataset(path):
    from .data import ClipDataset, DatasetError
    try:
        return ClipDataset(path)
    except DatasetError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc


# ------------------------------------------------------------------ synth

def cmd_synth(args):
    from .data import write_synth_dataset
    ds = write_synth_dataset(args.out, range(args.first_seed, args.first_seed + args.clips),
                             t=args.frames, extent=(args.size, args.size),
                             n_objects=args.objects, supersample=args.supersample)
    print(f"wrote {len(ds)} clips to {args.out}")


# ------------------------------------------------------------------ masks

def _provider_for(args, clip, lr):
    from .masks import FileMaskProvider, ServiceMaskProvider, SyntheticMaskProvider, synth_scene
    if args.provider == "synthetic":
        params = clip.scene_params()
        if params is None:
            raise CommandError(f"{clip.name}: no scene.json; the synthetic provider only "
                               "works on generated datasets", EXIT_DATA)
        # supports are taken at pixel centres whatever the frame sampling
        _, gt = synth_scene(params["seed"], params["t"], tuple(params["extent"]),
                            params["n_objects"], params["max_speed"], supersample=1)
        return SyntheticMaskProvider(gt)
    if args.provider == "file":
        if not args.source:
            raise CommandError("--source <archive dir> is required for the file provider",
                               EXIT_USAGE)
        return FileMaskProvider(Path(args.source) / f"{clip.name}.mask")
    if not args.url:
        raise CommandError("--url is required for the service provider", EXIT_USAGE)
    return ServiceMaskProvider(args.url, timeout=args.timeout)


def cmd_masks(args):
    from .data import lr_frames, write_clip_masks
    from .masks import GridPromptSpec, MaskError, fetch_clip_stacks, save_archive
    ds = _dataset(args.dataset)
    for clip in ds:
        lr = lr_frames(clip.load_frames())
        spec = GridPromptSpec(args.grid, *lr.shape[-2:])
        provider = _provider_for(args, clip, lr)
        try:
            stacks = fetch_clip_stacks(provider, lr, spec, args.cmax, args.iou,
                                       workers=args.workers)
        except MaskError as exc:
            raise CommandError(f"{clip.name}: {exc}", EXIT_DATA) from exc
        write_clip_masks(clip.path, stacks, spec)
        counts = " ".join(str(s.valid_count) for s in stacks)
        print(f"{clip.name}: valid_count per frame [{counts}]")


# ------------------------------------------------------------------ train

def load_training_clips(ds, need_masks):
    from .training import TrainClip
    clips = []
    for clip in ds:
        masks = None
        if need_masks:
            if not clip.has_masks():
                raise CommandError(f"{clip.name}: masks missing; run `seemvsr masks gen` "
                                   "first", EXIT_DATA)
            masks = clip.load_masks()
        clips.append(TrainClip(clip.load_frames(), masks))
    return clips


def cmd_train(args):
    from .recurrent import BRANCHES
    from .seem import ConfigError
    from .training import (CheckpointError, DivergenceError, ModelConfig, TrainConfig,
                           save_checkpoint, train_loop)
    ds = _dataset(args.data)
    seem = args.seem == "on"
    if args.freeze_base and not seem:
        raise CommandError("--freeze-base needs --seem on", EXIT_USAGE)
    if args.branches and args.model != "recurrent":
        raise CommandError("--branches applies to the recurrent model only", EXIT_USAGE)
    branches = BRANCH_SPECS[args.branches] if args.branches else BRANCHES
    frames = args.frames or (5 if args.model == "window" else 3)
    mcfg = ModelConfig(kind=args.model, mid_channels=args.width, up_channels=args.up_width,
                       num_frames=frames, recon_blocks=args.recon_blocks, seem=seem,
                       branches=branches, c_max=args.cmax, reduction=args.reduction,
                       flow=args.flow)
    cfg = TrainConfig(model=mcfg, iterations=args.iters, batch_size=args.batch,
                      patch_size=args.patch, lr=args.lr, seed=args.seed,
                      freeze_base=args.freeze_base, checkpoint_every=args.checkpoint_every,
                      checkpoint_dir=args.checkpoint_dir)
    clips = load_training_clips(ds, seem)
    try:
        res = train_loop(cfg, clips, init_from=args.init_from, log_path=args.log)
    except DivergenceError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from exc
    except (CheckpointError, ConfigError) as exc:
        raise CommandError(str(exc), EXIT_USAGE) from exc
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    save_checkpoint(res.model, args.out, mcfg)
    print(f"trained {args.iters} iterations; probe loss {res.initial_probe_loss:.5f} -> "
          f"{res.final_probe_loss:.5f}; trainable {res.trainable_params}/{res.total_params}")
    print(f"checkpoint: {args.out}")


# ------------------------------------------------------------------- eval

def _eval_clips(ds, need_masks, flows=False):
    out = []
    for clip in ds:
        masks = None
        if need_masks:
            if not clip.has_masks():
                raise CommandError(f"{clip.name}: checkpoint uses refinement but masks are "
                                   "missing; run `seemvsr masks gen --dataset "
                                   f"{clip.path.parent}` first", EXIT_DATA)
            masks = clip.load_masks()
        item = (clip.name, clip.load_frames(), masks)
        if flows:
            f = clip.load_flows()
            if f is None:
                raise CommandError(f"{clip.name}: precomputed flows missing", EXIT_DATA)
            item = item + (f,)
        out.append(item)
    return out


def _load(path):
    from .training import CheckpointError, load_model
    try:
        return load_model(path)
    except (CheckpointError, OSError) as exc:
        raise CommandError(f"cannot load {path}: {exc}", EXIT_DATA) from exc


def _score(path, ds, config, frames_from=None):
    from .evaluate import evaluate_bicubic, evaluate_model, output_indices
    if path is None:
        return evaluate_bicubic(_eval_clips(ds, False), config, frames_from), "Bicubic", None
    model, mcfg = _load(path)
    clips = _eval_clips(ds, mcfg.seem, mcfg.kind == "recurrent" and mcfg.flow == "precomputed")
    rows = evaluate_model(model, clips, config, use_masks=mcfg.seem)
    return rows, Path(path).stem, (lambda t: output_indices(model, t))


def cmd_eval(args):
    from .evaluate import format_table
    from .metrics import EvalConfig, write_metrics_csv
    ds = _dataset(args.data)
    config = EvalConfig(args.channel, args.crop)
    rows, label, frames_from = _score(args.ckpt, ds, config)
    base_rows = None
    if args.baseline is not None:
        base_rows, base_label, _ = _score(None if args.baseline == "bicubic" else args.baseline,
                                          ds, config, frames_from)
    if args.csv:
        write_metrics_csv(args.csv, rows)
    if base_rows is not None:
        print(format_table(rows, label, base_rows, base_label))
    else:
        print(format_table(rows, label))


# ------------------------------------------------------------------ infer

def cmd_infer(args):
    from .data import Clip, FRAME_RE, lr_frames, write_png
    from .evaluate import infer_clip
    src = Path(args.input)
    frames = sorted(f for f in src.iterdir() if FRAME_RE.search(f.name)) if src.is_dir() else []
    if not frames:
        raise CommandError(f"{src}: no frame_%08d.png files", EXIT_DATA)
    clip = Clip(src.name, src, frames)
    model, mcfg = _load(args.ckpt)
    masks = flows = None
    if mcfg.seem:
        if not clip.has_masks():
            raise CommandError(f"{clip.name}: checkpoint uses refinement but masks are "
                               f"missing; run `seemvsr masks gen` on its dataset "
                               "or pass a checkpoint trained with --seem off", EXIT_DATA)
        masks = clip.load_masks()
    if mcfg.kind == "recurrent" and mcfg.flow == "precomputed":
        flows = clip.load_flows()
    if args.lr_input:
        lr = clip.load_frames()
    else:
        lr = lr_frames(clip.load_frames())
    idx, out = infer_clip(model, lr, masks, flows)
    dst = Path(args.out)
    dst.mkdir(parents=True, exist_ok=True)
    for i, img in zip(idx, out):
        write_png(dst / f"frame_{i:08d}.png", img)
    print(f"wrote {len(idx)} frames to {dst}")


# ----------------------------------------------------------------- ablate

def cmd_ablate(args):
    from .evaluate import format_ablation_table, run_ablation
    from .metrics import EvalConfig
    from .training import DivergenceError, ModelConfig, TrainConfig, train_loop
    train_ds = _dataset(args.data)
    eval_ds = _dataset(args.eval_data or args.data)
    clips = load_training_clips(train_ds, True)
    eval_clips = _eval_clips(eval_ds, True)
    mcfg = ModelConfig(kind="recurrent", mid_channels=args.width, up_channels=args.up_width,
                       num_frames=args.frames, reduction=args.reduction, c_max=args.cmax,
                       flow=args.flow)
    base = TrainConfig(model=mcfg, iterations=args.iters, batch_size=args.batch, lr=args.lr,
                       patch_size=args.patch, seed=args.seed)
    try:
        rows = run_ablation(clips, eval_clips, base, lambda c: train_loop(c, clips),
                            config=EvalConfig(args.channel, 0))
    except DivergenceError as exc:
        raise CommandError(str(exc), EXIT_NUMERIC) from exc
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_DATA) from exc
    print(format_ablation_table(rows))


# ----------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="seemvsr", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=4)
    s.add_argument("--first-seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=7)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--objects", type=int, default=4)
    s.add_argument("--supersample", type=int, default=4,
                   help="point samples per pixel side (1 = aliased pixel-centre sampling)")
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("masks", help="mask prior tools")
    msub = m.add_subparsers(dest="action", required=True)
    g = msub.add_parser("gen", help="generate per-frame mask archives")
    g.add_argument("--provider", choices=["synthetic", "file", "service"], default="synthetic")
    g.add_argument("--grid", type=int, default=8)
    g.add_argument("--cmax", type=int, default=64)
    g.add_argument("--iou", type=float, default=0.9)
    g.add_argument("--dataset", required=True)
    g.add_argument("--source", help="directory of <clip>.mask archives (file provider)")
    g.add_argument("--url", help="segmentation endpoint (service provider)")
    g.add_argument("--timeout", type=float, default=30.0)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_masks)

    def arch(parser):
        parser.add_argument("--width", type=int, default=64)
        parser.add_argument("--up-width", type=int, default=64)
        parser.add_argument("--reduction", type=int, default=16)
        parser.add_argument("--cmax", type=int, default=64)
        parser.add_argument("--batch", type=int)
        parser.add_argument("--lr", type=float)
        parser.add_argument("--seed", type=int, default=_default_seed())
        parser.add_argument("--iters", type=int, default=2000)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=["window", "recurrent"], required=True)
    t.add_argument("--seem", choices=["on", "off"], default="off")
    t.add_argument("--branches", choices=sorted(BRANCH_SPECS))
    t.add_argument("--freeze-base", action="store_true")
    t.add_argument("--init-from")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss log CSV (iter,loss,lr)")
    t.add_argument("--frames", type=int, help="window length / training sequence length")
    t.add_argument("--patch", type=int, default=64)
    t.add_argument("--recon-blocks", type=int, default=5)
    t.add_argument("--flow", choices=["tiny", "zero", "precomputed"], default="tiny")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--checkpoint-dir")
    arch(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint (or bicubic) on a dataset")
    e.add_argument("--ckpt", help="checkpoint; omit to score bicubic upsampling")
    e.add_argument("--baseline", help="checkpoint or 'bicubic' to compare against")
    e.add_argument("--data", required=True)
    e.add_argument("--channel", choices=["rgb", "y"], default="rgb")
    e.add_argument("--crop", type=int, default=0)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write super-resolved PNG frames")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--lr-input", action="store_true",
                   help="frames are already low resolution (skip BI degradation)")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="branch ablation of the recurrent model")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--channel", choices=["rgb", "y"], default="y")
    a.add_argument("--frames", type=int, default=3)
    a.add_argument("--patch", type=int, default=64)
    a.add_argument("--flow", choices=["tiny", "zero"], default="tiny")
    arch(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for attr in ("data", "dataset"):
        path = getattr(args, attr, None)
        if path is not None and not Path(path).is_dir():
            parser.print_usage(sys.stderr)
            print(f"seemvsr: error: dataset path {path} does not exist", file=sys.stderr)
            return EXIT_USAGE
    try:
        args.func(args)
    except CommandError as exc:
        print(f"seemvsr: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
