"""Folder datasets: ``<root>/<clip>/frame_%08d.png`` with optional
``masks/frame_%08d.mask`` archives and ``flow/`` records."""

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import bicubic_resize
from .masks import GridPromptSpec, load_archive, normalize_masks, save_archive, synth_scene
from .recurrent import read_flo2

FRAME_RE = re.compile(r"frame_(\d{8})\.png$")


class DatasetError(Exception):
    pass


def read_png(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img):
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(path, format="PNG")


@dataclass
class Clip:
    name: str
    path: Path
    frame_paths: list

    def __len__(self):
        return len(self.frame_paths)

    def load_frames(self):
        frames = np.stack([read_png(p) for p in self.frame_paths])
        h, w = frames.shape[-2:]
        return frames[..., : h - h % 4, : w - w % 4]

    def mask_path(self, i):
        return self.path / "masks" / f"frame_{i:08d}.mask"

    def has_masks(self):
        return all(self.mask_path(i).exists() for i in range(len(self)))

    def load_masks(self):
        """(T, c_max, h, w) uint8 planes at LR resolution."""
        stacks = []
        for i in range(len(self)):
            p = self.mask_path(i)
            if not p.exists():
                raise DatasetError(f"{self.name}: missing mask archive {p.name}")
            stacks.extend(load_archive(p))
        return np.stack([s.masks for s in stacks])

    def load_flows(self):
        """(forward, backward) arrays of shape (T-1, 2, h, w), or None."""
        d = self.path / "flow"
        if not d.is_dir():
            return None
        t = len(self)
        fwd = [read_flo2(d / f"forward_{i:08d}.flo") for i in range(1, t)]
        bwd = [read_flo2(d / f"backward_{i:08d}.flo") for i in range(t - 1)]
        return np.stack(fwd), np.stack(bwd)

    def scene_params(self):
        p = self.path / "scene.json"
        return json.loads(p.read_text()) if p.exists() else None


class ClipDataset:
    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise DatasetError(f"dataset root {self.root} does not exist")
        self.clips = []
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            frames = sorted(f for f in d.iterdir() if FRAME_RE.search(f.name))
            if not frames:
                continue
            idx = [int(FRAME_RE.search(f.name).group(1)) for f in frames]
            if idx != list(range(len(idx))):
                raise DatasetError(f"{d.name}: frame indices are not dense from 0")
            self.clips.append(Clip(d.name, d, frames))
        if not self.clips:
            raise DatasetError(f"no clips found under {self.root}")

    def __iter__(self):
        return iter(self.clips)

    def __len__(self):
        return len(self.clips)


def lr_frames(hr_frames, scale=4):
    return bicubic_resize(np.asarray(hr_frames, dtype=np.float64), 1 / scale).astype(np.float32)


def oracle_lr_masks(gt_masks, scale=4, c_max=64, iou_threshold=0.9):
    """Ground-truth HR supports -> normalised LR mask stacks, one per frame."""
    from .masks import nearest_resize
    t, _, h, w = gt_masks.shape
    lr = nearest_resize(gt_masks, h // scale, w // scale)
    return [normalize_masks(list(lr[i]), c_max, iou_threshold, extent=lr.shape[-2:])
            for i in range(t)]


def write_synth_dataset(root, seeds, t=7, extent=(128, 128), n_objects=4, max_speed=2.0,
                        write_masks=False, c_max=64, supersample=4):
    """Render one synthetic clip per seed under ``root/clip_<seed>``."""
    root = Path(root)
    for seed in seeds:
        d = root / f"clip_{seed:03d}"
        d.mkdir(parents=True, exist_ok=True)
        frames, gt = synth_scene(seed, t, extent, n_objects, max_speed, supersample)
        for i, f in enumerate(frames):
            write_png(d / f"frame_{i:08d}.png", f)
        (d / "scene.json").write_text(json.dumps(dict(
            seed=seed, t=t, extent=list(extent), n_objects=n_objects, max_speed=max_speed,
            supersample=supersample)))
        if write_masks:
            write_clip_masks(d, oracle_lr_masks(gt, c_max=c_max), GridPromptSpec())
    return ClipDataset(root)


def write_clip_masks(clip_dir, stacks, spec):
    d = Path(clip_dir) / "masks"
    d.mkdir(exist_ok=True)
    for i, st in enumerate(stacks):
        save_archive([st], d / f"frame_{i:08d}.mask")
    (d / "prompt.json").write_text(json.dumps({"grid": spec.grid_size,
                                               "c_max": stacks[0].c_max}))


def synthetic_clips(seeds, t=7, extent=(128, 128), n_objects=4, max_speed=2.0, c_max=64,
                    scale=4, supersample=4):
    """In-memory (HR frames, LR mask planes) pairs for synthetic scenes."""
    out = []
    for seed in seeds:
        frames, gt = synth_scene(seed, t, extent, n_objects, max_speed, supersample)
        masks = np.stack([s.masks for s in oracle_lr_masks(gt, scale, c_max)])
        out.append((frames, masks))
    return out
