"""Patch sampling, Charbonnier loss, the optimisation loop, efficient tuning
and the ``SEEMCKPT`` checkpoint container."""

import copy
import csv
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch

from .degrade import bicubic_resize
from .masks import nearest_resize, normalize_masks
from .ops import NumericError
from .recurrent import BRANCHES, RecurrentVSR, train_flow_estimator
from .seem import ConfigError
from .window import WindowVSR

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"SEEMCKPT"
CKPT_VERSION = 1
TUNABLE_PREFIXES = ("seem.", "frnet.")


class CheckpointError(Exception):
    pass


class ShapeError(CheckpointError, ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, iteration, last_good_iteration, last_good_path=None):
        super().__init__(f"non-finite loss at iteration {iteration}; last good state "
                         f"from iteration {last_good_iteration}"
                         + (f" saved at {last_good_path}" if last_good_path else ""))
        self.iteration = iteration
        self.last_good_iteration = last_good_iteration
        self.last_good_path = last_good_path


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "window"
    mid_channels: int = 64
    up_channels: int = 64
    num_frames: int = 5
    extract_blocks: int = 3
    recon_blocks: int = 5
    num_blocks: int = 5
    seem: bool = False
    branches: Tuple[str, ...] = BRANCHES
    c_max: int = 64
    reduction: int = 16
    flow: str = "tiny"
    zero_init_head: bool = False

    def __post_init__(self):
        if self.kind not in ("window", "recurrent"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "branches", tuple(self.branches))

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_model(cfg):
    if cfg.kind == "window":
        return WindowVSR(cfg.num_frames, cfg.mid_channels, cfg.extract_blocks,
                         cfg.recon_blocks, cfg.up_channels, cfg.seem, cfg.c_max,
                         cfg.reduction, cfg.zero_init_head)
    return RecurrentVSR(cfg.mid_channels, cfg.num_blocks, cfg.up_channels, cfg.seem,
                        cfg.branches, cfg.c_max, cfg.reduction, cfg.flow,
                        cfg.zero_init_head)


@dataclass(frozen=True)
class TrainConfig:
    """Training run. ``batch_size`` and ``lr`` default per model kind and
    tuning regime when left as ``None``."""

    model: ModelConfig = field(default_factory=ModelConfig)
    iterations: int = 2000
    batch_size: Optional[int] = None
    patch_size: int = 64
    scale: int = 4
    lr: Optional[float] = None
    min_lr_ratio: float = 1e-3
    seed: int = 0
    freeze_base: bool = False
    augment: bool = True
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    log_every: int = 1
    probe_patches: int = 8
    flow_pretrain_steps: int = 300

    def __post_init__(self):
        if self.patch_size % self.scale:
            raise ConfigError(f"patch size {self.patch_size} not divisible by scale {self.scale}")
        if self.scale != 4:
            raise ConfigError("only x4 models are supported")

    @property
    def effective_batch_size(self):
        if self.batch_size is not None:
            return self.batch_size
        return 4 if self.model.kind == "window" else 6

    @property
    def effective_lr(self):
        if self.lr is not None:
            return self.lr
        return 5e-4 if self.freeze_base else 1e-4


# ------------------------------------------------------------------- data

@dataclass
class TrainClip:
    """One training clip: HR frames (T, 3, H, W) in [0, 1] and the matching
    LR-resolution mask planes (T, c_max, H/s, W/s) or ``None``."""

    frames: np.ndarray
    masks: Optional[np.ndarray] = None


def _augment(arr, flip, rot):
    if flip:
        arr = arr[..., ::-1]
    if rot:
        arr = np.rot90(arr, rot, axes=(-2, -1))
    return np.ascontiguousarray(arr)


def sample_patch(hr_frames, masks, patch_size, scale, rng, augment=True, c_max=None):
    """Random aligned crop of a frame stack.

    Args:
        hr_frames: (T, 3, H, W) HR frames.
        masks: (T, C, H/scale, W/scale) LR mask planes, (T, C, H, W) HR
            planes (reduced by nearest neighbour) or ``None``.
        patch_size: LR patch side; the HR crop is ``patch_size * scale``.
        rng: ``numpy.random.Generator``.

    Returns:
        ``(lr, hr, mask_patch)`` with shapes (T, 3, p, p), (T, 3, sp, sp) and
        (T, C, p, p) (``None`` without masks). LR comes from bicubic
        downsampling of the HR crop.
    """
    hr_frames = np.asarray(hr_frames)
    t, _, h, w = hr_frames.shape
    hp = patch_size * scale
    if h < hp or w < hp:
        raise ValueError(f"clip of {h}x{w} too small for a {hp}x{hp} HR crop")
    y = int(rng.integers(0, (h - hp) // scale + 1)) * scale
    x = int(rng.integers(0, (w - hp) // scale + 1)) * scale
    hr = hr_frames[:, :, y:y + hp, x:x + hp]
    mp = None
    if masks is not None:
        masks = np.asarray(masks)
        if masks.shape[-2:] == (h, w):
            mp = nearest_resize(masks[..., y:y + hp, x:x + hp], patch_size, patch_size)
        elif masks.shape[-2:] == (h // scale, w // scale):
            ly, lx = y // scale, x // scale
            mp = masks[..., ly:ly + patch_size, lx:lx + patch_size]
        else:
            raise ValueError(f"mask extent {masks.shape[-2:]} matches neither HR nor LR")
    if augment:
        flip = bool(rng.random() < 0.5)
        rot = int(rng.integers(0, 4))
        hr = _augment(hr, flip, rot)
        if mp is not None:
            mp = _augment(mp, flip, rot)
    lr = bicubic_resize(hr.astype(np.float64), 1 / scale).astype(np.float32)
    hr = np.ascontiguousarray(hr, dtype=np.float32)
    if mp is not None:
        c = c_max or mp.shape[1]
        mp = np.stack([normalize_masks(list(m), c, extent=m.shape[-2:]).masks for m in mp])
    return lr, hr, mp


def _draw_sample(clips, cfg, rng):
    mcfg = cfg.model
    clip = clips[int(rng.integers(0, len(clips)))]
    t = clip.frames.shape[0]
    n = mcfg.num_frames
    if t < n:
        raise ValueError(f"clip of {t} frames shorter than {n}")
    start = int(rng.integers(0, t - n + 1))
    masks = None
    if mcfg.seem:
        if clip.masks is None:
            raise ConfigError("refinement enabled but the clip carries no masks")
        masks = clip.masks[start:start + n]
    lr, hr, mp = sample_patch(clip.frames[start:start + n], masks, cfg.patch_size, cfg.scale,
                              rng, cfg.augment, mcfg.c_max)
    if mcfg.kind == "window":
        c = n // 2
        return lr, hr[c], None if mp is None else mp[c]
    return lr, hr, mp


def make_batch(clips, cfg, rng, size):
    samples = [_draw_sample(clips, cfg, rng) for _ in range(size)]
    lr = torch.from_numpy(np.stack([s[0] for s in samples]))
    hr = torch.from_numpy(np.stack([s[1] for s in samples]))
    masks = None
    if samples[0][2] is not None:
        masks = torch.from_numpy(np.stack([s[2] for s in samples]).astype(np.float32))
    return lr, hr, masks


def charbonnier_loss(pred, target, eps=1e-3):
    """Mean of ``sqrt((pred - target)^2 + eps^2)``."""
    return torch.sqrt((pred - target) ** 2 + eps * eps).mean()


# --------------------------------------------------------------- params

class ParamSet(OrderedDict):
    """Ordered ``name -> float32 array`` with a trainable flag per name."""

    def __init__(self, *args, trainable=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.trainable = dict(trainable or {})

    @classmethod
    def from_module(cls, module):
        ps = cls()
        for name, p in module.named_parameters():
            ps[name] = p.detach().cpu().numpy().astype(np.float32).copy()
            ps.trainable[name] = p.requires_grad
        return ps

    def checksum(self, names=None):
        h = hashlib.sha256()
        for name in (self.keys() if names is None else names):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def sizes(self):
        trainable = sum(v.size for k, v in self.items() if self.trainable.get(k, True))
        total = sum(v.size for v in self.values())
        return trainable, total - trainable


def is_tunable(name):
    return name.startswith(TUNABLE_PREFIXES)


def freeze_base(model):
    """Leave only ``seem.*`` / ``frnet.*`` trainable.

    Returns ``(trainable_count, frozen_count)`` in scalar parameters.
    """
    trainable = frozen = 0
    for name, p in model.named_parameters():
        keep = is_tunable(name)
        p.requires_grad_(keep)
        if keep:
            trainable += p.numel()
        else:
            frozen += p.numel()
    if trainable == 0:
        raise ConfigError("model has no refinement parameters to tune")
    return trainable, frozen


def frozen_checksum(model):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(params, path, model_config=None):
    """Write a ``SEEMCKPT`` container (module or ParamSet) and, when given,
    the model config as ``<path>.json``."""
    if isinstance(params, torch.nn.Module):
        params = ParamSet.from_module(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            value = np.asarray(value, dtype="<f4")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value).tobytes())
    if model_config is not None:
        Path(str(path) + ".json").write_text(model_config.to_json())


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    version, count = struct.unpack_from("<HI", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 14
    ps = ParamSet()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 4 * size > len(data):
                raise CheckpointError(f"{path}: truncated entry {name!r} at byte {off}")
            ps[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).copy()
            ps.trainable[name] = True
            off += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated at byte {off}") from exc
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return ps


def load_model_config(path):
    side = Path(str(path) + ".json")
    if not side.exists():
        raise CheckpointError(f"{path}: missing model config sidecar {side.name}")
    return ModelConfig.from_dict(json.loads(side.read_text()))


def apply_params(model, params, partial=False):
    """Copy checkpoint values into ``model``.

    With ``partial=True`` refinement parameters (``seem.*`` / ``frnet.*``)
    absent from the checkpoint keep their fresh initialisation; every other
    model parameter must be present. Returns the names left untouched.
    """
    own = dict(model.named_parameters())
    for name, value in params.items():
        if name not in own:
            raise ShapeError(f"checkpoint entry {name!r} has no counterpart in the model")
        if tuple(own[name].shape) != tuple(value.shape):
            raise ShapeError(f"entry {name!r}: checkpoint shape {tuple(value.shape)} "
                             f"!= model shape {tuple(own[name].shape)}")
    missing = [n for n in own if n not in params]
    if missing and not partial:
        raise ShapeError(f"checkpoint lacks model entry {missing[0]!r}")
    base_missing = [n for n in missing if not is_tunable(n)]
    if base_missing:
        raise ShapeError(f"checkpoint lacks base entry {base_missing[0]!r}")
    with torch.no_grad():
        for name, value in params.items():
            own[name].copy_(torch.from_numpy(np.asarray(value)))
    return missing


def load_model(path, **overrides):
    cfg = load_model_config(path)
    if overrides:
        cfg = replace(cfg, **overrides)
    model = build_model(cfg)
    apply_params(model, load_checkpoint(path))
    return model, cfg


# ------------------------------------------------------------------ loop

@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list
    lrs: list
    initial_probe_loss: float
    final_probe_loss: float
    frozen_checksums: list = field(default_factory=list)
    trainable_params: int = 0
    total_params: int = 0

    @property
    def trainable_fraction(self):
        return self.trainable_params / self.total_params if self.total_params else 0.0


def write_loss_log(path, losses, lrs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(loss), repr(lr)])


def _forward(model, lr, masks):
    return model(lr, masks) if masks is not None else model(lr)


def probe_loss(model, probe):
    lr, hr, masks = probe
    with torch.no_grad():
        losses = [float(charbonnier_loss(_forward(model, lr[i:i + 1],
                                                  None if masks is None else masks[i:i + 1]),
                                         hr[i:i + 1]))
                  for i in range(lr.shape[0])]
    return float(np.mean(losses))


def pretrain_flow(model, clips, steps, seed=0):
    """Toy-train the tiny flow estimator on LR views of the training frames,
    then freeze it."""
    frames = []
    for clip in clips:
        frames.extend(bicubic_resize(clip.frames.astype(np.float64), 0.25).astype(np.float32))
    curve = train_flow_estimator(model.flow, np.stack(frames), steps=steps, seed=seed)
    for p in model.flow.parameters():
        p.requires_grad_(False)
    return curve


def train_loop(cfg, clips, model=None, init_from=None, log_path=None):
    """Train on ``clips`` (list of :class:`TrainClip`).

    Deterministic for a given (cfg, clips) on one platform. Adam with a
    cosine-decayed step size; loss is Charbonnier. The probe losses are the
    mean loss on a fixed set of patches before the first and after the last
    step.
    """
    torch.manual_seed(cfg.seed)
    if model is None:
        model = build_model(cfg.model)
    if init_from is not None:
        apply_params(model, load_checkpoint(init_from), partial=True)
    if (isinstance(model, RecurrentVSR) and model.flow_kind == "tiny"
            and init_from is None and not cfg.freeze_base and cfg.flow_pretrain_steps > 0):
        pretrain_flow(model, clips, cfg.flow_pretrain_steps, seed=cfg.seed)
    elif isinstance(model, RecurrentVSR):
        for p in model.flow.parameters():
            p.requires_grad_(False)

    if cfg.freeze_base:
        freeze_base(model)
    params = [p for p in model.parameters() if p.requires_grad]
    trainable = sum(p.numel() for p in params)
    total = sum(p.numel() for p in model.parameters())

    probe_rng = np.random.default_rng([cfg.seed, 7919])
    probe = make_batch(clips, cfg, probe_rng, cfg.probe_patches)
    initial_probe = probe_loss(model, probe)

    rng = np.random.default_rng(cfg.seed)
    losses, lrs, checksums = [], [], []
    if cfg.iterations == 0:
        return TrainResult(model, losses, lrs, initial_probe, initial_probe, checksums,
                           trainable, total)
    if not params:
        raise ConfigError("no trainable parameters")

    base_lr = cfg.effective_lr
    opt = torch.optim.Adam(params, lr=base_lr, betas=(0.9, 0.99))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.iterations, eta_min=base_lr * cfg.min_lr_ratio)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    last_good = (0, copy.deepcopy(model.state_dict()), None)

    model.train()
    for it in range(cfg.iterations):
        lr_t, hr_t, masks = make_batch(clips, cfg, rng, cfg.effective_batch_size)
        try:
            loss = charbonnier_loss(_forward(model, lr_t, masks), hr_t)
        except NumericError:
            loss = torch.tensor(math.nan)
        if not math.isfinite(loss.item()):
            model.load_state_dict(last_good[1])
            raise DivergenceError(it, last_good[0], last_good[2])
        opt.zero_grad()
        loss.backward()
        lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
        losses.append(loss.item())
        if cfg.log_every and it % cfg.log_every == 0:
            logger.debug("iter %d loss %.6f lr %.3g", it, losses[-1], lrs[-1])
            if cfg.freeze_base:
                checksums.append(frozen_checksum(model))
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            path = None
            if ckpt_dir:
                path = ckpt_dir / f"iter_{it + 1:06d}.ckpt"
                save_checkpoint(model, path, cfg.model)
            last_good = (it + 1, copy.deepcopy(model.state_dict()), path)
    model.eval()
    if log_path:
        write_loss_log(log_path, losses, lrs)
    final_probe = probe_loss(model, probe)
    return TrainResult(model, losses, lrs, initial_probe, final_probe, checksums,
                       trainable, total)
