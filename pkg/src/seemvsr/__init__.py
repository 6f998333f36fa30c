"""Mask-guided feature refinement for video super-resolution."""

from .masks import GridPromptSpec, MaskStack, normalize_masks, synth_scene
from .metrics import EvalConfig, psnr, ssim
from .recurrent import RecurrentVSR
from .representation import FrNet, build_representation
from .seem import SEEM, ChannelAttention, ConfigError, inject
from .window import WindowVSR

__version__ = "0.1.0"
