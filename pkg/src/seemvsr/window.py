"""Sliding-window backbone: deformable alignment, attention fusion and
reconstruction, with optional semantic refinement at three sites."""

import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .degrade import bicubic_resize
from .ops import PixelShuffleUpsampler, ResidualBlockNoBN, deform_conv2d, make_layer
from .representation import FrNet
from .seem import SEEM, ConfigError, inject

logger = logging.getLogger(__name__)


class FeatureExtractor(nn.Module):
    def __init__(self, mid_channels=64, num_blocks=3):
        super().__init__()
        self.conv = nn.Conv2d(3, mid_channels, 3, 1, 1)
        self.blocks = make_layer(ResidualBlockNoBN, num_blocks, nf=mid_channels)

    def forward(self, x):
        return self.blocks(F.leaky_relu(self.conv(x), 0.1))


class OffsetHead(nn.Module):
    """Predicts per-tap (dy, dx) offsets from a (target, reference) pair.

    The last layer is zero-initialised so the initial offsets are exactly 0.
    """

    def __init__(self, mid_channels=64, kernel_size=3):
        super().__init__()
        self.kernel_size = kernel_size
        self.conv1 = nn.Conv2d(2 * mid_channels, mid_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(mid_channels, 2 * kernel_size ** 2, 3, 1, 1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, target, ref):
        if target.shape != ref.shape:
            raise ValueError(f"target {tuple(target.shape)} and reference "
                             f"{tuple(ref.shape)} must share shape")
        return self.conv2(F.leaky_relu(self.conv1(torch.cat([target, ref], 1)), 0.1))


class DeformConv(nn.Module):
    def __init__(self, channels=64, kernel_size=3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(channels, channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(channels))
        conv = nn.Conv2d(channels, channels, kernel_size)
        with torch.no_grad():
            self.weight.copy_(conv.weight)
            self.bias.copy_(conv.bias)

    def forward(self, x, offset):
        return deform_conv2d(x, offset, self.weight, self.bias)


class MiniTSA(nn.Module):
    """Single-scale temporal + spatial attention fusion.

    Each aligned feature is weighted per pixel by
    ``sigmoid(<emb_a(F_i), emb_b(F_ref)>)``; the weighted stack is fused by a
    1x1 convolution and modulated by a sigmoid spatial gate.
    """

    def __init__(self, mid_channels=64, num_frames=5):
        super().__init__()
        self.num_frames = num_frames
        self.embed_a = nn.Conv2d(mid_channels, mid_channels, 3, 1, 1)
        self.embed_b = nn.Conv2d(mid_channels, mid_channels, 3, 1, 1)
        self.fusion = nn.Conv2d(num_frames * mid_channels, mid_channels, 1)
        self.spatial = nn.Conv2d(mid_channels, mid_channels, 3, 1, 1)

    def temporal_weights(self, aligned, ref):
        """aligned: (n, t, c, h, w) -> weights (n, t, 1, h, w)."""
        n, t, c, h, w = aligned.shape
        emb_ref = self.embed_b(ref)
        emb = self.embed_a(aligned.reshape(n * t, c, h, w)).reshape(n, t, c, h, w)
        return torch.sigmoid((emb * emb_ref.unsqueeze(1)).sum(dim=2, keepdim=True))

    def forward(self, aligned, ref):
        n, t, c, h, w = aligned.shape
        if t != self.num_frames:
            raise ConfigError(f"fusion built for {self.num_frames} frames, got {t}")
        weighted = aligned * self.temporal_weights(aligned, ref)
        fused = F.leaky_relu(self.fusion(weighted.reshape(n, t * c, h, w)), 0.1)
        return fused * torch.sigmoid(self.spatial(fused))


class Reconstruction(nn.Module):
    """Residual trunk followed by the x4 sub-pixel upsampler. The caller adds
    the bicubic upsample of the reference frame."""

    def __init__(self, mid_channels=64, num_blocks=5, up_channels=64, zero_init_head=False):
        super().__init__()
        self.trunk = make_layer(ResidualBlockNoBN, num_blocks, nf=mid_channels)
        self.upsampler = PixelShuffleUpsampler(mid_channels, up_channels, zero_init_head)


class WindowVSR(nn.Module):
    """EDVR-style window model on ``2N+1`` LR frames producing one HR frame.

    Args:
        num_frames (int): Window length (odd).
        mid_channels (int): Feature width D.
        use_seem (bool): Attach the representation network and three
            refinement blocks (alignment, fusion, reconstruction).
        c_max (int): Mask planes per frame expected by the prior.
    """

    scale = 4

    def __init__(self, num_frames=5, mid_channels=64, extract_blocks=3, recon_blocks=5,
                 up_channels=64, use_seem=False, c_max=64, reduction=16,
                 zero_init_head=False):
        super().__init__()
        if num_frames < 1 or num_frames % 2 == 0:
            raise ConfigError(f"window length must be odd, got {num_frames}")
        self.num_frames = num_frames
        self.center = num_frames // 2
        self.mid_channels = mid_channels
        self.c_max = c_max
        self.extract = FeatureExtractor(mid_channels, extract_blocks)
        self.offsets = OffsetHead(mid_channels)
        self.dcn = DeformConv(mid_channels)
        self.fusion = MiniTSA(mid_channels, num_frames)
        self.recon = Reconstruction(mid_channels, recon_blocks, up_channels, zero_init_head)
        self.use_seem = use_seem
        if use_seem:
            self.frnet = FrNet(c_max, mid_channels)
            self.seem = nn.ModuleDict({
                site: SEEM(mid_channels, reduction) for site in ("align", "fuse", "rec")
            })
        self.last_max_offset = 0.0

    def extract_features(self, lrs):
        n, t, c, h, w = lrs.shape
        return self.extract(lrs.reshape(n * t, c, h, w)).reshape(n, t, -1, h, w)

    def align(self, feats, ref):
        n, t, c, h, w = feats.shape
        tgt = feats.reshape(n * t, c, h, w)
        ref_rep = ref.unsqueeze(1).expand(n, t, c, h, w).reshape(n * t, c, h, w)
        offset = self.offsets(tgt, ref_rep)
        with torch.no_grad():
            self.last_max_offset = float(offset.abs().max())
        if self.last_max_offset > max(h, w):
            logger.warning("offset magnitude %.1f exceeds feature extent %dx%d",
                           self.last_max_offset, h, w)
        return self.dcn(tgt, offset).reshape(n, t, c, h, w)

    def forward(self, lrs, masks=None, seem_enabled=None):
        """lrs: (n, T, 3, h, w); masks: (n, c_max, h, w) for the centre frame.

        Returns (n, 3, 4h, 4w).
        """
        if lrs.shape[1] != self.num_frames:
            raise ConfigError(f"model expects {self.num_frames} frames, got {lrs.shape[1]}")
        if seem_enabled is None:
            seem_enabled = self.use_seem
        if seem_enabled and not self.use_seem:
            raise ConfigError("model was built without refinement blocks")
        if seem_enabled and masks is None:
            raise ConfigError("masks are required when refinement is enabled")

        center = lrs[:, self.center]
        feats = self.extract_features(lrs)
        ref = feats[:, self.center]
        if seem_enabled:
            rsam = self.frnet(center, masks)
            sites = dict(self.seem)
        else:
            rsam, sites = None, {}
        aligned = self.align(feats, inject(ref, rsam, sites.get("align")))
        fused = self.fusion(aligned, aligned[:, self.center])
        rec = self.recon.trunk(inject(fused, rsam, sites.get("fuse")))
        rec = inject(rec, rsam, sites.get("rec"))
        return self.recon.upsampler(rec) + bicubic_resize(center, self.scale)
