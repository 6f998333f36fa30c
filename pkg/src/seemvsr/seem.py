"""SAM-guided refinement: two convolutions and a channel-attention block
producing a semantic-aware residual for a backbone feature."""

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class ChannelAttention(nn.Module):
    """Squeeze-excitation style gate.

    GAP -> FC_down -> ReLU -> FC_up -> FC -> sigmoid, then the per-channel
    gate rescales the input feature.
    """

    def __init__(self, channels=64, reduction=16):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide channels {channels}")
        self.down = nn.Linear(channels, channels // reduction)
        self.up = nn.Linear(channels // reduction, channels)
        self.gate = nn.Linear(channels, channels)

    def forward(self, x):
        """Returns ``(attention (n, D, 1, 1), x * attention)``."""
        pooled = x.mean(dim=(2, 3))
        a = torch.sigmoid(self.gate(self.up(F.relu(self.down(pooled)))))
        a = a[:, :, None, None]
        return a, x * a


class SEEM(nn.Module):
    """Semantic refinement block.

    ``F_m = conv2(lrelu(conv1([F, R])))`` and the output is
    ``F_m + CA(F_m)``. ``conv2`` starts at zero so a freshly attached block
    returns exactly zero and :meth:`inject` is the identity.

    Args:
        channels (int): Feature width D shared by the feature and R_sam.
        reduction (int): Channel-attention bottleneck ratio.
    """

    def __init__(self, channels=64, reduction=16, zero_init=True):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(channels, channels, 3, 1, 1)
        self.attention = ChannelAttention(channels, reduction)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, feat, rsam):
        if feat.shape != rsam.shape:
            raise ValueError(f"feature {tuple(feat.shape)} and representation "
                             f"{tuple(rsam.shape)} must share shape")
        if feat.shape[1] != self.channels:
            raise ValueError(f"expected width {self.channels}, got {feat.shape[1]}")
        fm = self.conv2(F.leaky_relu(self.conv1(torch.cat([feat, rsam], dim=1)), 0.1))
        _, fcab = self.attention(fm)
        return fm + fcab

    def inject(self, feat, rsam):
        return self(feat, rsam) + feat


def inject(feat, rsam, seem):
    """Residual injection ``seem(F, R) + F``; ``seem=None`` passes F through."""
    if seem is None:
        return feat
    return seem.inject(feat, rsam)
