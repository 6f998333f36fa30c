"""Semantic representation network: frame + mask stack -> dense feature."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ops import ResidualBlockNoBN


class FrNet(nn.Module):
    """Conv -> LReLU -> Conv -> residual block over ``concat(frame, masks)``.

    Args:
        c_max (int): Number of mask planes in the prior.
        mid_channels (int): Output width D; must match the backbone width.
    """

    def __init__(self, c_max=64, mid_channels=64):
        super().__init__()
        self.c_max = c_max
        self.mid_channels = mid_channels
        self.conv1 = nn.Conv2d(3 + c_max, mid_channels, 3, 1, 1)
        self.conv2 = nn.Conv2d(mid_channels, mid_channels, 3, 1, 1)
        self.block = ResidualBlockNoBN(mid_channels, res_scale=1.0)

    def forward(self, frame, masks):
        """frame: (n, 3, h, w); masks: (n, c_max, h, w) -> (n, D, h, w)."""
        if frame.shape[-2:] != masks.shape[-2:]:
            raise ValueError(f"frame extent {tuple(frame.shape[-2:])} does not match "
                             f"mask extent {tuple(masks.shape[-2:])}")
        if masks.shape[1] != self.c_max:
            raise ValueError(f"expected {self.c_max} mask planes, got {masks.shape[1]}")
        x = torch.cat([frame, masks.to(frame.dtype)], dim=1)
        x = self.conv2(F.leaky_relu(self.conv1(x), 0.1))
        return self.block(x)


def stack_to_tensor(stacks, dtype=torch.float32):
    """Sequence of MaskStack -> (n, c_max, h, w) tensor."""
    import numpy as np
    return torch.from_numpy(np.stack([s.masks for s in stacks])).to(dtype)


def build_representation(frame, masks, frnet):
    return frnet(frame, masks)
