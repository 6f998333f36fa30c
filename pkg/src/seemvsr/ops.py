"""Shared building blocks: bilinear sampling, flow warping, deformable
convolution, residual blocks and the sub-pixel upsampler."""

import torch
import torch.nn as nn
import torch.nn.functional as F


class NumericError(ValueError):
    """Raised when sampling coordinates contain NaN or inf."""


def _check_finite(t, what):
    bad = ~torch.isfinite(t)
    if bad.any():
        idx = tuple(int(i) for i in bad.nonzero()[0].tolist())
        raise NumericError(f"non-finite {what} at index {idx}")


def bilinear_sample(x, py, px):
    """Sample ``x`` at real-valued pixel coordinates with zero padding.

    Args:
        x (Tensor): (n, c, h, w) source.
        py, px (Tensor): (n, *s) row / column coordinates in pixels.

    Returns:
        Tensor: (n, c, *s) samples. Points outside the image read as zero;
        lattice points return the exact source value.
    """
    n, c, h, w = x.shape
    out_shape = py.shape[1:]
    py = py.reshape(n, -1)
    px = px.reshape(n, -1)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    wy0 = 1 - wy1
    wx0 = 1 - wx1
    y0 = y0.long()
    x0 = x0.long()
    flat = x.reshape(n, c, h * w)

    out = None
    for dy, wy in ((0, wy0), (1, wy1)):
        for dx, wx in ((0, wx0), (1, wx1)):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            idx = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1))
            v = torch.gather(flat, 2, idx.unsqueeze(1).expand(n, c, idx.shape[1]))
            wt = (wy * wx * valid.to(x.dtype)).unsqueeze(1)
            term = v * wt
            out = term if out is None else out + term
    return out.reshape(n, c, *out_shape)


def flow_warp(x, flow):
    """Backward-warp ``x`` with a dense displacement field.

    Args:
        x (Tensor): (n, c, h, w) feature or image.
        flow (Tensor): (n, 2, h, w) displacement in pixels, channel 0 is the
            horizontal component u, channel 1 the vertical component v.

    Returns:
        Tensor: (n, c, h, w) where ``out[p] = x[p + flow[p]]``.
    """
    if x.shape[-2:] != flow.shape[-2:]:
        raise ValueError(f"extent mismatch: feature {tuple(x.shape[-2:])} "
                         f"vs flow {tuple(flow.shape[-2:])}")
    _check_finite(flow, "flow")
    n, _, h, w = x.shape
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=x.dtype, device=x.device),
        torch.arange(w, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    return bilinear_sample(x, gy + flow[:, 1], gx + flow[:, 0])


def deform_conv2d(x, offset, weight, bias=None):
    """Plain (unmodulated) deformable 3x3-style convolution.

    ``offset`` uses the (dy, dx) per-tap layout: channel ``2k`` holds the
    row offset and ``2k + 1`` the column offset of kernel tap ``k``
    (row-major over the kernel). Stride 1, padding ``kh // 2``.
    """
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"weight expects {cin} input channels, got {c}")
    k = kh * kw
    if offset.shape != (n, 2 * k, h, w):
        raise ValueError(f"offset shape {tuple(offset.shape)} != {(n, 2 * k, h, w)}")
    _check_finite(offset, "offset")
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=x.dtype, device=x.device),
        torch.arange(w, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    ty = torch.arange(kh, dtype=x.dtype, device=x.device) - kh // 2
    tx = torch.arange(kw, dtype=x.dtype, device=x.device) - kw // 2
    ty, tx = torch.meshgrid(ty, tx, indexing="ij")
    off = offset.reshape(n, k, 2, h, w)
    py = gy + ty.reshape(k, 1, 1) + off[:, :, 0]
    px = gx + tx.reshape(k, 1, 1) + off[:, :, 1]
    cols = bilinear_sample(x, py, px)  # n, c, k, h, w
    out = torch.einsum("nckhw,ock->nohw", cols, weight.reshape(cout, cin, k))
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


class ResidualBlockNoBN(nn.Module):
    """Conv-LReLU-Conv with identity skip.

    ---Conv-LReLU-Conv-+-
     |_________________|
    """

    def __init__(self, nf=64, res_scale=0.1):
        super().__init__()
        self.conv1 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv2 = nn.Conv2d(nf, nf, 3, 1, 1)
        # small init keeps deep stacks close to identity at the start
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                conv.weight.mul_(res_scale)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


def make_layer(block, num_blocks, **kwargs):
    return nn.Sequential(*[block(**kwargs) for _ in range(num_blocks)])


class PixelShuffleUpsampler(nn.Module):
    """Two x2 sub-pixel stages followed by a 3-channel head.

    Args:
        in_channels (int): Width of the incoming feature.
        mid_channels (int): Width of the upsampled features.
        zero_init_head (bool): Start with the head at zero so the module
            contributes nothing until trained.
    """

    def __init__(self, in_channels=64, mid_channels=16, zero_init_head=False):
        super().__init__()
        self.up1 = nn.Conv2d(in_channels, mid_channels * 4, 3, 1, 1)
        self.up2 = nn.Conv2d(mid_channels, mid_channels * 4, 3, 1, 1)
        self.head = nn.Conv2d(mid_channels, 3, 3, 1, 1)
        self.shuffle = nn.PixelShuffle(2)
        if zero_init_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def forward(self, x):
        x = F.leaky_relu(self.shuffle(self.up1(x)), 0.1)
        x = F.leaky_relu(self.shuffle(self.up2(x)), 0.1)
        return self.head(x)
