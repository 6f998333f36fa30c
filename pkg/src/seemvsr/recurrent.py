"""Bidirectional recurrent backbone with flow-based warping, plus the flow
estimators it can use and the ``FLO2`` flow file format."""

import math
import struct

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .degrade import bicubic_resize
from .ops import PixelShuffleUpsampler, ResidualBlockNoBN, flow_warp, make_layer
from .representation import FrNet
from .seem import SEEM, ConfigError, inject

BRANCHES = ("forward", "backward")
FLO_MAGIC = b"FLO2"


# ------------------------------------------------------------------- flow

class ZeroFlow(nn.Module):
    kind = "zero"

    def forward(self, a, b):
        n, _, h, w = a.shape
        return a.new_zeros(n, 2, h, w)


def local_cost(a, b, radius):
    """Photometric matching cost of ``a`` against ``b`` shifted by every
    integer displacement in a (2r+1)^2 window.

    Returns ``(cost (n, K, h, w), displacements (K, 2) as (u, v))``. The
    per-pixel absolute difference is box-filtered over 5x5 for stability;
    out-of-range reads replicate the border.
    """
    n, c, h, w = a.shape
    padded = F.pad(b, (radius,) * 4, mode="replicate")
    costs, disp = [], []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[:, :, radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            costs.append((a - shifted).abs().mean(1))
            disp.append((dx, dy))
    cost = F.avg_pool2d(torch.stack(costs, 1), 5, 1, 2, count_include_pad=False)
    return cost, torch.tensor(disp, dtype=a.dtype, device=a.device)


class _FlowLevel(nn.Module):
    """Soft-argmin over a contrast-normalised cost volume plus a learned
    residual. The residual head starts at zero."""

    def __init__(self, radius, width=24):
        super().__init__()
        self.radius = radius
        k = (2 * radius + 1) ** 2
        self.log_temp = nn.Parameter(torch.tensor(math.log(0.1)))
        self.refine = nn.Sequential(
            nn.Conv2d(k + 5, width, 3, 1, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(width, width, 3, 1, 1), nn.LeakyReLU(0.1),
            nn.Conv2d(width, 2, 3, 1, 1),
        )
        nn.init.zeros_(self.refine[-1].weight)
        nn.init.zeros_(self.refine[-1].bias)

    def forward(self, a, b):
        cost, disp = local_cost(a, b, self.radius)
        lo = cost.min(1, keepdim=True)[0]
        cost = (cost - lo) / (cost.mean(1, keepdim=True) - lo + 1e-3)
        weights = torch.softmax(-cost / self.log_temp.exp(), 1)
        flow = torch.einsum("nkhw,kc->nchw", weights, disp)
        return flow + self.refine(torch.cat([cost, flow, a], 1))


class TinyFlowNet(nn.Module):
    """Two-level coarse-to-fine flow estimator.

    The coarse level matches at half resolution over +-3 px (+-6 px at full
    resolution); the fine level refines by +-1 px after warping the second
    frame with the upsampled estimate. Output channel 0 is u (columns),
    channel 1 is v (rows), mapping positions in ``a`` to their
    correspondences in ``b``.
    """

    kind = "tiny"

    def __init__(self, width=24):
        super().__init__()
        self.coarse = _FlowLevel(3, width)
        self.fine = _FlowLevel(1, width)

    def forward(self, a, b):
        h, w = a.shape[-2:]
        hc, wc = (h + 1) // 2, (w + 1) // 2
        a2 = F.interpolate(a, size=(hc, wc), mode="bilinear", align_corners=False)
        b2 = F.interpolate(b, size=(hc, wc), mode="bilinear", align_corners=False)
        coarse = self.coarse(a2, b2)
        up = F.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
        up = up * torch.tensor([w / wc, h / hc], dtype=a.dtype, device=a.device).view(1, 2, 1, 1)
        return up + self.fine(a, flow_warp(b, up))


class PrecomputedFlow(nn.Module):
    """Marker estimator: flows must be supplied to the model's forward."""

    kind = "precomputed"

    def forward(self, a, b):
        raise ConfigError("precomputed flow estimator needs flows passed to forward()")


FLOW_ESTIMATORS = {"tiny": TinyFlowNet, "zero": ZeroFlow, "precomputed": PrecomputedFlow}


def estimate_flow(a, b, estimator):
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return estimator(a, b)


def translation_pair(image, shift, size, origin):
    """Crop two views of ``image`` (3, H, W) so that the second is the first
    translated by ``shift`` = (u, v) pixels; flow from view a to view b is
    then exactly ``shift`` everywhere."""
    img = torch.as_tensor(image)[None]
    oy, ox = origin
    gy, gx = torch.meshgrid(torch.arange(size, dtype=img.dtype) + oy,
                            torch.arange(size, dtype=img.dtype) + ox, indexing="ij")
    from .ops import bilinear_sample
    a = bilinear_sample(img, gy[None], gx[None])[0]
    b = bilinear_sample(img, gy[None] - shift[1], gx[None] - shift[0])[0]
    return a, b


def train_flow_estimator(net, frames, steps=300, size=32, max_shift=3.0, batch=8,
                         lr=1e-3, seed=0):
    """Supervised toy training on random global translations of ``frames``.

    ``frames`` is a (N, 3, H, W) array of LR images with H, W >= size + 2 *
    (max_shift + 1). A quarter of each batch uses zero motion. Returns the
    per-step endpoint-error curve.
    """
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    n, _, h, w = frames.shape
    margin = int(np.ceil(max_shift)) + 1
    if min(h, w) < size + 2 * margin:
        raise ValueError(f"frames of {h}x{w} too small for {size}px crops")
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    curve = []
    for _ in range(steps):
        idx = torch.randint(0, n, (batch,), generator=gen)
        shifts = (torch.rand(batch, 2, generator=gen) * 2 - 1) * max_shift
        shifts[: batch // 4] = 0
        oy = torch.randint(margin, h - size - margin + 1, (batch,), generator=gen)
        ox = torch.randint(margin, w - size - margin + 1, (batch,), generator=gen)
        pairs = [translation_pair(frames[i], s, size, (y, x))
                 for i, s, y, x in zip(idx, shifts, oy.tolist(), ox.tolist())]
        a = torch.stack([p[0] for p in pairs])
        b = torch.stack([p[1] for p in pairs])
        target = shifts[:, :, None, None].expand(batch, 2, size, size)
        pred = net(a, b)
        epe = (pred - target).norm(dim=1).mean()
        opt.zero_grad()
        epe.backward()
        opt.step()
        curve.append(epe.item())
    return curve


def write_flo2(path, flow):
    """(2, H, W) flow, channel 0 = u, channel 1 = v."""
    flow = np.asarray(flow, dtype="<f4")
    _, h, w = flow.shape
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC + struct.pack("<II", h, w))
        fh.write(flow.tobytes())


def read_flo2(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: bad flow magic {data[:4]!r}")
    h, w = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 8 * h * w:
        raise ValueError(f"{path}: expected {12 + 8 * h * w} bytes, found {len(data)}")
    return np.frombuffer(data, "<f4", 2 * h * w, 12).reshape(2, h, w).astype(np.float32)


# ---------------------------------------------------------------- backbone

class BranchTrunk(nn.Module):
    """``psi`` (one 3x3 conv over [frame, warped state]) and the ``Ref``
    residual stack of one propagation direction."""

    def __init__(self, mid_channels=64, num_blocks=5):
        super().__init__()
        self.psi = nn.Conv2d(3 + mid_channels, mid_channels, 3, 1, 1)
        self.refine = make_layer(ResidualBlockNoBN, num_blocks, nf=mid_channels)


class RecurrentVSR(nn.Module):
    """BasicVSR-style bidirectional model producing one HR frame per input.

    Args:
        mid_channels (int): Feature width D.
        num_blocks (int): Residual blocks per propagation branch.
        use_seem (bool): Attach refinement blocks.
        seem_branches (iterable): Subset of ``("forward", "backward")`` that
            receives refinement (before and after ``Ref``).
        flow (str): ``"tiny"``, ``"zero"`` or ``"precomputed"``.
    """

    scale = 4

    def __init__(self, mid_channels=64, num_blocks=5, up_channels=64, use_seem=False,
                 seem_branches=BRANCHES, c_max=64, reduction=16, flow="tiny",
                 zero_init_head=False):
        super().__init__()
        bad = set(seem_branches) - set(BRANCHES)
        if bad:
            raise ConfigError(f"unknown branches {sorted(bad)}")
        seem_branches = tuple(b for b in BRANCHES if b in set(seem_branches))
        if flow not in FLOW_ESTIMATORS:
            raise ConfigError(f"unknown flow estimator {flow!r}")
        self.mid_channels = mid_channels
        self.c_max = c_max
        self.flow = FLOW_ESTIMATORS[flow]()
        self.backward_trunk = BranchTrunk(mid_channels, num_blocks)
        self.forward_trunk = BranchTrunk(mid_channels, num_blocks)
        self.fusion = nn.Conv2d(2 * mid_channels, mid_channels, 1)
        self.upsampler = PixelShuffleUpsampler(mid_channels, up_channels, zero_init_head)
        self.use_seem = use_seem and bool(seem_branches)
        self.seem_branches = seem_branches if use_seem else ()
        if self.use_seem:
            self.frnet = FrNet(c_max, mid_channels)
            self.seem = nn.ModuleDict({
                f"{b}_{pos}": SEEM(mid_channels, reduction)
                for b in seem_branches for pos in ("in", "out")
            })

    @property
    def flow_kind(self):
        return self.flow.kind

    def compute_flows(self, lrs):
        """Returns (forward_flows, backward_flows), each (n, T-1, 2, h, w).

        ``forward_flows[:, t-1] = Flow(I_t, I_{t-1})`` and
        ``backward_flows[:, t] = Flow(I_t, I_{t+1})``.
        """
        n, t, c, h, w = lrs.shape
        if t < 2:
            empty = lrs.new_zeros(n, 0, 2, h, w)
            return empty, empty
        cur = lrs[:, 1:].reshape(-1, c, h, w)
        prev = lrs[:, :-1].reshape(-1, c, h, w)
        fwd = estimate_flow(cur, prev, self.flow).reshape(n, t - 1, 2, h, w)
        bwd = estimate_flow(prev, cur, self.flow).reshape(n, t - 1, 2, h, w)
        return fwd, bwd

    def _step(self, trunk, frame, state, flow, rsam, seem_in, seem_out):
        warped = state if flow is None else flow_warp(state, flow)
        u = F.leaky_relu(trunk.psi(torch.cat([frame, warped], 1)), 0.1)
        u = inject(u, rsam, seem_in)
        h = trunk.refine(u)
        return inject(h, rsam, seem_out)

    def propagate(self, lrs, masks=None, seem_enabled=None, flows=None):
        """Run both directions.

        Returns ``(forward_states, backward_states)``, lists of T tensors
        (n, D, h, w): the refined (and, where enabled, re-enhanced) branch
        outputs. Each output is also the hidden state handed to the next step.
        """
        n, t, c, h, w = lrs.shape
        if t == 0:
            raise ValueError("empty clip")
        if seem_enabled is None:
            seem_enabled = self.use_seem
        active = self.seem_branches if seem_enabled else ()
        if active and masks is None:
            raise ConfigError("masks are required when refinement is enabled")
        if flows is None:
            if self.flow_kind == "precomputed" and t > 1:
                raise ConfigError("precomputed flow estimator needs flows")
            flows = self.compute_flows(lrs)
        fwd_flows, bwd_flows = flows

        rsam = None
        if active:
            rsam = self.frnet(lrs.reshape(n * t, c, h, w),
                              masks.reshape(n * t, -1, h, w)).reshape(n, t, -1, h, w)

        def sites(branch):
            if branch not in active:
                return None, None
            return self.seem[f"{branch}_in"], self.seem[f"{branch}_out"]

        zeros = lrs.new_zeros(n, self.mid_channels, h, w)
        backward = [None] * t
        state = zeros
        s_in, s_out = sites("backward")
        for i in range(t - 1, -1, -1):
            flow = bwd_flows[:, i] if i < t - 1 else None
            state = self._step(self.backward_trunk, lrs[:, i], state, flow,
                               None if rsam is None else rsam[:, i], s_in, s_out)
            backward[i] = state

        forward = [None] * t
        state = zeros
        s_in, s_out = sites("forward")
        for i in range(t):
            flow = fwd_flows[:, i - 1] if i > 0 else None
            state = self._step(self.forward_trunk, lrs[:, i], state, flow,
                               None if rsam is None else rsam[:, i], s_in, s_out)
            forward[i] = state
        return forward, backward

    def forward(self, lrs, masks=None, seem_enabled=None, flows=None):
        """lrs: (n, T, 3, h, w); masks: (n, T, c_max, h, w).

        Returns (n, T, 3, 4h, 4w).
        """
        fwd, bwd = self.propagate(lrs, masks, seem_enabled, flows)
        outs = []
        for i in range(lrs.shape[1]):
            feat = F.leaky_relu(self.fusion(torch.cat([fwd[i], bwd[i]], 1)), 0.1)
            outs.append(self.upsampler(feat) + bicubic_resize(lrs[:, i], self.scale))
        return torch.stack(outs, dim=1)
