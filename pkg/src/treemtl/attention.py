"""Space/channel attention building blocks.

All public interfaces speak (B, H, W, C) tensors; modules permute
internally where torch wants channels-first. Gradients come from torch
autograd and are verified against finite differences in the test suite.
"""

import math

import torch
import torch.nn as nn

from .errors import ConfigError

__all__ = [
    "dup",
    "global_avg_pool",
    "LANet",
    "SENet",
    "LASEBlock",
    "init_he_uniform",
]


def dup(x, dims, factors):
    """Replicate singleton axes of ``x``.

    Args:
        x: input tensor.
        dims: axis indices to enlarge; each named axis must have extent 1.
        factors: target extent for each axis in ``dims``.

    Returns:
        Tensor whose extent on ``dims[k]`` is ``factors[k]``; every
        replicated slice equals the source slice exactly.

    Raises:
        IndexError: an axis index is out of range.
        ValueError: length mismatch, non-singleton axis, or factor < 1.
    """
    if len(dims) != len(factors):
        raise ValueError(
            f"dims ({len(dims)}) and factors ({len(factors)}) must have equal length"
        )
    if not dims:
        return x
    reps = [1] * x.dim()
    for axis, factor in zip(dims, factors):
        if not -x.dim() <= axis < x.dim():
            raise IndexError(f"axis {axis} out of range for rank-{x.dim()} tensor")
        axis = axis % x.dim()
        if x.shape[axis] != 1:
            raise ValueError(f"axis {axis} has extent {x.shape[axis]}, expected 1")
        if factor < 1:
            raise ValueError(f"replication factor must be >= 1, got {factor}")
        reps[axis] = factor
    return x.repeat(reps)


def global_avg_pool(x):
    """Average a (B, H, W, C) map over its spatial axes to (B, 1, 1, C)."""
    if x.dim() != 4:
        raise ValueError(f"expected a rank-4 (B,H,W,C) tensor, got rank {x.dim()}")
    return x.mean(dim=(1, 2), keepdim=True)


def _reduced_channels(channels, reduction, what):
    if channels < 1:
        raise ConfigError(f"{what}: channel count must be >= 1, got {channels}")
    if reduction < 1:
        raise ConfigError(f"{what}: reduction must be >= 1, got {reduction}")
    if channels == 1:
        return 1  # degenerate case: reduction forced to 1
    if channels % reduction != 0:
        raise ConfigError(
            f"{what}: reduction {reduction} does not divide channel count {channels}"
        )
    return channels // reduction


class LANet(nn.Module):
    """Local (spatial) attention: two 1x1 convolutions -> ReLU/sigmoid mask.

    Compresses all channels of each pixel into one weight in (0,1), then
    rescales the input with that H x W x 1 mask broadcast over channels.

    Args:
        channels: input channel count C.
        reduction: channel compression ratio of the hidden layer (must
            divide C; forced to 1 when C == 1).
    """

    def __init__(self, channels, reduction=16, bias=True):
        super().__init__()
        reduced = _reduced_channels(channels, reduction, "LANet")
        self.channels = channels
        self.compress = nn.Conv2d(channels, reduced, kernel_size=1, bias=bias)
        self.collapse = nn.Conv2d(reduced, 1, kernel_size=1, bias=bias)

    def forward(self, x):
        """Rescale ``x`` (B,H,W,C) by its spatial attention mask.

        Returns:
            (weighted map (B,H,W,C), attention mask (B,H,W,1))
        """
        if x.dim() != 4 or x.shape[3] != self.channels:
            raise ValueError(
                f"expected (B,H,W,{self.channels}) input, got {tuple(x.shape)}"
            )
        z = x.permute(0, 3, 1, 2)
        att = torch.sigmoid(self.collapse(torch.relu(self.compress(z))))
        att = att.permute(0, 2, 3, 1)
        out = dup(att, [3], [self.channels]) * x
        assert out.shape == x.shape
        return out, att


class SENet(nn.Module):
    """Squeeze-and-excitation channel attention.

    Global average pool -> FC -> ReLU -> FC -> sigmoid yields a 1 x 1 x C
    weight vector in (0,1) that rescales the input per channel.
    """

    def __init__(self, channels, reduction=16, bias=True):
        super().__init__()
        reduced = _reduced_channels(channels, reduction, "SENet")
        self.channels = channels
        self.squeeze = nn.Linear(channels, reduced, bias=bias)
        self.excite = nn.Linear(reduced, channels, bias=bias)

    def forward(self, x):
        """Rescale ``x`` (B,H,W,C) by its channel attention vector.

        Returns:
            (weighted map (B,H,W,C), attention vector (B,1,1,C))
        """
        if x.dim() != 4 or x.shape[3] != self.channels:
            raise ValueError(
                f"expected (B,H,W,{self.channels}) input, got {tuple(x.shape)}"
            )
        pooled = global_avg_pool(x)
        att = torch.sigmoid(self.excite(torch.relu(self.squeeze(pooled))))
        out = dup(att, [1, 2], [x.shape[1], x.shape[2]]) * x
        assert out.shape == x.shape
        return out, att


class LASEBlock(nn.Module):
    """Fused attention block: identity + spatial branch + channel branch.

    The input passes a LANet and a SENet in parallel and rejoins via a
    residual connection; the three (B,H,W,C) maps are summed elementwise.
    Either branch can be disabled for ablations.
    """

    def __init__(
        self,
        channels,
        lanet_reduction=16,
        senet_reduction=16,
        use_lanet=True,
        use_senet=True,
        bias=True,
    ):
        super().__init__()
        self.channels = channels
        self.lanet = LANet(channels, lanet_reduction, bias=bias) if use_lanet else None
        self.senet = SENet(channels, senet_reduction, bias=bias) if use_senet else None

    def forward(self, x):
        out, _, _ = self.forward_with_attention(x)
        return out

    def forward_with_attention(self, x):
        """Like ``forward`` but also returns the two attention products.

        Returns:
            (fused map, spatial mask or None, channel vector or None)
        """
        out = x
        spatial_att = None
        channel_att = None
        if self.lanet is not None:
            weighted, spatial_att = self.lanet(x)
            assert weighted.shape == x.shape
            out = out + weighted
        if self.senet is not None:
            weighted, channel_att = self.senet(x)
            assert weighted.shape == x.shape
            out = out + weighted
        return out, spatial_att, channel_att


def init_he_uniform(module, generator):
    """He-uniform conv/FC weights, zero biases, deterministic under ``generator``."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            fan_in = m.in_features
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
        else:
            continue
        bound = math.sqrt(6.0 / fan_in)
        with torch.no_grad():
            m.weight.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.zero_()
    return module
