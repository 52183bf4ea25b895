"""Multi-information perception attention (aggregation, interaction, gating).

Feature maps are channel-last tensors of shape ``(..., H, W, C)``; any leading
dimensions are treated as a batch.
"""

from math import gcd, sqrt

import torch
import torch.nn as nn

MAX_SPATIAL_POSITIONS = 4096


class NonFiniteFeature(ValueError):
    pass


def _check_finite(x):
    if not torch.isfinite(x).all():
        raise NonFiniteFeature("non-finite feature")


def cross_channel_covariance(x):
    """Covariance between channels, pooled over all spatial positions.

    Returns a ``(..., C, C)`` tensor normalised by ``H*W``.
    """
    _check_finite(x)
    *lead, h, w, c = x.shape
    flat = x.reshape(*lead, h * w, c)
    centered = flat - flat.mean(dim=-2, keepdim=True)
    return centered.transpose(-1, -2) @ centered / (h * w)


def cross_spatial_covariance(x, max_positions=MAX_SPATIAL_POSITIONS):
    """Covariance between spatial positions, pooled over channels.

    Returns a ``(..., H*W, H*W)`` tensor normalised by ``C``.
    """
    _check_finite(x)
    *lead, h, w, c = x.shape
    if h * w > max_positions:
        raise ValueError(f"spatial covariance too large ({h * w} > {max_positions} positions)")
    flat = x.reshape(*lead, h * w, c)
    centered = flat - flat.mean(dim=-1, keepdim=True)
    return centered @ centered.transpose(-1, -2) / c


def channel_aggregation(x):
    """Channel-level branch: covariance times channel GAP, broadcast over H, W."""
    *lead, h, w, c = x.shape
    gap = x.reshape(*lead, h * w, c).mean(dim=-2)
    mixed = (cross_channel_covariance(x) @ gap.unsqueeze(-1)).squeeze(-1)
    return mixed[..., None, None, :].expand(*lead, h, w, c)


def spatial_aggregation(x):
    """Spatial-level branch: position GAP times spatial covariance, broadcast over C."""
    *lead, h, w, c = x.shape
    gap = x.reshape(*lead, h * w, c).mean(dim=-1)
    mixed = (gap.unsqueeze(-2) @ cross_spatial_covariance(x)).squeeze(-2)
    return mixed.reshape(*lead, h, w, 1).expand(*lead, h, w, c)


def aggregate_information(x):
    """Interleave the channel and spatial aggregations into ``(..., H, W, 2C)``.

    Output channel ``2k`` comes from the channel branch and ``2k + 1`` from the
    spatial branch.
    """
    clia = channel_aggregation(x)
    slia = spatial_aggregation(x)
    return torch.stack([clia, slia], dim=-1).flatten(-2)


def _default_groups(n):
    return gcd(2, n)


class GroupedTransform(nn.Module):
    """Grouped 1x1 transform over a "channel" axis, then batch norm and ReLU.

    Input ``(B, n_in, L)`` with ``n_in`` split into ``groups`` contiguous blocks,
    each mapped to ``n_out / groups`` outputs; weights are shared along ``L``.
    """

    def __init__(self, n_in, n_out, groups):
        super().__init__()
        if groups < 1 or n_in % groups or n_out % groups:
            raise ValueError(f"invalid grouping: {groups} groups for {n_in}->{n_out}")
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(groups, n_out // groups, n_in // groups))
        self.bias = nn.Parameter(torch.empty(n_out))
        self.norm = nn.BatchNorm1d(n_out)
        bound = 1.0 / sqrt(n_in // groups)
        nn.init.uniform_(self.weight, -bound, bound)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, z):
        b, n_in, length = z.shape
        z = z.reshape(b, self.groups, n_in // self.groups, length)
        out = torch.einsum("goi,bgil->bgol", self.weight, z).reshape(b, -1, length)
        out = out + self.bias[None, :, None]
        return torch.relu(self.norm(out))


class AttentionParams(nn.Module):
    """Learnable state of one attention branch sized for ``(H, W, C)`` inputs.

    ``alpha`` and ``beta`` fuse the channel-driven and spatial-driven
    interactions.  Group counts default to 2 where the grouped axis allows it
    and fall back to 1 otherwise; explicit counts are validated.
    """

    def __init__(self, height, width, channels, channel_groups=None, spatial_groups=None):
        super().__init__()
        self.shape = (height, width, channels)
        positions = height * width
        if channel_groups is None:
            channel_groups = _default_groups(channels)
        if spatial_groups is None:
            spatial_groups = _default_groups(positions)
        self.alpha = nn.Parameter(torch.full((channels,), 0.5))
        self.beta = nn.Parameter(torch.full((channels,), 0.5))
        # channel-driven: parameters distinct per channel, shared over positions
        self.channel_transform = GroupedTransform(2 * channels, channels, channel_groups)
        # spatial-driven: parameters distinct per position, shared over channels
        self.spatial_transform = GroupedTransform(positions, positions, spatial_groups)


def channel_driven_interaction(xcs, params):
    *lead, h, w, c2 = xcs.shape
    z = xcs.reshape(-1, h * w, c2).transpose(1, 2)
    out = params.channel_transform(z)
    return out.transpose(1, 2).reshape(*lead, h, w, c2 // 2)


def spatial_driven_interaction(xcs, params):
    *lead, h, w, c2 = xcs.shape
    z = xcs.reshape(-1, h * w, c2)
    out = params.spatial_transform(z)
    # row-wise sum of each interleaved (channel-branch, spatial-branch) pair
    out = out.reshape(-1, h * w, c2 // 2, 2).sum(dim=-1)
    return out.reshape(*lead, h, w, c2 // 2)


def interact_information(xcs, params):
    """Fuse channel- and spatial-driven interactions of ``xcs`` into ``C`` channels."""
    c2 = xcs.shape[-1]
    if c2 % 2:
        raise ValueError(f"expected 2C channels, got {c2}")
    h, w, c = params.shape
    if tuple(xcs.shape[-3:]) != (h, w, 2 * c):
        raise ValueError(f"expected 2C channels for params of shape {params.shape}, got {tuple(xcs.shape[-3:])}")
    cdii = channel_driven_interaction(xcs, params)
    sdii = spatial_driven_interaction(xcs, params)
    return params.alpha * cdii + params.beta * sdii


def attention_map(x, params):
    return torch.sigmoid(interact_information(aggregate_information(x), params))


def apply_attention(x, params):
    """Gate ``x`` elementwise by its attention map; output shape equals input shape."""
    return x * attention_map(x, params)


class MultiInfoAttention(nn.Module):
    """Attention block over channel-last maps, optionally split into branches.

    With ``branches > 1`` the channels are divided into equal sub-features and
    each is gated by its own parameter set.
    """

    def __init__(self, height, width, channels, branches=1):
        super().__init__()
        if branches < 1 or channels % branches:
            raise ValueError(f"invalid grouping: {branches} branches for {channels} channels")
        self.branches = nn.ModuleList(
            AttentionParams(height, width, channels // branches) for _ in range(branches)
        )

    def forward(self, x):
        chunks = x.chunk(len(self.branches), dim=-1)
        return torch.cat([apply_attention(part, p) for part, p in zip(chunks, self.branches)], dim=-1)
