"""Walk through the attention block on a single pooled instance map."""

import torch

from fous.attention import (
    AttentionParams,
    aggregate_information,
    attention_map,
    cross_channel_covariance,
    cross_spatial_covariance,
)

torch.manual_seed(0)

# a 6x4 region with 8 channels, channel-last like the pooled instance maps
x = torch.randn(6, 4, 8, dtype=torch.float64)

# second-order statistics: channels x channels and positions x positions
cc = cross_channel_covariance(x)
cs = cross_spatial_covariance(x)
print("channel covariance", tuple(cc.shape), "min eig %.2e" % torch.linalg.eigvalsh(cc).min())
print("spatial covariance", tuple(cs.shape), "min eig %.2e" % torch.linalg.eigvalsh(cs).min())

# aggregation stacks the channel- and spatial-driven summaries along channels
xcs = aggregate_information(x)
print("aggregated", tuple(xcs.shape))

# the gate lies strictly inside (0, 1) and rescales every element
params = AttentionParams(6, 4, 8).double().eval()
with torch.no_grad():
    gate = attention_map(x, params)
print("gate range %.3f .. %.3f" % (gate.min(), gate.max()))

# a constant map carries no covariance, so only the pooled means drive the gate
flat = torch.full((6, 4, 8), 1.5, dtype=torch.float64)
print("constant map covariance is zero:", not cross_channel_covariance(flat).any())
