"""
From feature map to compact guidance
====================================

The guidance network rearranges the HR inputs to LR resolution with
pixel-unshuffle, then averages each of K x K blocks per channel. The
output is a vector of K*K*C numbers, small enough to diffuse cheaply.
"""

# %%
import torch

from dsrdiff.guidance import GGN, block_upsample, compress_guidance, pixel_unshuffle

x = torch.arange(1.0, 17.0).reshape(1, 1, 4, 4)
print(x[0, 0])

# %%
# Space-to-depth with s = 2: each output channel is one phase of the grid.
print(pixel_unshuffle(x, 2)[0])

# %%
# Block means with K = 2, flattened channel-major.
g = compress_guidance(x, 2)
print(g)

# %%
# The DSRN spreads each cell back over the same blocks before injecting it.
print(block_upsample(g.reshape(1, 1, 2, 2), 4, 4)[0, 0])

# %%
# A toy GGN on random inputs: 2*2*8 = 32 guidance values per image.
torch.manual_seed(0)
ggn = GGN(channels=8, scale=4, n_res=1, K=2)
hr, color, lr = torch.rand(1, 1, 32, 32), torch.rand(1, 3, 32, 32), torch.rand(1, 1, 8, 8)
out = ggn(lr, hr, color)
print(out.values.shape, out.values.abs().max().item())
