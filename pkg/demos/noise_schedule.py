"""
The four-step noise schedule
============================

The guidance vector is diffused in only four steps, with betas rising
linearly from 0.1 to 0.99. This script prints the schedule, checks how
little of the clean signal survives at the last step, and runs one
forward/reverse round trip.
"""

# %%
# Build the schedule. Everything is float64.
import numpy as np
import torch

from dsrdiff import build_schedule, forward_diffuse, reverse_step
from dsrdiff.guidance import GuidanceVector

s = build_schedule(4, 0.1, 0.99)
for t in range(1, s.T + 1):
    print(f"t={t}  beta={s.at('beta', t):.6f}  alpha_bar={s.at('alpha_bar', t):.6e}")

# %%
# At t = T the clean guidance is scaled by sqrt(alpha_bar_T), about 0.04,
# which is why sampling starts from N(0, (1 - alpha_bar_T) I).
print("signal kept at T:", np.sqrt(s.alpha_bar[-1]))

# %%
# A single step can be undone exactly when the true noise is known.
gen = torch.Generator().manual_seed(0)
g0 = GuidanceVector(torch.randn(1, 32, generator=gen, dtype=torch.float64), K=2, C=8)
eps = torch.randn(1, 32, generator=gen, dtype=torch.float64)
g1 = forward_diffuse(g0, s, 1, eps=eps)
back = reverse_step(g1, eps, s, 1)
print("round-trip error at t=1:", (back.values - g0.values).abs().max().item())
