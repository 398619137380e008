import numpy as np
import pytest
import torch

from dsrdiff.config import preset
from dsrdiff.data import synthetic_split
from dsrdiff.training import train_stage1, train_stage2


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def fd_relative_error(loss_fn, params, max_entries=400, h=1e-6, seed=0):
    """Compare autograd against central differences on (a sample of) parameter entries.

    Returns ``||analytic - numeric|| / ||numeric||`` over the checked entries.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    entries = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    rng = np.random.default_rng(seed)
    if len(entries) > max_entries:
        entries = [entries[k] for k in rng.choice(len(entries), max_entries, replace=False)]
    a, n = [], []
    with torch.no_grad():
        for i, j in entries:
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = loss_fn().item()
            flat[j] = orig - h
            down = loss_fn().item()
            flat[j] = orig
            n.append((up - down) / (2 * h))
            a.append(analytic[i].view(-1)[j].item())
    a, n = np.array(a), np.array(n)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-12))


def weighted_sum(out, seed=0):
    """Scalar probe with fixed random weights (avoids symmetric cancellations)."""
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(out.shape, generator=g, dtype=out.dtype)
    return (out * w).sum()


@pytest.fixture(scope="session")
def toy_data():
    return synthetic_split(4, 32, 4, seed=0)


@pytest.fixture(scope="session")
def toy_configs():
    return preset("toy")


@pytest.fixture(scope="session")
def toy_stage1(toy_data, toy_configs):
    model_cfg, train_cfg = toy_configs
    return train_stage1(toy_data, train_cfg, model_cfg)


@pytest.fixture(scope="session")
def toy_stage2(toy_data, toy_stage1):
    _, cfg2 = preset("toy", stage=2)
    return train_stage2(toy_data, cfg2, toy_stage1)
