import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def finite_difference_check(fn, inputs, step=1e-4):
    """Max relative error between autograd and central differences (float64)."""
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(inputs, analytic):
            num = torch.zeros_like(x)
            flat, nflat = x.view(-1), num.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn(*inputs).item()
                flat[i] = orig - step
                down = fn(*inputs).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * step)
            denom = max(g.abs().max().item(), num.abs().max().item(), 1e-12)
            worst = max(worst, (g - num).abs().max().item() / denom)
    return worst
