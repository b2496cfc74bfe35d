import numpy as np
import pytest
import torch


def central_difference(fn, tensor: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` with respect to ``tensor`` (modified in place and restored)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Largest absolute deviation relative to the gradient's own scale."""
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale


@pytest.fixture
def fd():
    return central_difference


@pytest.fixture
def rng():
    return np.random.default_rng(0)
