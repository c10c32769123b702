"""Shared test helpers: finite-difference gradients and factor builders."""

import numpy as np
import torch


def finite_difference_gradient(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central-difference gradient of a scalar function at ``x`` (float64)."""
    assert x.dtype == torch.float64
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(fn(x))
        flat[i] = orig - eps
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor, rtol: float = 1e-4):
    torch.testing.assert_close(analytic, numeric, rtol=rtol, atol=1e-6)


def random_onehot(rng: np.random.Generator, channels: int, height: int, width: int) -> torch.Tensor:
    """Random binary one-hot factor (C, H, W)."""
    idx = rng.integers(0, channels, size=(height, width))
    onehot = np.eye(channels)[idx].transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(onehot)).float()


def loss_weights_str(breakdown: dict) -> str:
    return " ".join(f"{k}={v:.4f}" for k, v in breakdown.items())
