"""Least-squares GAN discriminators with spectral normalisation.

One mask discriminator is shared across modalities; image discriminators are
per modality. Every weight matrix is divided by a power-iteration estimate of
its top singular value, with the singular-vector estimate persisted as a
buffer so it survives checkpointing and keeps refining across steps.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

_EPS = 1e-12


def _l2_normalize(v: torch.Tensor) -> torch.Tensor:
    return v / (v.norm() + _EPS)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, n_iterations: int = 1):
    """Scale ``weight`` by its estimated top singular value.

    ``weight`` is treated as a 2D matrix (out_features x rest); ``u`` is the
    running left singular-vector estimate, refined by ``n_iterations`` power
    steps. Returns the normalised weight and the updated estimate. A zero
    matrix is returned unchanged.
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(n_iterations):
            v = _l2_normalize(w.t() @ u)
            u = _l2_normalize(w @ v)
        v = _l2_normalize(w.t() @ u)
    # u, v held fixed; the scale keeps its gradient with respect to the weight
    sigma = torch.dot(u, w @ v)
    if float(sigma.detach().abs()) < _EPS:
        return weight, u
    return weight / sigma, u


class SNConv2d(nn.Module):
    """Conv layer whose kernel is spectrally normalised at every training pass."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 4, stride: int = 2,
                 padding: int = 1):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(c_out))
        nn.init.kaiming_uniform_(self.weight, a=0.2)
        self.register_buffer("u", _l2_normalize(torch.randn(c_out)))

    def forward(self, x):
        if self.training:
            w, u = spectral_normalize(self.weight, self.u)
            self.u.copy_(u)
        else:
            w, _ = spectral_normalize(self.weight, self.u, n_iterations=0)
        return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class SNLinear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out))
        nn.init.kaiming_uniform_(self.weight, a=0.2)
        self.register_buffer("u", _l2_normalize(torch.randn(d_out)))

    def forward(self, x):
        if self.training:
            w, u = spectral_normalize(self.weight, self.u)
            self.u.copy_(u)
        else:
            w, _ = spectral_normalize(self.weight, self.u, n_iterations=0)
        return F.linear(x, w, self.bias)


class Discriminator(nn.Module):
    """Four strided conv layers with LeakyReLU and a final single-unit layer."""

    def __init__(self, in_channels: int, width: int = 16):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 4 * width]
        layers = []
        c = in_channels
        for w in widths:
            layers += [SNConv2d(c, w), nn.LeakyReLU(0.2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.final = SNLinear(c * 16, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = self.pool(self.features(x)).flatten(1)
        out = self.final(h).squeeze(-1)
        return out.squeeze(0) if squeeze else out


class MaskDiscriminator(Discriminator):
    """Scores foreground-channel mask maps; shared across modalities."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__(n_classes - 1, width)
        self.n_classes = n_classes

    def score_mask(self, mask: torch.Tensor) -> torch.Tensor:
        """Accepts full L-channel masks or probability maps; drops background."""
        fg = mask[..., 1:, :, :]
        return self(fg)


class ImageDiscriminator(Discriminator):
    def __init__(self, width: int = 16):
        super().__init__(1, width)


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator target: real toward 1, fake toward 0."""
    return (fake_scores ** 2).mean() + ((real_scores - 1.0) ** 2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator target: fake toward 1."""
    return ((fake_scores - 1.0) ** 2).mean()
