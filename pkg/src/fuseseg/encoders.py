"""Encoders disentangling an image into anatomy and modality factors.

The anatomy factor is a binary tensor, one-hot across channels at every
pixel, produced by a U-Net-shaped encoder with a per-modality downsampling
path and a single upsampling path shared by all modalities. The modality
factor is a low-dimensional vector drawn from an encoded Gaussian posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


def binarize_onehot(values: torch.Tensor, through_softmax: bool = True) -> torch.Tensor:
    """Per-pixel one-hot over the channel dimension, ties to the lowest index.

    Forward output is exactly binary. With ``through_softmax`` the backward
    pass is that of a channel softmax (used on encoder logits); without it
    gradients pass straight through to ``values`` (used to re-binarize
    interpolated factors, whose values are already probability-like).
    """
    ch = -3
    if not torch.isfinite(values).all():
        raise ValueError("non-finite values passed to binarize_onehot")
    soft = torch.softmax(values, dim=ch) if through_softmax else values
    with torch.no_grad():
        is_max = soft == soft.amax(dim=ch, keepdim=True)
        first = is_max & (is_max.cumsum(dim=ch) == 1)
        hard = first.to(values.dtype)
    return soft + (hard - soft.detach())


def _groups_for(channels: int) -> int:
    return 4 if channels % 4 == 0 else 1


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    g = _groups_for(c_out)
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(g, c_out), nn.LeakyReLU(0.1, inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(g, c_out), nn.LeakyReLU(0.1, inplace=True),
    )


class _DownPath(nn.Module):
    def __init__(self, levels: int, width: int):
        super().__init__()
        self.blocks = nn.ModuleList()
        c_in = 1
        for lvl in range(levels):
            c_out = width * 2 ** lvl
            self.blocks.append(_double_conv(c_in, c_out))
            c_in = c_out
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                skips.append(x)
                x = self.pool(x)
        return x, skips


class _UpPath(nn.Module):
    def __init__(self, levels: int, width: int):
        super().__init__()
        self.up_convs = nn.ModuleList()
        self.merge_convs = nn.ModuleList()
        for lvl in range(levels - 2, -1, -1):
            c_deep = width * 2 ** (lvl + 1)
            c_out = width * 2 ** lvl
            self.up_convs.append(nn.Conv2d(c_deep, c_out, 3, padding=1))
            self.merge_convs.append(_double_conv(2 * c_out, c_out))

    def forward(self, x, skips):
        for up, merge, skip in zip(self.up_convs, self.merge_convs, reversed(skips)):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = nn.functional.leaky_relu(up(x), 0.1)
            x = merge(torch.cat([x, skip], dim=1))
        return x


class AnatomyEncoder(nn.Module):
    """U-Net with one downsampling path per modality and a shared upsampling path.

    Sharing the upsampling path (and the logit head) pushes all modalities
    toward a common channel semantics for the binary anatomy factors.
    """

    def __init__(self, n_modalities: int, channels: int = 8, levels: int = 3,
                 width: int = 16):
        super().__init__()
        if n_modalities < 1:
            raise ValueError("need at least one modality")
        self.n_modalities = n_modalities
        self.channels = channels
        self.down_paths = nn.ModuleList(
            _DownPath(levels, width) for _ in range(n_modalities)
        )
        self.shared_up = _UpPath(levels, width)
        self.head = nn.Conv2d(width, channels, 1)

    def logits(self, x: torch.Tensor, modality_id: int) -> torch.Tensor:
        if not 0 <= modality_id < self.n_modalities:
            raise ValueError(f"unknown modality id {modality_id}")
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        bottom, skips = self.down_paths[modality_id](x)
        out = self.head(self.shared_up(bottom, skips))
        return out.squeeze(0) if squeeze else out

    def forward(self, x: torch.Tensor, modality_id: int) -> torch.Tensor:
        """Binary one-hot anatomy factor of ``x``."""
        return binarize_onehot(self.logits(x, modality_id))


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over modality factors; ``stddev`` strictly positive."""

    mean: torch.Tensor
    stddev: torch.Tensor

    def sample(self, noise: torch.Tensor) -> torch.Tensor:
        return reparameterize(self, noise)


def reparameterize(posterior: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    """z = mean + stddev * noise, keeping the draw differentiable."""
    return posterior.mean + posterior.stddev * noise


def kl_to_standard_normal(posterior: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)) in closed form, averaged over any batch dimension."""
    mu, sd = posterior.mean, posterior.stddev
    per_dim = 0.5 * (mu * mu + sd * sd - 1.0 - 2.0 * torch.log(sd))
    per_sample = per_dim.sum(dim=-1)
    return per_sample.mean()


class ModalityEncoder(nn.Module):
    """Gaussian posterior over the modality factor, shared by all modalities.

    Sees the image concatenated with its anatomy factor, so the factor can
    explain away structure and the posterior concentrates on intensity and
    texture. The log-variance head is zero-initialised: the untrained
    posterior is the unit Gaussian.
    """

    def __init__(self, anatomy_channels: int, z_dim: int = 8, width: int = 16):
        super().__init__()
        self.z_dim = z_dim
        c = 1 + anatomy_channels
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.trunk = nn.Sequential(nn.Linear(2 * width * 16, 64), nn.LeakyReLU(0.2))
        self.mean_head = nn.Linear(64, z_dim)
        self.logvar_head = nn.Linear(64, z_dim)
        nn.init.zeros_(self.logvar_head.weight)
        nn.init.zeros_(self.logvar_head.bias)

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> GaussianPosterior:
        squeeze = x.dim() == 3
        if squeeze:
            x, s = x.unsqueeze(0), s.unsqueeze(0)
        if x.shape[-2:] != s.shape[-2:]:
            raise ValueError("image and anatomy factor must be spatially aligned")
        h = self.features(torch.cat([x, s], dim=1))
        h = self.trunk(self.pool(h).flatten(1))
        mean = self.mean_head(h)
        stddev = torch.exp(0.5 * self.logvar_head(h))
        if squeeze:
            mean, stddev = mean.squeeze(0), stddev.squeeze(0)
        return GaussianPosterior(mean, stddev)


def encode_modality(encoder: ModalityEncoder, x: torch.Tensor, s: torch.Tensor,
                    noise: torch.Tensor | None = None):
    """Posterior and a modality factor; with no noise the factor is the mean."""
    posterior = encoder(x, s)
    z = posterior.mean if noise is None else posterior.sample(noise)
    return posterior, z
