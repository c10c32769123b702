"""Segmentation head, supervised losses, and the two image decoders.

The segmentor maps anatomy factors (one-hot, or multi-hot after fusion) to
per-pixel class probabilities and is shared across modalities. Decoders
re-entangle an anatomy factor with a modality factor into an image: the
FiLM variant conditions convolutions over the factor with per-channel
scale/offset vectors predicted from z, the SPADE variant grows an image from
z with layers denormalised by modulation tensors predicted from the factor.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DICE_EPS = 1e-6
CE_CLIP = 1e-7
INSTANCE_EPS = 1e-5


class Segmentor(nn.Module):
    """Two conv layers and a softmax head over anatomy-factor channels."""

    def __init__(self, anatomy_channels: int, n_classes: int, width: int = 32):
        super().__init__()
        self.anatomy_channels = anatomy_channels
        g = 4 if width % 4 == 0 else 1
        self.net = nn.Sequential(
            nn.Conv2d(anatomy_channels, width, 3, padding=1),
            nn.GroupNorm(g, width), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(width, width, 3, padding=1),
            nn.GroupNorm(g, width), nn.LeakyReLU(0.1, inplace=True),
            nn.Conv2d(width, n_classes, 1),
        )

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        squeeze = s.dim() == 3
        if squeeze:
            s = s.unsqueeze(0)
        if s.shape[1] != self.anatomy_channels:
            raise ValueError(
                f"expected {self.anatomy_channels} anatomy channels, got {s.shape[1]}"
            )
        out = torch.softmax(self.net(s), dim=1)
        return out.squeeze(0) if squeeze else out


def dice_loss_per_sample(pred: torch.Tensor, target: torch.Tensor,
                         eps: float = DICE_EPS) -> torch.Tensor:
    """(B,) soft Dice losses over pixels and foreground channels."""
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    p = pred[:, 1:]
    t = target[:, 1:]
    inter = (p * t).flatten(1).sum(dim=1)
    denom = p.flatten(1).sum(dim=1) + t.flatten(1).sum(dim=1)
    dice = (2.0 * inter + eps) / (denom + eps)
    return 1.0 - dice


def cross_entropy_per_sample(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(B,) per-pixel cross entropies of clipped probabilities."""
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    p = pred.clamp(CE_CLIP, 1.0)
    ce = -(target * torch.log(p)).sum(dim=1)
    return ce.flatten(1).mean(dim=1)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """1 - soft Dice over pixels and foreground channels, mean over the batch."""
    squeeze = pred.dim() == 3
    if squeeze:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    return dice_loss_per_sample(pred, target, eps).mean()


def cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel cross entropy of clipped probabilities, averaged over pixels."""
    squeeze = pred.dim() == 3
    if squeeze:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    return cross_entropy_per_sample(pred, target).mean()


def supervised_loss(pred: torch.Tensor, target: torch.Tensor,
                    a: float = 1.0, b: float = 1.0) -> torch.Tensor:
    return a * dice_loss(pred, target) + b * cross_entropy(pred, target)


def supervised_loss_per_sample(pred: torch.Tensor, target: torch.Tensor,
                               a: float = 1.0, b: float = 1.0) -> torch.Tensor:
    return a * dice_loss_per_sample(pred, target) + b * cross_entropy_per_sample(pred, target)


def reconstruction_loss(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError("shapes differ")
    return (x - y).abs().mean()


def reconstruction_loss_per_sample(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError("shapes differ")
    return (x - y).abs().flatten(1).mean(dim=1)


def film_modulate(feat: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Per-channel affine transform; gamma/beta are (C,) or (B, C)."""
    if gamma.dim() == 1:
        gamma = gamma.unsqueeze(0)
        beta = beta.unsqueeze(0)
    return feat * gamma[..., None, None] + beta[..., None, None]


class FiLMDecoder(nn.Module):
    """Convolutions over the anatomy factor, each modulated from z.

    The modulation heads are zero-initialised so the decoder starts as an
    unconditioned network (gamma 1, beta 0).
    """

    def __init__(self, anatomy_channels: int, z_dim: int, width: int = 32,
                 n_blocks: int = 3):
        super().__init__()
        self.kind = "film"
        self.convs = nn.ModuleList()
        c_in = anatomy_channels
        for _ in range(n_blocks):
            self.convs.append(nn.Conv2d(c_in, width, 3, padding=1))
            c_in = width
        self.z_trunk = nn.Sequential(nn.Linear(z_dim, 32), nn.LeakyReLU(0.2))
        self.film_heads = nn.ModuleList()
        for _ in range(n_blocks):
            head = nn.Linear(32, 2 * width)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            self.film_heads.append(head)
        self.out_conv = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        squeeze = s.dim() == 3
        if squeeze:
            s, z = s.unsqueeze(0), z.unsqueeze(0)
        h = self.z_trunk(z)
        x = s
        for conv, head in zip(self.convs, self.film_heads):
            x = F.leaky_relu(conv(x), 0.2)
            dgamma, beta = head(h).chunk(2, dim=-1)
            x = film_modulate(x, 1.0 + dgamma, beta)
        out = torch.tanh(self.out_conv(x))
        return out.squeeze(0) if squeeze else out


class SpadeModulation(nn.Module):
    """Instance normalisation followed by spatial modulation from the factor.

    The modulation heads are zero-initialised, so at initialisation the layer
    reduces to plain instance normalisation (gamma 1, beta 0).
    """

    def __init__(self, feat_channels: int, cond_channels: int, hidden: int = 32):
        super().__init__()
        self.shared = nn.Conv2d(cond_channels, hidden, 3, padding=1)
        self.gamma_head = nn.Conv2d(hidden, feat_channels, 3, padding=1)
        self.beta_head = nn.Conv2d(hidden, feat_channels, 3, padding=1)
        nn.init.zeros_(self.gamma_head.weight)
        nn.init.zeros_(self.gamma_head.bias)
        nn.init.zeros_(self.beta_head.weight)
        nn.init.zeros_(self.beta_head.bias)

    def modulation(self, cond: torch.Tensor):
        h = F.relu(self.shared(cond))
        return 1.0 + self.gamma_head(h), self.beta_head(h)

    def forward(self, feat: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != feat.shape[-2:]:
            # nearest-neighbour keeps the conditioning factor binary
            cond = F.interpolate(cond, size=feat.shape[-2:], mode="nearest")
        normalized = instance_normalize(feat)
        gamma, beta = self.modulation(cond)
        return gamma * normalized + beta


def instance_normalize(feat: torch.Tensor, eps: float = INSTANCE_EPS) -> torch.Tensor:
    """Zero-mean unit-variance per sample and channel over the spatial dims."""
    mu = feat.mean(dim=(-2, -1), keepdim=True)
    var = feat.var(dim=(-2, -1), keepdim=True, unbiased=False)
    return (feat - mu) / torch.sqrt(var + eps)


class SPADEDecoder(nn.Module):
    """Upsampling stack seeded from z, denormalised by the anatomy factor."""

    def __init__(self, anatomy_channels: int, z_dim: int, width: int = 32,
                 start_resolution: int = 8, n_ups: int = 3):
        super().__init__()
        self.kind = "spade"
        self.start_resolution = start_resolution
        self.width = width
        self.fc = nn.Linear(z_dim, width * start_resolution * start_resolution)
        self.blocks = nn.ModuleList()
        self.mods = nn.ModuleList()
        for _ in range(n_ups):
            self.mods.append(SpadeModulation(width, anatomy_channels))
            self.blocks.append(nn.Conv2d(width, width, 3, padding=1))
        self.final_mod = SpadeModulation(width, anatomy_channels)
        self.out_conv = nn.Conv2d(width, 1, 3, padding=1)

    def forward(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        squeeze = s.dim() == 3
        if squeeze:
            s, z = s.unsqueeze(0), z.unsqueeze(0)
        r = self.start_resolution
        x = self.fc(z).view(-1, self.width, r, r)
        for mod, conv in zip(self.mods, self.blocks):
            x = F.leaky_relu(mod(x, s), 0.2)
            x = conv(x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.final_mod(x, s), 0.2)
        if x.shape[-2:] != s.shape[-2:]:
            x = F.interpolate(x, size=s.shape[-2:], mode="nearest")
        out = torch.tanh(self.out_conv(x))
        return out.squeeze(0) if squeeze else out


def make_decoder(kind: str, anatomy_channels: int, z_dim: int, width: int = 32) -> nn.Module:
    if kind == "film":
        return FiLMDecoder(anatomy_channels, z_dim, width)
    if kind == "spade":
        return SPADEDecoder(anatomy_channels, z_dim, width)
    raise ValueError(f"unknown decoder kind: {kind!r}")
