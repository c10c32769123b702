"""Full segmentation model: encoders, aligner, segmentor, decoder, critics."""

from __future__ import annotations

from dataclasses import dataclass, asdict, fields

import torch
import torch.nn as nn

from .adversarial import ImageDiscriminator, MaskDiscriminator
from .decoders import Segmentor, make_decoder
from .encoders import AnatomyEncoder, ModalityEncoder, binarize_onehot
from .warp import OffsetRegressor, TpsWarper, fuse_max, tps_warp


@dataclass
class ModelConfig:
    n_modalities: int = 2
    n_classes: int = 3
    anatomy_channels: int = 8
    z_dim: int = 8
    decoder: str = "film"
    anatomy_levels: int = 3
    anatomy_width: int = 16
    decoder_width: int = 32
    segmentor_width: int = 32
    stn_width: int = 16
    disc_width: int = 16
    pair_hidden: int = 10
    use_stn: bool = True

    def to_meta(self) -> dict:
        return {f"model.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            raw = meta.get(f"model.{f.name}")
            if raw is None:
                continue
            if f.type == "bool":
                kwargs[f.name] = raw in ("True", "true", "1")
            elif f.type == "int":
                kwargs[f.name] = int(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


class PairWeightNet(nn.Module):
    """Maps per-candidate anatomy overlap scores to simplex weights.

    The same two-layer scalar map is applied to every candidate's Dice value
    (permutation equivariant), followed by a softmax across candidates, so
    equal overlaps always yield uniform weights.
    """

    def __init__(self, hidden: int = 10):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(1, hidden), nn.Tanh(), nn.Linear(hidden, 1),
        )

    def forward(self, dice: torch.Tensor) -> torch.Tensor:
        """(..., k) overlap values -> (..., k) weights summing to 1."""
        scores = self.net(dice.unsqueeze(-1)).squeeze(-1)
        return torch.softmax(scores, dim=-1)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.anatomy_channels
        self.anatomy = AnatomyEncoder(
            config.n_modalities, c, config.anatomy_levels, config.anatomy_width
        )
        self.modality = ModalityEncoder(c, config.z_dim)
        self.stn = OffsetRegressor(c, config.stn_width)
        self.segmentor = Segmentor(c, config.n_classes, config.segmentor_width)
        self.decoder = make_decoder(config.decoder, c, config.z_dim, config.decoder_width)
        self.mask_disc = MaskDiscriminator(config.n_classes, config.disc_width)
        self.image_discs = nn.ModuleList(
            ImageDiscriminator(config.disc_width) for _ in range(config.n_modalities)
        )
        self.pair_net = PairWeightNet(config.pair_hidden)
        self._warper = None

    # -- parameter groups -------------------------------------------------
    def generator_parameters(self):
        mods = [self.anatomy, self.modality, self.stn, self.segmentor,
                self.decoder, self.pair_net]
        for m in mods:
            yield from m.parameters()

    def discriminator_parameters(self):
        yield from self.mask_disc.parameters()
        for d in self.image_discs:
            yield from d.parameters()

    # -- forward pieces ----------------------------------------------------
    def warper_for(self, s: torch.Tensor) -> TpsWarper:
        h, w = s.shape[-2], s.shape[-1]
        if self._warper is None or (self._warper.height, self._warper.width) != (h, w):
            self._warper = TpsWarper(h, w)
        return self._warper

    def predict_offsets(self, fixed: torch.Tensor, moving: torch.Tensor) -> torch.Tensor:
        """Control offsets registering ``moving`` onto ``fixed``; zero when the STN is off."""
        if not self.config.use_stn:
            shape = (fixed.shape[0], 5, 5, 2) if fixed.dim() == 4 else (5, 5, 2)
            return torch.zeros(shape, dtype=fixed.dtype, device=fixed.device)
        return self.stn(fixed, moving)

    def align(self, fixed: torch.Tensor, moving: torch.Tensor,
              binarize: bool = True) -> torch.Tensor:
        offsets = self.predict_offsets(fixed, moving)
        return tps_warp(moving, offsets, self.warper_for(fixed), binarize=binarize)

    def decode(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(s, z)

    def z_reconstruction_loss(self, s: torch.Tensor, z: torch.Tensor,
                              modality_id: int) -> torch.Tensor:
        """L1 gap between a prior draw and its re-encoding from the decoded image."""
        y = self.decode(s, z)
        s_rec = self.anatomy(y, modality_id)
        posterior = self.modality(y, s_rec)
        return (z - posterior.mean).abs().mean()

    # -- inference ---------------------------------------------------------
    @torch.no_grad()
    def infer_single(self, x: torch.Tensor, modality_id: int,
                     binary: bool = True) -> torch.Tensor:
        """Segmentation of one image from its own anatomy factor alone."""
        was_training = self.training
        self.eval()
        try:
            probs = self.segmentor(self.anatomy(x, modality_id))
        finally:
            self.train(was_training)
        return binarize_onehot(probs, through_softmax=False) if binary else probs

    @torch.no_grad()
    def infer_multi(self, x: torch.Tensor, modality_id: int, sources,
                    binary: bool = True) -> torch.Tensor:
        """Weighted segmentation of fused target and aligned source anatomies.

        ``sources`` is a list of (image, modality_id) candidates from other
        modalities; candidate weights come from anatomy-factor overlap.
        """
        if not sources:
            raise ValueError("multi-input inference needs at least one source image")
        was_training = self.training
        self.eval()
        try:
            s_t = self.anatomy(x, modality_id)
            masks, dices = [], []
            for src_x, src_mod in sources:
                s_s = self.anatomy(src_x, src_mod)
                s_s_def = self.align(s_t, s_s)
                fused = fuse_max([s_t, s_s_def])
                masks.append(self.segmentor(fused))
                dices.append(_mean_channel_dice(s_t, s_s))
            weights = self.pair_net(torch.stack(dices, dim=-1))
            stacked = torch.stack(masks, dim=0)
            if weights.dim() == 1:
                probs = torch.einsum("k...,k->...", stacked, weights)
            else:
                probs = torch.einsum("kbchw,bk->bchw", stacked, weights)
        finally:
            self.train(was_training)
        return binarize_onehot(probs, through_softmax=False) if binary else probs


def _mean_channel_dice(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Mean Dice overlap across anatomy channels; a, b binary, same shape."""
    if a.shape != b.shape:
        raise ValueError("anatomy factors must share their shape")
    inter = (a * b).sum(dim=(-2, -1))
    denom = a.sum(dim=(-2, -1)) + b.sum(dim=(-2, -1))
    dice = (2.0 * inter + eps) / (denom + eps)
    return dice.mean(dim=-1)


def compute_pair_dice(s: torch.Tensor, candidates) -> torch.Tensor:
    """Per-candidate mean channel-wise Dice overlap with ``s``; (..., k)."""
    vals = [_mean_channel_dice(s, c) for c in candidates]
    return torch.stack(vals, dim=-1)
