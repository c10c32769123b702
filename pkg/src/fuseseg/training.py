"""Training orchestration: factor extraction, cross-modal alignment, the
six-term loss under the per-sample supervision policy, adversarial updates,
pair weighting for non-expert pairings, and stochastic weight averaging.

Each training entry is one anchor image plus its candidate images from the
other modality (one candidate under expert or fixed shuffled pairing, a
window of slices under automated pairing). Anchors of both modalities are
visited every epoch, so the cross-modal terms are applied symmetrically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .adversarial import lsgan_d_loss, lsgan_g_loss
from .decoders import (
    cross_entropy_per_sample,
    dice_loss_per_sample,
    reconstruction_loss_per_sample,
)
from .encoders import kl_to_standard_normal
from .evaluation import evaluate_segmentation
from .model import ModelConfig, SegmentationModel, compute_pair_dice
from .warp import tps_warp

ABLATABLE_TERMS = ("kl", "rec", "adv_mask", "adv_image", "z_rec")
LOSS_TERMS = ("kl", "sup", "adv_mask", "rec", "adv_image", "z_rec")


@dataclass
class LossWeights:
    kl: float = 0.1
    sup: float = 10.0
    adv_mask: float = 1.0
    rec: float = 1.0
    adv_image: float = 1.0
    z_rec: float = 1.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainConfig:
    # data handling
    fold: int = 0
    target_modality: int = 1
    annotations: float = 1.0
    pairing: str = "expert"       # expert | automated | random
    shuffle_offset: int = 2       # pair displacement for automated/random
    candidates: int = 3           # candidate window in automated mode
    # model
    decoder: str = "film"
    anatomy_channels: int = 8
    z_dim: int = 8
    anatomy_levels: int = 3
    anatomy_width: int = 16
    decoder_width: int = 32
    segmentor_width: int = 32
    use_stn: bool = True
    # optimisation
    epochs: int = 100
    batch_size: int = 4
    learning_rate: float = 1e-4
    seed: int = 0
    swa_start: int = 50
    swa_cycle: int = 1
    sup_dice_weight: float = 1.0
    sup_ce_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    ablate: tuple = ()
    check_invariants: bool = False

    def model_config(self, n_modalities: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            n_modalities=n_modalities,
            n_classes=n_classes,
            anatomy_channels=self.anatomy_channels,
            z_dim=self.z_dim,
            decoder=self.decoder,
            anatomy_levels=self.anatomy_levels,
            anatomy_width=self.anatomy_width,
            decoder_width=self.decoder_width,
            segmentor_width=self.segmentor_width,
            use_stn=self.use_stn,
        )

    def effective_weights(self) -> LossWeights:
        for term in self.ablate:
            if term not in ABLATABLE_TERMS:
                raise ValueError(f"unsupported ablation: {term!r}")
        return replace(self.weights, **{t: 0.0 for t in self.ablate})


def prepare_dataset(ds, config: TrainConfig):
    """Pairing transform, subject split and annotation subsampling."""
    if config.pairing not in ("expert", "automated", "random"):
        raise ValueError(f"unknown pairing mode {config.pairing!r}")
    if config.pairing in ("automated", "random"):
        ds = data_mod.shuffle_pairs(ds, config.shuffle_offset, seed=config.seed)
    if config.pairing == "automated":
        ds = data_mod.expand_candidates(ds, config.candidates)
    train, val, test = data_mod.split_dataset(ds, config.fold)
    train = data_mod.subsample_annotations(
        train, config.annotations, config.target_modality, seed=config.seed
    )
    return train, val, test


# ---------------------------------------------------------------------------
# stochastic weight averaging
# ---------------------------------------------------------------------------

@dataclass
class SWAState:
    start_epoch: int
    cycle_length: int = 1
    running_mean: dict | None = None
    snapshot_count: int = 0

    def should_snapshot(self, epoch: int) -> bool:
        return (
            epoch >= self.start_epoch
            and (epoch - self.start_epoch) % self.cycle_length == 0
        )


def swa_update(state: SWAState, params: dict) -> SWAState:
    """Fold the current parameters into the running arithmetic mean."""
    n = state.snapshot_count
    if state.running_mean is None:
        state.running_mean = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    else:
        for k, v in params.items():
            state.running_mean[k] = (state.running_mean[k] * n + np.asarray(v)) / (n + 1)
    state.snapshot_count = n + 1
    return state


# ---------------------------------------------------------------------------
# training entries
# ---------------------------------------------------------------------------

@dataclass
class _Entry:
    x: torch.Tensor                 # (1, H, W)
    modality: int
    subject: str
    slice_index: int
    mask: torch.Tensor | None       # (L, H, W), only if usable for supervision
    cand_x: torch.Tensor            # (k, 1, H, W)
    cand_modality: int
    cand_slices: list


def build_entries(ds) -> list:
    if ds.n_modalities != 2:
        raise ValueError("training currently expects exactly two modalities")
    entries = []
    for sub in ds.subjects():
        for mod in range(2):
            other = 1 - mod
            for s in ds.volume(sub, mod):
                cands = ds.paired_candidates(sub, mod, s.slice_index, other)
                cand_imgs = [ds.get(sub, other, c) for c in cands]
                mask = None
                if s.annotated and s.mask is not None:
                    mask = torch.from_numpy(
                        np.ascontiguousarray(s.mask.transpose(2, 0, 1))
                    ).float()
                entries.append(_Entry(
                    x=torch.from_numpy(s.pixels).float().unsqueeze(0),
                    modality=mod,
                    subject=sub,
                    slice_index=s.slice_index,
                    mask=mask,
                    cand_x=torch.stack([
                        torch.from_numpy(c.pixels).float().unsqueeze(0)
                        for c in cand_imgs
                    ]),
                    cand_modality=other,
                    cand_slices=list(cands),
                ))
    ks = {e.cand_x.shape[0] for e in entries}
    if len(ks) != 1:
        raise ValueError("all entries must carry the same candidate count")
    return entries


def encode_anatomy_batch(anatomy, x: torch.Tensor, modalities) -> torch.Tensor:
    """Encode a batch whose samples may belong to different modalities."""
    groups = {}
    for i, m in enumerate(modalities):
        groups.setdefault(int(m), []).append(i)
    slots = [None] * len(modalities)
    for m in sorted(groups):
        idx = groups[m]
        encoded = anatomy(x[idx], m)
        for j, i in enumerate(idx):
            slots[i] = encoded[j]
    return torch.stack(slots)


def _assert_onehot(s: torch.Tensor):
    binary = ((s == 0) | (s == 1)).all()
    sums = s.sum(dim=-3)
    if not binary or not torch.allclose(sums, torch.ones_like(sums)):
        raise AssertionError("anatomy factor violates the one-hot invariant")


class Trainer:
    def __init__(self, model: SegmentationModel, train_ds, val_ds,
                 config: TrainConfig):
        self.model = model
        self.config = config
        self.loss_weights = config.effective_weights()
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.entries = build_entries(train_ds)
        if not self.entries:
            raise ValueError("no training entries")
        self.k = self.entries[0].cand_x.shape[0]

        self.opt_g = torch.optim.Adam(model.generator_parameters(), lr=config.learning_rate)
        self.opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=config.learning_rate)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
        self.noise_gen = torch.Generator().manual_seed(config.seed + 2)
        self.swa = SWAState(config.swa_start, config.swa_cycle)

        self._mask_pool = [e.mask for e in self.entries if e.mask is not None]
        self._image_pool = {m: [] for m in range(2)}
        for e in self.entries:
            self._image_pool[e.modality].append(e.x)

    # -- one optimisation step ---------------------------------------------
    def training_step(self, batch, update: bool = True) -> dict:
        """One generator and one discriminator update on a list of entries.

        Returns the unweighted loss breakdown plus the total; with
        ``update=False`` only the losses are computed.
        """
        if not batch:
            raise ValueError("empty batch")
        cfg = self.config
        w = self.loss_weights
        model = self.model
        b = len(batch)
        k = self.k

        x = torch.stack([e.x for e in batch])
        mods = [e.modality for e in batch]
        cand_x = torch.cat([e.cand_x for e in batch])          # (B*k, 1, H, W)
        cand_mods = [e.cand_modality for e in batch for _ in range(k)]

        s = encode_anatomy_batch(model.anatomy, x, mods)
        if cfg.check_invariants:
            _assert_onehot(s)
        posterior = model.modality(x, s)
        eps = torch.randn(b, cfg.z_dim, generator=self.noise_gen)
        z = posterior.sample(eps)

        s_cand = encode_anatomy_batch(model.anatomy, cand_x, cand_mods)
        s_rep = s.repeat_interleave(k, dim=0)
        offsets = model.predict_offsets(s_rep, s_cand)
        warper = model.warper_for(s)
        s_def = tps_warp(s_cand, offsets, warper)               # (B*k, C, H, W)

        pair_dice = compute_pair_dice(
            s, list(s_cand.view(b, k, *s_cand.shape[1:]).unbind(dim=1))
        )
        pair_w = model.pair_net(pair_dice)                      # (B, k)

        seg = model.segmentor(s)
        seg_def = model.segmentor(s_def)

        # supervised: anchors with masks supervise their own factor and the
        # deformed candidate factors (the cross-modal training signal)
        annotated = [i for i, e in enumerate(batch) if e.mask is not None]
        terms = {}
        if annotated:
            m = torch.stack([batch[i].mask for i in annotated])
            a_, b_ = cfg.sup_dice_weight, cfg.sup_ce_weight
            sup_self = (
                a_ * dice_loss_per_sample(seg[annotated], m)
                + b_ * cross_entropy_per_sample(seg[annotated], m)
            )
            seg_def_k = seg_def.view(b, k, *seg_def.shape[1:])
            m_rep = m.repeat_interleave(k, dim=0)
            seg_def_ann = seg_def_k[annotated].reshape(-1, *seg_def.shape[1:])
            sup_cross_flat = (
                a_ * dice_loss_per_sample(seg_def_ann, m_rep)
                + b_ * cross_entropy_per_sample(seg_def_ann, m_rep)
            )
            sup_cross = (sup_cross_flat.view(len(annotated), k) * pair_w[annotated]).sum(dim=1)
            terms["sup"] = 0.5 * (sup_self + sup_cross).mean()
        else:
            terms["sup"] = torch.zeros(())

        terms["kl"] = kl_to_standard_normal(posterior) if w.kl != 0 else torch.zeros(())

        if w.adv_mask != 0:
            g_self = lsgan_g_per_sample(model.mask_disc.score_mask(seg))
            g_def = lsgan_g_per_sample(model.mask_disc.score_mask(seg_def)).view(b, k)
            terms["adv_mask"] = 0.5 * (g_self + (g_def * pair_w).sum(dim=1)).mean()
        else:
            terms["adv_mask"] = torch.zeros(())

        need_decodes = w.rec != 0 or w.adv_image != 0
        y_self = y_cross = None
        if need_decodes:
            y_self = model.decode(s, z)
            z_rep = z.repeat_interleave(k, dim=0)
            y_cross = model.decode(s_def, z_rep)                # styled as the anchor
        if w.rec != 0:
            rec_self = reconstruction_loss_per_sample(x, y_self)
            x_rep = x.repeat_interleave(k, dim=0)
            rec_cross = reconstruction_loss_per_sample(x_rep, y_cross).view(b, k)
            terms["rec"] = 0.5 * (rec_self + (rec_cross * pair_w).sum(dim=1)).mean()
        else:
            terms["rec"] = torch.zeros(())

        if w.adv_image != 0:
            g_img_self = torch.zeros(b)
            g_img_cross = torch.zeros(b * k)
            for m_id in set(mods):
                idx = [i for i, mm in enumerate(mods) if mm == m_id]
                g_img_self[idx] = lsgan_g_per_sample(model.image_discs[m_id](y_self[idx]))
                idx_k = [i * k + j for i in idx for j in range(k)]
                g_img_cross[idx_k] = lsgan_g_per_sample(model.image_discs[m_id](y_cross[idx_k]))
            terms["adv_image"] = 0.5 * (
                g_img_self + (g_img_cross.view(b, k) * pair_w).sum(dim=1)
            ).mean()
        else:
            terms["adv_image"] = torch.zeros(())

        if w.z_rec != 0:
            z_prior = torch.randn(b, cfg.z_dim, generator=self.noise_gen)
            y_prior = model.decode(s, z_prior)
            s_rec = encode_anatomy_batch(model.anatomy, y_prior, mods)
            post_rec = model.modality(y_prior, s_rec)
            terms["z_rec"] = (z_prior - post_rec.mean).abs().mean()
        else:
            z_prior = torch.randn(b, cfg.z_dim, generator=self.noise_gen)
            y_prior = None
            terms["z_rec"] = torch.zeros(())

        total = (
            w.kl * terms["kl"] + w.sup * terms["sup"] + w.adv_mask * terms["adv_mask"]
            + w.rec * terms["rec"] + w.adv_image * terms["adv_image"]
            + w.z_rec * terms["z_rec"]
        )

        if update:
            for p in model.discriminator_parameters():
                p.requires_grad_(False)
            self.opt_g.zero_grad(set_to_none=True)
            total.backward()
            self.opt_g.step()
            for p in model.discriminator_parameters():
                p.requires_grad_(True)

        # discriminator phase on detached fakes
        d_mask = torch.zeros(())
        d_image = torch.zeros(())
        if w.adv_mask != 0 and self._mask_pool:
            reals = self._draw_masks(b)
            fake = torch.cat([seg.detach(), seg_def.detach()])
            d_mask = lsgan_d_loss(
                model.mask_disc.score_mask(reals), model.mask_disc.score_mask(fake)
            )
        if w.adv_image != 0:
            parts = []
            for m_id in set(mods):
                idx = [i for i, mm in enumerate(mods) if mm == m_id]
                idx_k = [i * k + j for i in idx for j in range(k)]
                fake = torch.cat([y_self[idx].detach(), y_cross[idx_k].detach()])
                reals = self._draw_images(m_id, len(idx))
                parts.append(lsgan_d_loss(model.image_discs[m_id](reals),
                                          model.image_discs[m_id](fake)))
            d_image = sum(parts) / len(parts)
        d_total = d_mask + d_image

        if update and (w.adv_mask != 0 or w.adv_image != 0):
            self.opt_d.zero_grad(set_to_none=True)
            d_total.backward()
            self.opt_d.step()

        out = {name: float(terms[name].detach()) for name in LOSS_TERMS}
        out["total"] = float(total.detach())
        out["d_mask"] = float(d_mask.detach())
        out["d_image"] = float(d_image.detach())
        return out

    def _draw_masks(self, n: int) -> torch.Tensor:
        idx = self.rng.integers(0, len(self._mask_pool), size=n)
        return torch.stack([self._mask_pool[i] for i in idx])

    def _draw_images(self, modality: int, n: int) -> torch.Tensor:
        pool = self._image_pool[modality]
        idx = self.rng.integers(0, len(pool), size=n)
        return torch.stack([pool[i] for i in idx])

    # -- epochs --------------------------------------------------------------
    def run_epoch(self) -> dict:
        self.model.train()
        order = self.rng.permutation(len(self.entries))
        sums = {}
        count = 0
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            batch = [self.entries[i] for i in order[start:start + bs]]
            breakdown = self.training_step(batch)
            for k_, v in breakdown.items():
                sums[k_] = sums.get(k_, 0.0) + v
            count += 1
        return {k_: v / count for k_, v in sums.items()}

    def fit(self, out_dir=None, log=None) -> "TrainResult":
        cfg = self.config
        metrics_lines = []
        for epoch in range(1, cfg.epochs + 1):
            means = self.run_epoch()
            # single-input validation: cheap and free of pairing effects
            val = evaluate_segmentation(
                self.model, self.val_ds, cfg.target_modality, mode="single"
            )
            if self.swa.should_snapshot(epoch):
                params = {k_: v.detach().numpy().copy()
                          for k_, v in self.model.named_parameters()}
                swa_update(self.swa, params)
            fieldsets = [f"epoch={epoch}"]
            for name in ("total", *LOSS_TERMS, "d_mask", "d_image"):
                fieldsets.append(f"{name}={means[name]!r}")
            fieldsets.append(f"val_dice={val.mean!r}")
            line = " ".join(fieldsets)
            metrics_lines.append(line)
            if log:
                log(line)
        swa_model = self._swa_model()
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "metrics.txt").write_text("\n".join(metrics_lines) + "\n")
        return TrainResult(self.model, swa_model, metrics_lines, self.swa)

    def _swa_model(self):
        if self.swa.snapshot_count == 0:
            return None
        import copy as _copy

        swa_model = _copy.deepcopy(self.model)
        state = swa_model.state_dict()
        for k_, v in self.swa.running_mean.items():
            state[k_] = torch.from_numpy(v).to(state[k_].dtype)
        swa_model.load_state_dict(state)
        swa_model.eval()
        return swa_model


@dataclass
class TrainResult:
    model: SegmentationModel
    swa_model: SegmentationModel | None
    metrics_lines: list
    swa_state: SWAState

    @property
    def eval_model(self) -> SegmentationModel:
        return self.swa_model if self.swa_model is not None else self.model


def lsgan_g_per_sample(fake_scores: torch.Tensor) -> torch.Tensor:
    return (fake_scores - 1.0) ** 2


# ---------------------------------------------------------------------------
# spec-level operations reused outside the trainer
# ---------------------------------------------------------------------------

def z_reconstruction_loss(z: torch.Tensor, z_reencoded: torch.Tensor) -> torch.Tensor:
    """Mean absolute gap between a prior draw and its re-encoded estimate."""
    return (z - z_reencoded).abs().mean()


def pair_weights(pair_net, dice: torch.Tensor) -> torch.Tensor:
    """Simplex weights over candidates from their anatomy overlap scores."""
    return pair_net(dice)


def weighted_multimodal_loss(weights: torch.Tensor, losses: torch.Tensor) -> torch.Tensor:
    """Convex combination of per-candidate losses."""
    if weights.shape[-1] != losses.shape[-1]:
        raise ValueError("weight/loss length mismatch")
    return (weights * losses).sum(dim=-1)


def weighted_inference(weights: torch.Tensor, masks, binarize: bool = True) -> torch.Tensor:
    """Pixel-wise convex combination of per-candidate masks."""
    from .encoders import binarize_onehot

    stacked = torch.stack(list(masks), dim=0)
    if weights.shape[0] != stacked.shape[0]:
        raise ValueError("weight/mask length mismatch")
    view = [weights.shape[0]] + [1] * (stacked.dim() - 1)
    probs = (weights.view(view) * stacked).sum(dim=0)
    return binarize_onehot(probs, through_softmax=False) if binarize else probs


def infer(model, x_target: torch.Tensor, target_modality: int,
          sources=None, mode: str = "single", binary: bool = True) -> torch.Tensor:
    """Segment a target image from its own factor, or fused with sources."""
    if mode == "single":
        return model.infer_single(x_target, target_modality, binary=binary)
    if mode == "multi":
        if not sources:
            raise ValueError("multi mode needs source images")
        return model.infer_multi(x_target, target_modality, sources, binary=binary)
    raise ValueError(f"unknown inference mode {mode!r}")


def pair_weight_report(model, ds, target_modality: int = 1) -> dict:
    """Mean learned weight of the candidate nearest the true pairing.

    Phantom volumes are index-aligned across modalities, so the true match of
    slice t is slice t of the other modality; the nearest candidate is the one
    minimising the index distance.
    """
    other = 1 - target_modality
    weights_nearest = []
    with torch.no_grad():
        for sub in ds.subjects():
            for s in ds.volume(sub, target_modality):
                cands = ds.paired_candidates(sub, target_modality, s.slice_index, other)
                x = torch.from_numpy(s.pixels).float().unsqueeze(0)
                s_a = model.anatomy(x, target_modality)
                s_c = [
                    model.anatomy(
                        torch.from_numpy(ds.get(sub, other, c).pixels).float().unsqueeze(0),
                        other,
                    )
                    for c in cands
                ]
                dice = compute_pair_dice(s_a, s_c)
                w = model.pair_net(dice)
                nearest = int(np.argmin([abs(c - s.slice_index) for c in cands]))
                weights_nearest.append(float(w[nearest]))
    return {
        "mean_weight_true_nearest": float(np.mean(weights_nearest)),
        "n": len(weights_nearest),
    }
