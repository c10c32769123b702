"""Test-time metrics and disentanglement analysis.

Covers the overlap metrics (per-class Dice, the mask-copy baseline that
measures raw multimodal misalignment), distance correlation between anatomy
and modality factors, the modality probe on z vectors, per-dimension latent
interpolation panels, and posterior-variance informativeness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_score(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-foreground-class Dice of two one-hot masks; empty vs empty is 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("mask shapes differ")
    n_classes = pred.shape[-1]
    out = np.zeros(n_classes - 1)
    for c in range(1, n_classes):
        a = float(pred[..., c].sum())
        b = float(gt[..., c].sum())
        if a + b == 0:
            out[c - 1] = 1.0
        else:
            inter = float((pred[..., c] * gt[..., c]).sum())
            out[c - 1] = 2.0 * inter / (a + b)
    return out


@dataclass
class DiceReport:
    per_class: np.ndarray
    mean: float
    per_subject: dict
    std_across_subjects: float
    extras: dict = field(default_factory=dict)

    def lines(self) -> list:
        out = [f"mean={self.mean:.4f}", f"std_subjects={self.std_across_subjects:.4f}"]
        for i, v in enumerate(self.per_class):
            out.append(f"class{i + 1}={v:.4f}")
        for sub in sorted(self.per_subject):
            out.append(f"subject.{sub}={self.per_subject[sub]:.4f}")
        for k, v in sorted(self.extras.items()):
            out.append(f"{k}={v}")
        return out


def build_dice_report(per_slice: dict) -> DiceReport:
    """``per_slice`` maps subject -> list of per-class Dice vectors."""
    all_vecs = [v for vecs in per_slice.values() for v in vecs]
    per_class = np.mean(np.stack(all_vecs), axis=0)
    per_subject = {
        sub: float(np.mean(np.stack(vecs))) for sub, vecs in per_slice.items()
    }
    values = np.array(list(per_subject.values()))
    return DiceReport(
        per_class=per_class,
        mean=float(per_class.mean()),
        per_subject=per_subject,
        std_across_subjects=float(values.std()),
    )


def copy_baseline(ds) -> DiceReport:
    """Dice between the real masks of paired slices of the two modalities."""
    per_slice = {}
    target, source = 1, 0
    for sub in ds.subjects():
        vecs = []
        for s in ds.volume(sub, target):
            cand = ds.paired_candidates(sub, target, s.slice_index, source)[0]
            src = ds.get(sub, source, cand)
            if s.mask is None or src.mask is None:
                raise ValueError("copy baseline needs masks in both modalities")
            vecs.append(dice_score(src.mask, s.mask))
        per_slice[sub] = vecs
    return build_dice_report(per_slice)


def _gather_sources(ds, sub, modality_id, slice_index):
    out = []
    for other in range(ds.n_modalities):
        if other == modality_id:
            continue
        for cand in ds.paired_candidates(sub, modality_id, slice_index, other):
            out.append(ds.get(sub, other, cand))
    return out


def evaluate_segmentation(model, ds, target_modality: int = 1,
                          mode: str = "multi") -> DiceReport:
    """Dice of predicted target-modality masks against the dataset masks."""
    if mode not in ("single", "multi"):
        raise ValueError("mode must be 'single' or 'multi'")
    per_slice = {}
    for sub in ds.subjects():
        vecs = []
        for s in ds.volume(sub, target_modality):
            x = torch.from_numpy(s.pixels).float().unsqueeze(0)
            if mode == "single":
                pred = model.infer_single(x, target_modality)
            else:
                sources = [
                    (torch.from_numpy(src.pixels).float().unsqueeze(0), src.modality_id)
                    for src in _gather_sources(ds, sub, target_modality, s.slice_index)
                ]
                pred = model.infer_multi(x, target_modality, sources)
            pred_np = pred.permute(1, 2, 0).numpy()
            vecs.append(dice_score(pred_np, s.mask))
        per_slice[sub] = vecs
    return build_dice_report(per_slice)


# ---------------------------------------------------------------------------
# distance correlation
# ---------------------------------------------------------------------------

def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = (x ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.sqrt(np.maximum(d2, 0.0))


def _double_center(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=1, keepdims=True) - d.mean(axis=0, keepdims=True) + d.mean()


def distance_correlation(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Distance correlation between two sets of paired samples.

    The two variables may have different dimensionality; rows are paired
    observations. Returns 0 when either distance variance vanishes.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] != b.shape[0]:
        raise ValueError("sample counts differ")
    if a.shape[0] < 2:
        raise ValueError("need at least two samples")
    A = _double_center(_pairwise_distances(a))
    B = _double_center(_pairwise_distances(b))
    dcov2 = max(float((A * B).mean()), 0.0)
    dvar_a2 = max(float((A * A).mean()), 0.0)
    dvar_b2 = max(float((B * B).mean()), 0.0)
    if dvar_a2 == 0.0 or dvar_b2 == 0.0:
        return 0.0
    dcor = np.sqrt(dcov2) / (dvar_a2 * dvar_b2) ** 0.25
    return float(min(max(dcor, 0.0), 1.0))


def flatten_factors(factors, max_entries: int = 4096, seed: int = 0) -> np.ndarray:
    """Stack flattened anatomy factors, keeping a fixed random entry subset.

    Bounds the O(n^2) distance computation; the subset is shared across
    samples and reproducible from the seed.
    """
    flat = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in factors])
    if flat.shape[1] > max_entries:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDC0]))
        idx = np.sort(rng.permutation(flat.shape[1])[:max_entries])
        flat = flat[:, idx]
    return flat


def model_distance_correlation(model, ds, max_entries: int = 4096, seed: int = 0) -> float:
    """dCor between anatomy factors and posterior-mean modality factors."""
    factors, zs = [], []
    with torch.no_grad():
        for s in ds.samples:
            x = torch.from_numpy(s.pixels).float().unsqueeze(0)
            anat = model.anatomy(x, s.modality_id)
            post = model.modality(x, anat)
            factors.append(anat.numpy())
            zs.append(post.mean.numpy())
    S = flatten_factors(factors, max_entries, seed)
    Z = np.stack(zs)
    return distance_correlation(S, Z)


# ---------------------------------------------------------------------------
# modality probe (ridge-regularised linear classifier)
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    overall: float
    per_dimension: np.ndarray


def _ridge_accuracy(X, y, train_idx, test_idx, lam):
    X1 = np.concatenate([X, np.ones((X.shape[0], 1))], axis=1)
    A = X1[train_idx]
    w = np.linalg.solve(A.T @ A + lam * np.eye(A.shape[1]), A.T @ y[train_idx])
    pred = np.sign(X1[test_idx] @ w)
    pred[pred == 0] = 1.0
    return float((pred == y[test_idx]).mean())


def modality_probe(Z: np.ndarray, labels: np.ndarray, seed: int = 0,
                   lam: float = 1e-3, test_fraction: float = 0.2) -> ProbeReport:
    """Accuracy of a linear probe predicting the modality from z vectors.

    Fits a ridge-regularised linear classifier on a held-out split, overall
    and once per single dimension.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("probe needs at least two classes")
    if len(classes) != 2:
        raise ValueError("only binary probes are supported")
    y = np.where(labels == classes[0], -1.0, 1.0)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9806]))
    train_idx, test_idx = [], []
    # stratified split keeps both classes on each side
    for cls in (-1.0, 1.0):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        n_test = max(1, int(round(test_fraction * len(idx))))
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx = np.array(sorted(train_idx))
    test_idx = np.array(sorted(test_idx))

    overall = _ridge_accuracy(Z, y, train_idx, test_idx, lam)
    per_dim = np.array([
        _ridge_accuracy(Z[:, d:d + 1], y, train_idx, test_idx, lam)
        for d in range(Z.shape[1])
    ])
    return ProbeReport(overall=overall, per_dimension=per_dim)


def model_modality_probe(model, ds, seed: int = 0) -> ProbeReport:
    zs, labels = [], []
    with torch.no_grad():
        for s in ds.samples:
            x = torch.from_numpy(s.pixels).float().unsqueeze(0)
            anat = model.anatomy(x, s.modality_id)
            post = model.modality(x, anat)
            zs.append(post.mean.numpy())
            labels.append(s.modality_id)
    return modality_probe(np.stack(zs), np.array(labels), seed=seed)


# ---------------------------------------------------------------------------
# latent interpolation panel
# ---------------------------------------------------------------------------

@dataclass
class InterpolationPanel:
    images: np.ndarray        # (steps, H, W)
    z_values: np.ndarray      # (steps,)
    correlation: np.ndarray   # (H, W), Pearson r of intensity against z
    delta_image: np.ndarray   # (H, W), difference between the extremes


def pearson_map(z_values: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Per-pixel Pearson correlation with z; constant pixels map to 0."""
    z = z_values - z_values.mean()
    imgs = images - images.mean(axis=0, keepdims=True)
    num = np.tensordot(z, imgs, axes=(0, 0))
    denom = np.sqrt((z ** 2).sum()) * np.sqrt((imgs ** 2).sum(axis=0))
    out = np.zeros_like(num)
    ok = denom > 1e-12
    out[ok] = num[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def latent_interpolation_panel(model, sample, dim: int, steps: int = 7,
                               z_range: float = 3.0) -> InterpolationPanel:
    z_dim = model.config.z_dim
    if not 0 <= dim < z_dim:
        raise ValueError(f"dimension {dim} out of range for z_dim={z_dim}")
    x = torch.from_numpy(sample.pixels).float().unsqueeze(0)
    with torch.no_grad():
        s = model.anatomy(x, sample.modality_id)
        post = model.modality(x, s)
        base = post.mean
        values = np.linspace(-z_range, z_range, steps)
        images = []
        for v in values:
            z = base.clone()
            z[dim] = float(v)
            images.append(model.decode(s, z).squeeze(0).numpy())
    images = np.stack(images)
    return InterpolationPanel(
        images=images,
        z_values=values,
        correlation=pearson_map(values, images),
        delta_image=images[-1] - images[0],
    )


def panel_to_image(panel: InterpolationPanel) -> np.ndarray:
    """Lay out interpolations, correlation and delta as one uint8 image row."""
    cells = [((img + 1.0) / 2.0) for img in panel.images]
    cells.append((panel.correlation + 1.0) / 2.0)
    d = panel.delta_image
    span = max(float(np.abs(d).max()), 1e-6)
    cells.append((d / span + 1.0) / 2.0)
    row = np.concatenate(cells, axis=1)
    return (np.clip(row, 0.0, 1.0) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# z informativeness
# ---------------------------------------------------------------------------

def z_informativeness(model, ds) -> np.ndarray:
    """Mean posterior variance per z dimension; lower means more informative."""
    variances = []
    with torch.no_grad():
        for s in ds.samples:
            x = torch.from_numpy(s.pixels).float().unsqueeze(0)
            anat = model.anatomy(x, s.modality_id)
            post = model.modality(x, anat)
            variances.append((post.stddev ** 2).numpy())
    return np.mean(np.stack(variances), axis=0)
