"""Multimodal dataset model, synthetic phantom generator and on-disk format.

Phantoms stand in for paired clinical acquisitions: each subject is a stack
of slices showing an elliptical "ventricle" (with papillary-like blobs that
share the ventricle label but not its intensity) inside a "myocardium"
annulus, rendered in two modalities with distinct intensity profiles. The
second modality's geometry is displaced by a random smooth warp so the two
modalities are misaligned by a controlled amount, and each modality's
ground-truth masks follow its own geometry.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .warp import tps_displacement

DEFAULT_PROFILES = (
    {"background": 0.15, "pool": 0.85, "papillary": 0.40, "myocardium": 0.50},
    {"background": 0.30, "pool": 0.95, "papillary": 0.60, "myocardium": 0.05},
)

# class layout: 0 background, 1 ventricle (pool + papillary), 2 myocardium
N_CLASSES = 3


@dataclass
class ImageSample:
    """One 2D slice of one modality; pixels in [-1, 1], mask one-hot if present."""

    pixels: np.ndarray
    subject_id: str
    slice_index: int
    modality_id: int
    mask: np.ndarray | None = None
    annotated: bool = False

    def validate(self):
        if self.pixels.min() < -1.0 - 1e-6 or self.pixels.max() > 1.0 + 1e-6:
            raise ValueError("pixel values outside [-1, 1]")
        if self.mask is not None:
            sums = self.mask.sum(axis=-1)
            if not np.all(sums == 1):
                raise ValueError("mask channels must sum to 1 per pixel")
        if self.slice_index < 0:
            raise ValueError("negative slice index")


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_subjects: int = 20
    slices_per_subject: int = 8
    misalignment_amplitude: float = 0.1
    intensity_profiles: tuple = DEFAULT_PROFILES
    noise_sigma: float = 0.03
    seed: int = 0

    def validate(self):
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if self.slices_per_subject < 1:
            raise ValueError("slices_per_subject must be at least 1")
        if not 0.0 <= self.misalignment_amplitude <= 0.25:
            raise ValueError("misalignment_amplitude must lie in [0, 0.25]")
        if len(self.intensity_profiles) < 2:
            raise ValueError("need intensity profiles for at least two modalities")


@dataclass
class MultimodalDataset:
    """Samples plus a pairing map (subject, modality i, slice, modality j) -> candidates."""

    samples: list
    n_modalities: int
    n_classes: int
    pairing: dict = field(default_factory=dict)
    recorded_copy_dice: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._index = {
            (s.subject_id, s.modality_id, s.slice_index): s for s in self.samples
        }

    def subjects(self) -> list:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.subject_id, None)
        return sorted(seen)

    def get(self, subject_id: str, modality_id: int, slice_index: int) -> ImageSample:
        return self._index[(subject_id, modality_id, slice_index)]

    def volume(self, subject_id: str, modality_id: int) -> list:
        out = [s for s in self.samples
               if s.subject_id == subject_id and s.modality_id == modality_id]
        return sorted(out, key=lambda s: s.slice_index)

    def paired_candidates(self, subject_id: str, modality_id: int,
                          slice_index: int, other_modality: int) -> list:
        key = (subject_id, modality_id, slice_index, other_modality)
        if key in self.pairing:
            return list(self.pairing[key])
        return [slice_index]

    def subset(self, subject_ids) -> "MultimodalDataset":
        keep = set(subject_ids)
        samples = [s for s in self.samples if s.subject_id in keep]
        pairing = {k: list(v) for k, v in self.pairing.items() if k[0] in keep}
        return MultimodalDataset(samples, self.n_modalities, self.n_classes,
                                 pairing, self.recorded_copy_dice, dict(self.meta))


def rescale_intensities(volume: np.ndarray) -> np.ndarray:
    """Linear min-max map of the whole volume onto [-1, 1]."""
    v = np.asarray(volume, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        raise ValueError("degenerate volume")
    return (2.0 * (v - lo) / (hi - lo) - 1.0).astype(np.float32)


def _subject_rng(seed: int, subject_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, subject_index]))


def _expert_pairing(subjects, n_slices, n_modalities) -> dict:
    pairing = {}
    for sub in subjects:
        for mi in range(n_modalities):
            for mj in range(n_modalities):
                if mi == mj:
                    continue
                for t in range(n_slices):
                    pairing[(sub, mi, t, mj)] = [t]
    return pairing


def _render_slice(size, geom, scale, center_shift, warp_offsets, profile,
                  texture, noise, rng):
    """Raw intensity slice plus label map for one slice of one modality."""
    xs = (np.arange(size) + 0.5) / size
    gy, gx = np.meshgrid(xs, xs, indexing="ij")
    q = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if warp_offsets is not None:
        q = q + tps_displacement(q, warp_offsets, grid_size=4)
    cx, cy = geom["center"][0] + center_shift[0], geom["center"][1] + center_shift[1]
    dx, dy = q[:, 0] - cx, q[:, 1] - cy
    cos_t, sin_t = math.cos(geom["theta"]), math.sin(geom["theta"])
    ux = (cos_t * dx + sin_t * dy) / scale
    uy = (-sin_t * dx + cos_t * dy) / scale
    a, b, wall = geom["a"], geom["b"], geom["wall"]
    r_in = np.sqrt((ux / a) ** 2 + (uy / b) ** 2)
    r_out = np.sqrt((ux / (a + wall)) ** 2 + (uy / (b + wall)) ** 2)

    labels = np.zeros(q.shape[0], dtype=np.uint8)
    labels[r_out <= 1.0] = 2
    labels[r_in <= 1.0] = 1

    region = np.full(q.shape[0], "background", dtype=object)
    region[r_out <= 1.0] = "myocardium"
    region[r_in <= 1.0] = "pool"
    for pap in geom["papillaries"]:
        inside = (np.sqrt((ux - pap[0]) ** 2 + (uy - pap[1]) ** 2) <= pap[2]) & (r_in <= 0.95)
        region[inside] = "papillary"

    raw = np.array([profile[r] for r in region], dtype=np.float64).reshape(size, size)
    # texture in acquisition space, independent of the anatomical warp
    fx, fy, phase, amp = texture
    raw += amp * np.sin(2 * math.pi * (fx * gx + fy * gy) + phase)
    raw += rng.normal(0.0, noise, size=(size, size))
    return raw, labels.reshape(size, size)


def _subject_geometry(rng) -> dict:
    a = rng.uniform(0.16, 0.22)
    b = a * rng.uniform(0.75, 1.0)
    n_pap = int(rng.integers(1, 4))
    papillaries = []
    for _ in range(n_pap):
        ang = rng.uniform(0, 2 * math.pi)
        dist = rng.uniform(0.0, 0.5)
        radius = rng.uniform(0.02, 0.035)
        papillaries.append((dist * a * math.cos(ang), dist * b * math.sin(ang), radius))
    return {
        "center": (0.5 + rng.uniform(-0.05, 0.05), 0.5 + rng.uniform(-0.05, 0.05)),
        "a": a,
        "b": b,
        "wall": rng.uniform(0.05, 0.08),
        "theta": rng.uniform(0, math.pi),
        "papillaries": papillaries,
    }


def generate_phantom_dataset(config: PhantomConfig) -> MultimodalDataset:
    """Deterministic synthetic multimodal dataset; byte-identical under one seed."""
    config.validate()
    n_mod = len(config.intensity_profiles)
    size = config.image_size
    n_slices = config.slices_per_subject
    samples = []
    subjects = [f"s{idx:03d}" for idx in range(config.n_subjects)]

    for idx, sub in enumerate(subjects):
        rng = _subject_rng(config.seed, idx)
        geom = _subject_geometry(rng)
        textures = [
            (rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0),
             rng.uniform(0, 2 * math.pi), 0.06)
            for _ in range(n_mod)
        ]
        warps = [None]
        for _ in range(1, n_mod):
            amp = config.misalignment_amplitude
            offsets = rng.uniform(-amp, amp, size=(16, 2)) if amp > 0 else None
            warps.append(offsets)

        for mod in range(n_mod):
            raws, labels = [], []
            for t in range(n_slices):
                frac = t / (n_slices - 1) if n_slices > 1 else 0.5
                scale = 0.62 + 0.64 * frac
                shift = ((t - (n_slices - 1) / 2) * 0.006,
                         (t - (n_slices - 1) / 2) * 0.009)
                raw, lab = _render_slice(
                    size, geom, scale, shift, warps[mod],
                    config.intensity_profiles[mod], textures[mod],
                    config.noise_sigma, rng,
                )
                raws.append(raw)
                labels.append(lab)
            volume = rescale_intensities(np.stack(raws))
            for t in range(n_slices):
                onehot = np.eye(N_CLASSES, dtype=np.uint8)[labels[t]]
                samples.append(ImageSample(volume[t], sub, t, mod, onehot, True))

    ds = MultimodalDataset(
        samples, n_mod, N_CLASSES,
        _expert_pairing(subjects, n_slices, n_mod),
        meta={
            "seed": str(config.seed),
            "misalignment": repr(config.misalignment_amplitude),
            "image_size": str(size),
        },
    )
    from .evaluation import copy_baseline

    ds.recorded_copy_dice = float(copy_baseline(ds).mean)
    ds.meta["copy_dice"] = repr(ds.recorded_copy_dice)
    return ds


def split_dataset(ds: MultimodalDataset, fold: int):
    """Subject-level 70/15/15 split; the remainder goes to test, folds rotate it."""
    if fold not in (0, 1, 2):
        raise ValueError("fold must be 0, 1 or 2")
    subjects = ds.subjects()
    n = len(subjects)
    if n < 7:
        raise ValueError("need at least 7 subjects to split")
    n_train = int(math.floor(0.7 * n))
    n_val = int(math.floor(0.15 * n))
    n_test = n - n_train - n_val
    start = fold * n_test
    order = subjects[start:] + subjects[:start]
    test = order[:n_test]
    val = order[n_test:n_test + n_val]
    train = order[n_test + n_val:]
    return ds.subset(train), ds.subset(val), ds.subset(test)


def subsample_annotations(ds: MultimodalDataset, fraction: float,
                          target_modality: int, seed: int = 0) -> MultimodalDataset:
    """Keep target-modality annotations for a subject-level fraction of the data.

    Ground-truth masks stay attached for evaluation; dropped subjects are
    only flagged unannotated so training ignores their target masks.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    subjects = ds.subjects()
    n_keep = int(math.floor(fraction * len(subjects) + 0.5))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
    keep = set(np.array(subjects, dtype=object)[
        rng.permutation(len(subjects))[:n_keep]
    ])
    out = copy.deepcopy(ds)
    for s in out.samples:
        if s.modality_id == target_modality and s.subject_id not in keep:
            s.annotated = False
    return out


def shuffle_pairs(ds: MultimodalDataset, offset: int, seed: int = 0) -> MultimodalDataset:
    """Displace the pairing map by up to ``offset`` slice positions per volume."""
    if offset < 0:
        raise ValueError("offset must be non-negative")
    out = copy.deepcopy(ds)
    if offset == 0:
        return out
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5FF]))
    for sub in ds.subjects():
        n_slices = len(ds.volume(sub, 0))
        for mi in range(ds.n_modalities):
            for mj in range(ds.n_modalities):
                if mj <= mi:
                    continue
                # keys in [t, t + offset + 1) cannot cross more than `offset`
                # neighbours, so every pair is displaced by at most `offset`
                keys = np.arange(n_slices) + rng.uniform(0.0, offset + 1.0, n_slices)
                sigma = np.argsort(keys, kind="stable")
                inverse = np.empty_like(sigma)
                inverse[sigma] = np.arange(n_slices)
                for t in range(n_slices):
                    out.pairing[(sub, mi, t, mj)] = [int(sigma[t])]
                    out.pairing[(sub, mj, t, mi)] = [int(inverse[t])]
    return out


def expand_candidates(ds: MultimodalDataset, k: int) -> MultimodalDataset:
    """Widen each pairing entry to a window of k candidate slices around it."""
    if k < 1:
        raise ValueError("k must be positive")
    out = copy.deepcopy(ds)
    for key, cands in ds.pairing.items():
        sub, _, _, mj = key
        n_slices = len(ds.volume(sub, mj))
        center = cands[0]
        lo = max(0, min(center - (k - 1) // 2, n_slices - k))
        window = list(range(lo, min(lo + k, n_slices)))
        out.pairing[key] = window
    return out


# ---------------------------------------------------------------------------
# on-disk format: per-volume raw little-endian arrays plus plain-text sidecars
# ---------------------------------------------------------------------------

def save_dataset(ds: MultimodalDataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sub in ds.subjects():
        for mod in range(ds.n_modalities):
            vol = ds.volume(sub, mod)
            d = root / sub / f"mod{mod}"
            d.mkdir(parents=True, exist_ok=True)
            pixels = np.stack([s.pixels for s in vol]).astype("<f4")
            pixels.tofile(d / "image.raw")
            h, w = pixels.shape[1:]
            lines = [
                f"height={h}", f"width={w}", f"slices={len(vol)}",
                f"classes={ds.n_classes}", f"subject={sub}", f"modality={mod}",
                "spacing=1.0,1.0",
                f"annotated={int(all(s.annotated for s in vol))}",
            ]
            if all(s.mask is not None for s in vol):
                labels = np.stack([np.argmax(s.mask, axis=-1) for s in vol])
                labels.astype(np.uint8).tofile(d / "mask.raw")
            (d / "meta.txt").write_text("\n".join(lines) + "\n")

    lines = [
        f"modalities={ds.n_modalities}",
        f"classes={ds.n_classes}",
        f"subjects={','.join(ds.subjects())}",
    ]
    if ds.recorded_copy_dice is not None:
        lines.append(f"copy_dice={ds.recorded_copy_dice!r}")
    for key, val in sorted(ds.meta.items()):
        lines.append(f"meta.{key}={val}")
    for key in sorted(ds.pairing):
        cands = ",".join(str(c) for c in ds.pairing[key])
        lines.append(f"pair={key[0]};{key[1]};{key[2]};{key[3]};{cands}")
    (root / "dataset.txt").write_text("\n".join(lines) + "\n")


def _parse_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def load_dataset(root) -> MultimodalDataset:
    root = Path(root)
    ds_file = root / "dataset.txt"
    if not ds_file.exists():
        raise FileNotFoundError(f"not a dataset directory: {root}")
    pairing = {}
    meta = {}
    copy_dice = None
    n_mod = n_classes = None
    subjects = []
    for line in ds_file.read_text().splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        if k == "modalities":
            n_mod = int(v)
        elif k == "classes":
            n_classes = int(v)
        elif k == "subjects":
            subjects = v.split(",") if v else []
        elif k == "copy_dice":
            copy_dice = float(v)
        elif k.startswith("meta."):
            meta[k[5:]] = v
        elif k == "pair":
            sub, mi, t, mj, cands = v.split(";")
            pairing[(sub, int(mi), int(t), int(mj))] = [
                int(c) for c in cands.split(",")
            ]
    samples = []
    for sub in subjects:
        for mod in range(n_mod):
            d = root / sub / f"mod{mod}"
            info = _parse_kv(d / "meta.txt")
            h, w = int(info["height"]), int(info["width"])
            n_slices = int(info["slices"])
            annotated = bool(int(info.get("annotated", "1")))
            pixels = np.fromfile(d / "image.raw", dtype="<f4").reshape(n_slices, h, w)
            masks = None
            if (d / "mask.raw").exists():
                labels = np.fromfile(d / "mask.raw", dtype=np.uint8).reshape(n_slices, h, w)
                masks = np.eye(n_classes, dtype=np.uint8)[labels]
            for t in range(n_slices):
                samples.append(ImageSample(
                    pixels[t], sub, t, mod,
                    masks[t] if masks is not None else None, annotated,
                ))
    ds = MultimodalDataset(samples, n_mod, n_classes, pairing, copy_dice, meta)
    return ds
