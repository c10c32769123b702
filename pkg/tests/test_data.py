import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fuseseg.data import (
    PhantomConfig,
    expand_candidates,
    generate_phantom_dataset,
    load_dataset,
    rescale_intensities,
    save_dataset,
    shuffle_pairs,
    split_dataset,
    subsample_annotations,
)
from fuseseg.evaluation import copy_baseline, dice_score


class TestRescale:
    def test_linear_map(self):
        out = rescale_intensities(np.arange(101, dtype=np.float64))
        assert out[0] == -1.0 and out[-1] == 1.0
        assert out[50] == 0.0

    def test_already_scaled_unchanged(self):
        v = np.array([-1.0, 1.0, 0.5, -0.25])
        assert np.array_equal(rescale_intensities(v), v.astype(np.float32))

    def test_constant_volume_rejected(self):
        with pytest.raises(ValueError, match="degenerate volume"):
            rescale_intensities(np.full((3, 3), 5.0))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            rescale_intensities(np.array([0.0, np.nan, 1.0]))

    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=40).filter(
        lambda v: max(v) > min(v)))
    @settings(max_examples=50, deadline=None)
    def test_range_property(self, values):
        out = rescale_intensities(np.array(values))
        assert out.min() == -1.0 and out.max() == 1.0


class TestPhantom:
    def test_sample_invariants(self, tiny_dataset):
        for s in tiny_dataset.samples:
            assert s.pixels.min() >= -1.0 and s.pixels.max() <= 1.0
            assert s.mask is not None
            assert (s.mask.sum(axis=-1) == 1).all()
            assert s.mask.shape[-1] == tiny_dataset.n_classes

    def test_every_subject_in_all_modalities(self, tiny_dataset):
        for sub in tiny_dataset.subjects():
            for mod in range(tiny_dataset.n_modalities):
                assert len(tiny_dataset.volume(sub, mod)) == 3

    def test_deterministic_generation(self, tiny_dataset):
        cfg = PhantomConfig(image_size=32, n_subjects=8, slices_per_subject=3,
                            misalignment_amplitude=0.06, noise_sigma=0.03, seed=11)
        again = generate_phantom_dataset(cfg)
        for a, b in zip(tiny_dataset.samples, again.samples):
            assert np.array_equal(a.pixels, b.pixels)
            assert np.array_equal(a.mask, b.mask)

    def test_zero_misalignment_identical_masks(self, aligned_dataset):
        ds = aligned_dataset
        assert ds.recorded_copy_dice == 1.0
        for sub in ds.subjects():
            for a, b in zip(ds.volume(sub, 0), ds.volume(sub, 1)):
                assert np.array_equal(a.mask, b.mask)
                assert dice_score(a.mask, b.mask).min() == 1.0

    def test_recorded_copy_matches_evaluation(self, tiny_dataset):
        report = copy_baseline(tiny_dataset)
        assert tiny_dataset.recorded_copy_dice == pytest.approx(report.mean, abs=1e-12)
        assert report.mean < 1.0

    def test_size_validation(self):
        with pytest.raises(ValueError):
            generate_phantom_dataset(PhantomConfig(image_size=16))
        with pytest.raises(ValueError):
            generate_phantom_dataset(PhantomConfig(slices_per_subject=0))
        with pytest.raises(ValueError):
            generate_phantom_dataset(PhantomConfig(misalignment_amplitude=0.3))

    def test_papillary_blobs_have_distinct_intensity(self, tiny_dataset):
        # ventricle-mask pixels are not all one intensity: the papillary
        # blobs share the label but not the signal
        spreads = []
        for sub in tiny_dataset.subjects():
            s = tiny_dataset.volume(sub, 0)[1]
            inside = s.pixels[s.mask[..., 1] == 1]
            spreads.append(inside.max() - inside.min())
        assert np.median(spreads) > 0.3


class TestSplit:
    def test_70_15_15(self, tiny_dataset):
        cfg = PhantomConfig(image_size=32, n_subjects=20, slices_per_subject=1, seed=3)
        ds = generate_phantom_dataset(cfg)
        train, val, test = split_dataset(ds, 0)
        assert (len(train.subjects()), len(val.subjects()), len(test.subjects())) == (14, 3, 3)

    def test_remainder_to_test(self):
        cfg = PhantomConfig(image_size=32, n_subjects=10, slices_per_subject=1, seed=3)
        ds = generate_phantom_dataset(cfg)
        train, val, test = split_dataset(ds, 0)
        assert (len(train.subjects()), len(val.subjects()), len(test.subjects())) == (7, 1, 2)

    def test_partition_and_fold_rotation(self, tiny_dataset):
        tests = []
        all_subjects = set(tiny_dataset.subjects())
        for fold in (0, 1, 2):
            train, val, test = split_dataset(tiny_dataset, fold)
            parts = [set(train.subjects()), set(val.subjects()), set(test.subjects())]
            assert parts[0] | parts[1] | parts[2] == all_subjects
            assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            tests.append(set(test.subjects()))
        assert not (tests[0] & tests[1])
        assert not (tests[1] & tests[2])

    def test_too_few_subjects(self):
        cfg = PhantomConfig(image_size=32, n_subjects=6, slices_per_subject=1, seed=3)
        ds = generate_phantom_dataset(cfg)
        with pytest.raises(ValueError):
            split_dataset(ds, 0)
        with pytest.raises(ValueError):
            split_dataset(generate_phantom_dataset(
                PhantomConfig(image_size=32, n_subjects=8, slices_per_subject=1, seed=3)), 3)


class TestSubsample:
    def test_identity_at_full_fraction(self, tiny_dataset):
        out = subsample_annotations(tiny_dataset, 1.0, target_modality=1)
        assert all(s.annotated for s in out.samples)

    def test_zero_fraction(self, tiny_dataset):
        out = subsample_annotations(tiny_dataset, 0.0, target_modality=1)
        target = [s for s in out.samples if s.modality_id == 1]
        assert not any(s.annotated for s in target)
        source = [s for s in out.samples if s.modality_id == 0]
        assert all(s.annotated for s in source)

    def test_exact_count_and_subject_level(self):
        cfg = PhantomConfig(image_size=32, n_subjects=10, slices_per_subject=2, seed=3)
        ds = generate_phantom_dataset(cfg)
        out = subsample_annotations(ds, 0.5, target_modality=1, seed=4)
        per_subject = {}
        for s in out.samples:
            if s.modality_id == 1:
                per_subject.setdefault(s.subject_id, set()).add(s.annotated)
        assert all(len(v) == 1 for v in per_subject.values())
        annotated = [sub for sub, v in per_subject.items() if v == {True}]
        assert len(annotated) == 5

    def test_deterministic(self, tiny_dataset):
        a = subsample_annotations(tiny_dataset, 0.25, 1, seed=9)
        b = subsample_annotations(tiny_dataset, 0.25, 1, seed=9)
        assert [s.annotated for s in a.samples] == [s.annotated for s in b.samples]

    def test_range_check(self, tiny_dataset):
        with pytest.raises(ValueError):
            subsample_annotations(tiny_dataset, 1.5, 1)


class TestShufflePairs:
    def test_offset_zero_identity(self, tiny_dataset):
        out = shuffle_pairs(tiny_dataset, 0)
        assert out.pairing == tiny_dataset.pairing

    def test_displacement_bound(self, tiny_dataset):
        out = shuffle_pairs(tiny_dataset, 2, seed=3)
        for (sub, mi, t, mj), cands in out.pairing.items():
            assert len(cands) == 1
            assert abs(cands[0] - t) <= 2

    def test_is_permutation(self, tiny_dataset):
        out = shuffle_pairs(tiny_dataset, 2, seed=3)
        for sub in out.subjects():
            images = [out.pairing[(sub, 0, t, 1)][0] for t in range(3)]
            assert sorted(images) == [0, 1, 2]
            # reverse direction is the inverse permutation
            for t in range(3):
                assert out.pairing[(sub, 1, images[t], 0)][0] == t

    def test_copy_dice_drops(self, tiny_dataset):
        expert = copy_baseline(tiny_dataset).mean
        shuffled = copy_baseline(shuffle_pairs(tiny_dataset, 2, seed=3)).mean
        assert shuffled < expert


class TestExpandCandidates:
    def test_window(self, tiny_dataset):
        out = expand_candidates(tiny_dataset, 3)
        for (sub, mi, t, mj), cands in out.pairing.items():
            assert len(cands) == 3
            assert tiny_dataset.pairing[(sub, mi, t, mj)][0] in cands
            assert cands == sorted(cands)
            assert min(cands) >= 0 and max(cands) < 3


class TestDiskFormat:
    def test_roundtrip(self, tiny_dataset, tmp_path):
        save_dataset(tiny_dataset, tmp_path / "ds")
        loaded = load_dataset(tmp_path / "ds")
        assert loaded.n_modalities == tiny_dataset.n_modalities
        assert loaded.n_classes == tiny_dataset.n_classes
        assert loaded.recorded_copy_dice == pytest.approx(tiny_dataset.recorded_copy_dice)
        assert loaded.pairing == tiny_dataset.pairing
        for a, b in zip(tiny_dataset.samples, loaded.samples):
            assert np.array_equal(a.pixels, b.pixels)
            assert np.array_equal(a.mask, b.mask)
            assert a.annotated == b.annotated

    def test_raw_files_are_plain(self, aligned_dataset, tmp_path):
        save_dataset(aligned_dataset, tmp_path / "ds")
        d = tmp_path / "ds" / "s000" / "mod0"
        raw = np.fromfile(d / "image.raw", dtype="<f4")
        assert raw.size == 2 * 32 * 32
        meta = dict(
            line.split("=", 1) for line in (d / "meta.txt").read_text().splitlines()
        )
        assert meta["height"] == "32" and meta["classes"] == "3"

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")
