from dataclasses import replace

import numpy as np
import pytest

from errors import SpecError
from phantom_engine import PhantomEngine, PhantomSpec


class TestGeneratePhantom:

    def test_same_seed_same_phantom(self):
        spec = PhantomSpec(dims=(16, 16, 16), seed=42)
        v1, l1 = PhantomEngine.generate_phantom(spec)
        v2, l2 = PhantomEngine.generate_phantom(spec)
        np.testing.assert_array_equal(v1.voxels, v2.voxels)
        np.testing.assert_array_equal(l1.labels, l2.labels)

    def test_different_seeds_differ(self):
        v1, _ = PhantomEngine.generate_phantom(PhantomSpec(seed=1))
        v2, _ = PhantomEngine.generate_phantom(PhantomSpec(seed=2))
        assert not np.array_equal(v1.voxels, v2.voxels)

    def test_no_tumor_when_probability_zero(self):
        for seed in range(5):
            _, labels = PhantomEngine.generate_phantom(PhantomSpec(tumor_probability=0.0, seed=seed))
            assert not np.any(labels.labels == 2)
            assert np.any(labels.labels == 1)

    @pytest.mark.parametrize("seed", range(8))
    def test_class_imbalance_ordering(self, seed):
        _, labels = PhantomEngine.generate_phantom(PhantomSpec(dims=(32, 32, 32), seed=seed))
        fractions = PhantomEngine.class_fractions(labels)
        assert fractions[2] < fractions[1] < fractions[0]
        assert fractions.sum() == pytest.approx(1.0)

    def test_lesion_inside_organ(self):
        phantom = PhantomEngine.generate(PhantomSpec(dims=(32, 32, 32), tumor_probability=1.0, seed=3))
        organ = phantom.organ.mask((32, 32, 32))
        assert np.all(organ[phantom.labels.labels == 2])

    def test_four_class_profile_nests_levels(self):
        dims = (32, 32, 32)
        phantom = PhantomEngine.generate(PhantomSpec(dims=dims, num_classes=4, tumor_probability=1.0, seed=6))
        assert len(phantom.lesions) == 2
        labels = phantom.labels.labels
        assert labels.max() <= 3
        first = phantom.lesions[0].mask(dims)
        assert np.all(first[labels == 3])
        assert np.all(phantom.organ.mask(dims)[labels >= 2])

    def test_intensities_follow_class_means(self):
        spec = PhantomSpec(dims=(32, 32, 32), seed=4)
        volume, labels = PhantomEngine.generate_phantom(spec)
        means = spec.means()
        for k in (0, 1):
            assert float(volume.voxels[labels.labels == k].mean()) == pytest.approx(means[k], abs=0.01)

    def test_organ_box_inside_volume(self):
        for seed in range(10):
            phantom = PhantomEngine.generate(PhantomSpec(dims=(16, 16, 16), seed=seed))
            for lo, hi in phantom.organ.box():
                assert 0 <= lo <= hi <= 15


class TestPhantomSpecChecks:

    def test_organ_too_large(self):
        with pytest.raises(SpecError):
            PhantomEngine.generate_phantom(PhantomSpec(dims=(16, 16, 16), organ_radius_range=(0.6, 0.7)))

    def test_single_class(self):
        with pytest.raises(SpecError):
            PhantomEngine.generate_phantom(PhantomSpec(num_classes=1))

    def test_probability_out_of_range(self):
        with pytest.raises(SpecError):
            PhantomEngine.generate_phantom(PhantomSpec(tumor_probability=1.5))

    def test_mean_count_mismatch(self):
        with pytest.raises(SpecError):
            PhantomEngine.generate_phantom(PhantomSpec(intensity_means=(0.1, 0.5)))


class TestGenerateDataset:

    def test_per_sample_seeds(self):
        spec = PhantomSpec(dims=(8, 8, 8), seed=10)
        dataset = PhantomEngine.generate_dataset(spec, count=3)
        for i, (volume, labels) in enumerate(dataset):
            expected_volume, expected_labels = PhantomEngine.generate_phantom(replace(spec, seed=10 + i))
            np.testing.assert_array_equal(volume.voxels, expected_volume.voxels)
            np.testing.assert_array_equal(labels.labels, expected_labels.labels)

    def test_worker_count_does_not_change_output(self):
        spec = PhantomSpec(dims=(8, 8, 8), seed=0)
        serial = PhantomEngine.generate_dataset(spec, count=4, workers=1)
        threaded = PhantomEngine.generate_dataset(spec, count=4, workers=4)
        for (v1, l1), (v2, l2) in zip(serial, threaded):
            np.testing.assert_array_equal(v1.voxels, v2.voxels)
            np.testing.assert_array_equal(l1.labels, l2.labels)
