import json

import numpy as np
import pytest

from errors import DegenerateInputError, DimensionError, FormatError, ParameterError
from phantom_engine import PhantomEngine, PhantomSpec
from volume_manager import DatasetEntry, LabelVolume, PatchingConfig, Volume, VolumeManager


class TestVolumeTypes:

    def test_volume_rejects_non_finite(self):
        voxels = np.zeros((2, 2, 2))
        voxels[1, 1, 1] = np.nan
        with pytest.raises(FormatError):
            Volume(voxels)

    def test_volume_needs_three_axes(self):
        with pytest.raises(DimensionError):
            Volume(np.zeros((4, 4)))

    def test_label_above_class_count(self):
        with pytest.raises(FormatError):
            LabelVolume(np.full((2, 2, 2), 3), num_classes=3)


class TestFileIO:

    def test_round_trip_is_bit_exact(self, tmp_path):
        voxels = np.random.default_rng(0).standard_normal((8, 8, 8)).astype(np.float32)
        path = VolumeManager.save_volume(Volume(voxels, (1.0, 0.8, 0.8)), tmp_path / "scan.vol")
        loaded = VolumeManager.load_volume(path)
        assert isinstance(loaded, Volume)
        np.testing.assert_array_equal(loaded.voxels, voxels)
        assert loaded.spacing == (1.0, 0.8, 0.8)

    def test_labels_round_trip(self, tmp_path):
        labels = np.random.default_rng(1).integers(0, 4, size=(4, 5, 6))
        path = VolumeManager.save_labels(LabelVolume(labels, 4), tmp_path / "scan_seg.lbl")
        loaded = VolumeManager.load_volume(path)
        assert isinstance(loaded, LabelVolume)
        assert loaded.num_classes == 4
        np.testing.assert_array_equal(loaded.labels, labels.astype(np.uint8))

    def test_eight_voxel_file(self, tmp_path):
        (tmp_path / "tiny.vol").write_bytes(np.arange(8, dtype="<f4").tobytes())
        (tmp_path / "tiny.json").write_text(json.dumps({"dims": [2, 2, 2], "dtype": "f32le"}))
        volume = VolumeManager.load_volume(tmp_path / "tiny.vol")
        assert volume.dims == (2, 2, 2)
        assert volume.voxels[1, 1, 1] == 7.0

    def test_truncated_file(self, tmp_path):
        path = VolumeManager.save_volume(Volume(np.ones((4, 4, 4))), tmp_path / "scan.vol")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError):
            VolumeManager.load_volume(path)

    def test_unknown_dtype(self, tmp_path):
        (tmp_path / "odd.vol").write_bytes(b"\x00" * 8)
        (tmp_path / "odd.json").write_text(json.dumps({"dims": [2, 2, 2], "dtype": "i8"}))
        with pytest.raises(FormatError):
            VolumeManager.load_volume(tmp_path / "odd.vol")

    def test_explicit_header_path(self, tmp_path):
        (tmp_path / "data.bin").write_bytes(np.ones(8, dtype="<f4").tobytes())
        (tmp_path / "meta.json").write_text(json.dumps({"dims": [1, 2, 4], "dtype": "f32le"}))
        volume = VolumeManager.load_volume(tmp_path / "data.bin", tmp_path / "meta.json")
        assert volume.dims == (1, 2, 4)

    def test_manifest_round_trip(self, tmp_path):
        volume, labels = PhantomEngine.generate_phantom(PhantomSpec(dims=(8, 8, 8), seed=3))
        VolumeManager.save_volume(volume, tmp_path / "a.vol")
        VolumeManager.save_labels(labels, tmp_path / "a_seg.lbl")
        VolumeManager.save_volume(volume, tmp_path / "b.vol")
        manifest = VolumeManager.write_manifest([("a.vol", "a_seg.lbl"), ("b.vol", None)], tmp_path / "manifest.json")
        dataset = VolumeManager.read_manifest(manifest)
        assert [e.name for e in dataset] == ["a", "b"]
        np.testing.assert_array_equal(dataset[0].labels.labels, labels.labels)
        assert dataset[1].labels is None


class TestBoundingBoxCrop:

    def test_single_voxel_margin_zero(self):
        labels = np.zeros((8, 8, 8), dtype=np.uint8)
        labels[4, 4, 4] = 1
        volume, cropped = VolumeManager.bounding_box_crop(Volume(np.random.default_rng(2).random((8, 8, 8))),
                                                          LabelVolume(labels, 2), margin=0)
        assert volume.dims == (1, 1, 1)
        assert cropped.labels[0, 0, 0] == 1

    def test_all_foreground_unchanged(self):
        voxels = np.random.default_rng(3).random((5, 6, 7)).astype(np.float32)
        volume, _ = VolumeManager.bounding_box_crop(Volume(voxels), LabelVolume(np.ones((5, 6, 7)), 2))
        np.testing.assert_array_equal(volume.voxels, voxels)

    def test_intensity_threshold_without_labels(self):
        voxels = np.zeros((6, 6, 6))
        voxels[2:4, 1:3, 3:5] = 1.0
        volume, labels = VolumeManager.bounding_box_crop(Volume(voxels), margin=0)
        assert volume.dims == (2, 2, 2)
        assert labels is None

    def test_margin_clamped_to_bounds(self):
        labels = np.zeros((6, 6, 6), dtype=np.uint8)
        labels[0, 5, 2] = 1
        box = VolumeManager.bounding_box(Volume(np.zeros((6, 6, 6))), LabelVolume(labels, 2), margin=2)
        assert box == (slice(0, 3), slice(3, 6), slice(0, 5))

    def test_no_foreground(self):
        with pytest.raises(DegenerateInputError):
            VolumeManager.bounding_box_crop(Volume(np.ones((4, 4, 4))), LabelVolume(np.zeros((4, 4, 4)), 2))

    @pytest.mark.parametrize("seed", [0, 5, 11])
    def test_phantom_crop_matches_ellipsoid_box(self, seed):
        phantom = PhantomEngine.generate(PhantomSpec(dims=(32, 32, 32), seed=seed))
        margin = 1
        box = VolumeManager.bounding_box(phantom.volume, phantom.labels, margin=margin)
        for axis_slice, (lo, hi), extent in zip(box, phantom.organ.box(), phantom.volume.dims):
            assert axis_slice.start == max(lo - margin, 0)
            assert axis_slice.stop == min(hi + margin + 1, extent)


class TestResize:

    def test_same_dims_identity(self):
        voxels = np.random.default_rng(4).random((4, 5, 6)).astype(np.float32)
        np.testing.assert_array_equal(VolumeManager.resize_trilinear(Volume(voxels), (4, 5, 6)).voxels, voxels)

    def test_constant_stays_constant(self):
        out = VolumeManager.resize_trilinear(Volume(np.full((3, 4, 5), 0.25)), (7, 2, 9))
        assert out.dims == (7, 2, 9)
        np.testing.assert_allclose(out.voxels, 0.25, atol=1e-7)

    def test_ramp_upsample(self):
        ramp = np.broadcast_to(np.arange(4, dtype=np.float32), (4, 4, 4)).copy()
        out = VolumeManager.resize_trilinear(Volume(ramp), (4, 4, 8)).voxels
        interior = np.arange(1, 7)
        np.testing.assert_allclose(out[0, 0, interior], interior / 2.0 - 0.25, atol=1e-5)
        assert out[0, 0, 0] == pytest.approx(0.0)
        assert out[0, 0, 7] == pytest.approx(3.0)

    def test_matches_per_voxel_trilinear_oracle(self):
        voxels = np.random.default_rng(6).random((3, 5, 4))
        target = (5, 3, 7)

        def coords(extent_out, extent_in):
            return [min(max((o + 0.5) * extent_in / extent_out - 0.5, 0.0), extent_in - 1.0)
                    for o in range(extent_out)]

        axes = [coords(t, i) for t, i in zip(target, voxels.shape)]
        expected = np.zeros(target)
        for a, b, c in np.ndindex(*target):
            point = (axes[0][a], axes[1][b], axes[2][c])
            lo = [int(np.floor(p)) for p in point]
            total = 0.0
            for corner in np.ndindex(2, 2, 2):
                idx, weight = [], 1.0
                for ax, bit in enumerate(corner):
                    frac = point[ax] - lo[ax]
                    idx.append(min(lo[ax] + bit, voxels.shape[ax] - 1))
                    weight *= frac if bit else 1.0 - frac
                total += weight * voxels[tuple(idx)]
            expected[a, b, c] = total
        out = VolumeManager.resize_trilinear(Volume(voxels), target).voxels
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_nearest_keeps_class_set(self):
        labels = np.random.default_rng(5).choice([0, 2, 5], size=(6, 6, 6))
        out = VolumeManager.resize_nearest(LabelVolume(labels, 6), (13, 4, 9))
        assert out.num_classes == 6
        assert set(np.unique(out.labels)) <= {0, 2, 5}

    def test_bad_target(self):
        with pytest.raises(DimensionError):
            VolumeManager.resize_trilinear(Volume(np.ones((2, 2, 2))), (2, 0, 2))

    def test_preprocess_output(self):
        volume, labels = PhantomEngine.generate_phantom(PhantomSpec(dims=(24, 24, 24), seed=1))
        entry = VolumeManager.preprocess(DatasetEntry("s", volume, labels), resolution=8)
        assert entry.volume.dims == (8, 8, 8)
        assert entry.labels.dims == (8, 8, 8)
        assert float(entry.volume.voxels.min()) == 0.0
        assert float(entry.volume.voxels.max()) == pytest.approx(1.0)


class TestPatches:

    def test_eight_patches_reassemble(self):
        voxels = np.arange(64, dtype=np.float32).reshape(4, 4, 4)
        config = PatchingConfig(grid=(2, 2, 2))
        patches = VolumeManager.split_patches(Volume(voxels), config)
        assert len(patches) == 8
        assert all(p.dims == (2, 2, 2) for p in patches)
        np.testing.assert_array_equal(patches[1].voxels, voxels[0:2, 0:2, 2:4])
        np.testing.assert_array_equal(VolumeManager.reassemble_patches(patches, config.grid).voxels, voxels)

    def test_single_patch_grid(self):
        voxels = np.random.default_rng(6).random((3, 5, 7)).astype(np.float32)
        patches = VolumeManager.split_patches(Volume(voxels), PatchingConfig(grid=(1, 1, 1)))
        assert len(patches) == 1
        np.testing.assert_array_equal(patches[0].voxels, voxels)

    def test_voxel_sum_conserved(self):
        voxels = np.random.default_rng(7).integers(0, 100, size=(6, 4, 8)).astype(np.float32)
        patches = VolumeManager.split_patches(Volume(voxels), PatchingConfig(grid=(3, 2, 4)))
        assert sum(float(p.voxels.sum()) for p in patches) == float(voxels.sum())

    def test_indivisible_dims(self):
        with pytest.raises(DimensionError):
            VolumeManager.split_patches(Volume(np.ones((5, 4, 4))), PatchingConfig(grid=(2, 2, 2)))

    def test_batch_size(self):
        assert PatchingConfig(grid=(2, 2, 2), scans_per_batch=4).batch_size == 32


class TestSubsets:

    def test_full_fraction_is_permutation(self):
        items = list(range(20))
        subset = VolumeManager.subset_fraction(items, 1.0, seed=3)
        assert sorted(subset) == items

    def test_pancreas_five_percent(self):
        assert len(VolumeManager.subset_fraction(list(range(197)), 0.05, seed=0)) == 10

    def test_fractions_are_nested(self):
        items = list(range(197))
        fractions = [0.05, 0.1, 0.25, 0.5, 1.0]
        subsets = [set(VolumeManager.subset_fraction(items, f, seed=9)) for f in fractions]
        for small, large in zip(subsets, subsets[1:]):
            assert small <= large

    def test_deterministic(self):
        items = list(range(50))
        assert VolumeManager.subset_fraction(items, 0.3, 4) == VolumeManager.subset_fraction(items, 0.3, 4)

    @pytest.mark.parametrize("fraction", [0.0, -0.5, 1.01])
    def test_fraction_out_of_range(self, fraction):
        with pytest.raises(ParameterError):
            VolumeManager.subset_fraction([1, 2, 3], fraction, 0)

    def test_train_test_split(self):
        items = list(range(100))
        train, test = VolumeManager.train_test_split(items, 25, seed=7, train_count=60)
        assert len(train) == 60 and len(test) == 25
        assert not set(train) & set(test)
        assert VolumeManager.train_test_split(items, 25, seed=7, train_count=60) == (train, test)
