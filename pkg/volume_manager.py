"""
VOLUME MANAGER
The volumetric data model: scans, label maps, file I/O and preprocessing.

Handles:
1. Volume / LabelVolume containers and their .vol/.lbl + .json files
2. Dataset manifests (volume path + optional label path)
3. Bounding-box crop, trilinear / nearest resize, min-max normalization
4. Non-overlapping patch splitting and reassembly
5. Nested label-fraction subsets and the seeded train/test split
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from errors import DegenerateInputError, DimensionError, FormatError, ParameterError

logger = logging.getLogger("VOLUME_MANAGER")

DTYPES = {
    "f32le": np.dtype("<f4"),
    "u8": np.dtype("u1"),
}


@dataclass
class Volume:
    """A 3D scalar field of intensities"""
    voxels: np.ndarray
    spacing: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DimensionError(f"Volume needs three extents >= 1, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise FormatError("Volume contains non-finite voxels")

    @property
    def dims(self):
        return self.voxels.shape


@dataclass
class LabelVolume:
    """Voxel-wise class indices in [0, num_classes)"""
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise DimensionError(f"LabelVolume needs three extents >= 1, got {self.labels.shape}")
        if self.num_classes < 1 or self.num_classes > 256:
            raise ParameterError(f"num_classes {self.num_classes} outside [1, 256]")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise FormatError(f"label {int(self.labels.max())} >= num_classes {self.num_classes}")

    @property
    def dims(self):
        return self.labels.shape


@dataclass(frozen=True)
class PatchingConfig:
    grid: Tuple[int, int, int] = (2, 2, 2)
    scans_per_batch: int = 4

    @property
    def num_patches(self):
        gd, gh, gw = self.grid
        return gd * gh * gw

    @property
    def batch_size(self):
        return self.scans_per_batch * self.num_patches

    def patch_dims(self, dims):
        self.check(dims)
        return tuple(d // g for d, g in zip(dims, self.grid))

    def check(self, dims):
        if any(g < 1 for g in self.grid):
            raise DimensionError(f"patch grid {self.grid} must be >= 1 per axis")
        if any(d % g for d, g in zip(dims, self.grid)):
            raise DimensionError(f"volume dims {tuple(dims)} not divisible by grid {self.grid}")


@dataclass
class DatasetEntry:
    name: str
    volume: Volume
    labels: Optional[LabelVolume] = None


class VolumeManager:

    # =============================================================
    # 1. FILE I/O
    # =============================================================
    @staticmethod
    def header_path_for(path):
        return Path(path).with_suffix(".json")

    @staticmethod
    def save_volume(volume: Volume, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(volume.voxels, dtype=DTYPES["f32le"]).tobytes())
        header = {"dims": list(volume.dims), "dtype": "f32le"}
        if volume.spacing is not None:
            header["spacing"] = list(volume.spacing)
        VolumeManager.header_path_for(path).write_text(json.dumps(header, sort_keys=True))
        return path

    @staticmethod
    def save_labels(labels: LabelVolume, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(labels.labels, dtype=DTYPES["u8"]).tobytes())
        header = {"dims": list(labels.dims), "dtype": "u8", "num_classes": labels.num_classes}
        VolumeManager.header_path_for(path).write_text(json.dumps(header, sort_keys=True))
        return path

    @staticmethod
    def load_volume(path, header_path=None):
        """
        Read a raw volume described by its JSON header.
        dtype "f32le" -> Volume, dtype "u8" -> LabelVolume.
        """
        path = Path(path)
        header_path = Path(header_path) if header_path else VolumeManager.header_path_for(path)
        try:
            header = json.loads(header_path.read_text())
            dims = tuple(int(d) for d in header["dims"])
            dtype_name = header["dtype"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{header_path}: invalid volume header ({exc})") from exc
        if dtype_name not in DTYPES:
            raise FormatError(f"{header_path}: unknown dtype '{dtype_name}'")
        if len(dims) != 3 or min(dims) < 1:
            raise FormatError(f"{header_path}: dims {dims} must be three positive extents")

        dtype = DTYPES[dtype_name]
        raw = path.read_bytes()
        expected = int(np.prod(dims)) * dtype.itemsize
        if len(raw) != expected:
            raise FormatError(f"{path}: {len(raw)} bytes, header implies {expected}")
        data = np.frombuffer(raw, dtype=dtype).reshape(dims)

        if dtype_name == "u8":
            num_classes = int(header.get("num_classes", int(data.max()) + 1))
            return LabelVolume(data.copy(), num_classes)
        spacing = header.get("spacing")
        return Volume(data.astype(np.float32), tuple(spacing) if spacing else None)

    @staticmethod
    def write_manifest(pairs: Sequence[Tuple[str, Optional[str]]], path):
        path = Path(path)
        entries = [{"volume": vol, "labels": lbl} for vol, lbl in pairs]
        path.write_text(json.dumps(entries, indent=1))
        return path

    @staticmethod
    def read_manifest(path) -> List[DatasetEntry]:
        path = Path(path)
        try:
            entries = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid manifest ({exc})") from exc
        dataset = []
        for entry in entries:
            vol_path = path.parent / entry["volume"]
            volume = VolumeManager.load_volume(vol_path)
            labels = None
            if entry.get("labels"):
                labels = VolumeManager.load_volume(path.parent / entry["labels"])
                if labels.dims != volume.dims:
                    raise DimensionError(f"{entry['labels']}: dims {labels.dims} != volume {volume.dims}")
            dataset.append(DatasetEntry(Path(entry["volume"]).stem, volume, labels))
        logger.info(f"📂 MANIFEST_LOADED: {path} ({len(dataset)} scans, "
                    f"{sum(e.labels is not None for e in dataset)} annotated)")
        return dataset

    # =============================================================
    # 2. PREPROCESSING
    # =============================================================
    @staticmethod
    def minmax_normalize(voxels):
        voxels = np.asarray(voxels, dtype=np.float32)
        lo, hi = float(voxels.min()), float(voxels.max())
        if hi <= lo:
            return np.zeros_like(voxels)
        return ((voxels - lo) / (hi - lo)).astype(np.float32)

    @staticmethod
    def bounding_box(volume: Volume, labels: Optional[LabelVolume] = None, margin=1, threshold=None):
        """Tightest foreground box, grown by margin and clamped; returns one slice per axis"""
        if labels is not None:
            if labels.dims != volume.dims:
                raise DimensionError(f"labels {labels.dims} vs volume {volume.dims}")
            foreground = labels.labels > 0
        else:
            cut = float(volume.voxels.mean()) if threshold is None else threshold
            foreground = volume.voxels > cut
        if not foreground.any():
            raise DegenerateInputError("bounding_box_crop: no foreground voxel")
        box = []
        for axis, extent in enumerate(volume.dims):
            other = tuple(a for a in range(3) if a != axis)
            hits = np.flatnonzero(foreground.any(axis=other))
            box.append(slice(max(int(hits[0]) - margin, 0), min(int(hits[-1]) + margin + 1, extent)))
        return tuple(box)

    @staticmethod
    def bounding_box_crop(volume: Volume, labels: Optional[LabelVolume] = None, margin=1, threshold=None):
        box = VolumeManager.bounding_box(volume, labels, margin, threshold)
        cropped = Volume(volume.voxels[box].copy(), volume.spacing)
        cropped_labels = LabelVolume(labels.labels[box].copy(), labels.num_classes) if labels is not None else None
        return cropped, cropped_labels

    @staticmethod
    def _source_coords(out_extent, in_extent):
        # align_corners=False: centers of output voxels mapped back into the input grid
        scale = in_extent / out_extent
        return (np.arange(out_extent, dtype=np.float64) + 0.5) * scale - 0.5

    @staticmethod
    def resize_trilinear(volume: Volume, target_dims) -> Volume:
        target_dims = tuple(int(t) for t in target_dims)
        if len(target_dims) != 3 or min(target_dims) < 1:
            raise DimensionError(f"resize target {target_dims} must be three extents >= 1")
        coords = [np.clip(VolumeManager._source_coords(out_extent, in_extent), 0, in_extent - 1)
                  for out_extent, in_extent in zip(target_dims, volume.dims)]
        data = ndimage.map_coordinates(volume.voxels.astype(np.float64), np.meshgrid(*coords, indexing="ij"),
                                       order=1, mode="nearest")
        return Volume(data.astype(np.float32), volume.spacing)

    @staticmethod
    def resize_nearest(labels: LabelVolume, target_dims) -> LabelVolume:
        target_dims = tuple(int(t) for t in target_dims)
        if len(target_dims) != 3 or min(target_dims) < 1:
            raise DimensionError(f"resize target {target_dims} must be three extents >= 1")
        data = labels.labels
        for axis, (out_extent, in_extent) in enumerate(zip(target_dims, labels.dims)):
            if out_extent == in_extent:
                continue
            idx = np.floor((np.arange(out_extent) + 0.5) * in_extent / out_extent).astype(np.int64)
            data = np.take(data, np.clip(idx, 0, in_extent - 1), axis=axis)
        return LabelVolume(data.copy(), labels.num_classes)

    @staticmethod
    def preprocess(entry: DatasetEntry, resolution: int, margin=1) -> DatasetEntry:
        """Crop to the foreground box, resize to resolution^3, min-max normalize"""
        volume, labels = VolumeManager.bounding_box_crop(entry.volume, entry.labels, margin)
        target = (resolution,) * 3
        volume = VolumeManager.resize_trilinear(volume, target)
        volume = Volume(VolumeManager.minmax_normalize(volume.voxels), volume.spacing)
        if labels is not None:
            labels = VolumeManager.resize_nearest(labels, target)
        return DatasetEntry(entry.name, volume, labels)

    # =============================================================
    # 3. PATCHES
    # =============================================================
    @staticmethod
    def split_patches(volume: Volume, config: PatchingConfig) -> List[Volume]:
        """P equally-sized patches ordered row-major by grid index"""
        pd, ph, pw = config.patch_dims(volume.dims)
        gd, gh, gw = config.grid
        patches = []
        for i in range(gd):
            for j in range(gh):
                for k in range(gw):
                    block = volume.voxels[i * pd:(i + 1) * pd, j * ph:(j + 1) * ph, k * pw:(k + 1) * pw]
                    patches.append(Volume(block.copy(), volume.spacing))
        return patches

    @staticmethod
    def reassemble_patches(patches: Sequence[Volume], grid) -> Volume:
        gd, gh, gw = grid
        if len(patches) != gd * gh * gw:
            raise DimensionError(f"{len(patches)} patches for grid {tuple(grid)}")
        pd, ph, pw = patches[0].dims
        out = np.empty((gd * pd, gh * ph, gw * pw), dtype=np.float32)
        for n, patch in enumerate(patches):
            if patch.dims != (pd, ph, pw):
                raise DimensionError(f"patch {n} has dims {patch.dims}, expected {(pd, ph, pw)}")
            i, rem = divmod(n, gh * gw)
            j, k = divmod(rem, gw)
            out[i * pd:(i + 1) * pd, j * ph:(j + 1) * ph, k * pw:(k + 1) * pw] = patch.voxels
        return Volume(out, patches[0].spacing)

    # =============================================================
    # 4. SUBSETS & SPLITS
    # =============================================================
    @staticmethod
    def subset_fraction(dataset: Sequence, fraction: float, seed: int) -> list:
        """
        ceil(fraction * n) items as a prefix of one seeded permutation,
        so smaller fractions are always contained in larger ones.
        """
        if not 0.0 < fraction <= 1.0:
            raise ParameterError(f"fraction {fraction} outside (0, 1]")
        n = len(dataset)
        order = np.random.default_rng(seed).permutation(n)
        count = math.ceil(round(fraction * n, 9))
        return [dataset[int(i)] for i in order[:count]]

    @staticmethod
    def train_test_split(dataset: Sequence, test_count: int, seed: int, train_count: Optional[int] = None):
        """Seeded shuffle, then the first test_count items are held out"""
        if test_count < 0 or test_count >= len(dataset):
            raise ParameterError(f"test_count {test_count} invalid for {len(dataset)} items")
        order = np.random.default_rng(seed).permutation(len(dataset))
        test = [dataset[int(i)] for i in order[:test_count]]
        train = [dataset[int(i)] for i in order[test_count:]]
        if train_count is not None:
            train = train[:train_count]
        return train, test
