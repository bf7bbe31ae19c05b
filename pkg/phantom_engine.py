"""
PHANTOM ENGINE
Synthetic stand-in for annotated abdominal / brain scans.

Rules:
1. One ellipsoidal organ (class 1) at a random integer center, fully inside the volume
2. With tumor_probability, a smaller lesion ellipsoid (class 2) inside the organ
3. num_classes > 3 nests further lesion levels (class 3, 4, ...) inside the previous one
4. Intensity = class mean + Gaussian noise
5. Everything is a function of the seed
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from errors import SpecError
from volume_manager import LabelVolume, Volume

logger = logging.getLogger("PHANTOM_ENGINE")


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int] = (16, 16, 16)
    num_classes: int = 3
    organ_radius_range: Tuple[float, float] = (0.18, 0.30)
    tumor_radius_range: Tuple[float, float] = (0.06, 0.12)
    tumor_probability: float = 0.8
    intensity_means: Optional[Tuple[float, ...]] = None
    noise_sigma: float = 0.05
    seed: int = 0
    lesion_shrink: float = 0.6

    def means(self):
        if self.intensity_means is None:
            return np.linspace(0.1, 0.9, self.num_classes)
        if len(self.intensity_means) != self.num_classes:
            raise SpecError(f"{len(self.intensity_means)} intensity means for {self.num_classes} classes")
        return np.asarray(self.intensity_means, dtype=np.float64)


@dataclass
class Ellipsoid:
    center: Tuple[float, float, float]
    axes: Tuple[float, float, float]

    def mask(self, dims):
        grids = np.ogrid[:dims[0], :dims[1], :dims[2]]
        dist = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, self.center, self.axes))
        return dist <= 1.0

    def box(self):
        """Voxel bounds (inclusive) of an ellipsoid with an integer center"""
        return tuple((int(c - math.floor(a)), int(c + math.floor(a))) for c, a in zip(self.center, self.axes))


@dataclass
class Phantom:
    volume: Volume
    labels: LabelVolume
    organ: Ellipsoid
    lesions: List[Ellipsoid] = field(default_factory=list)


class PhantomEngine:

    @staticmethod
    def _check(spec: PhantomSpec):
        if spec.num_classes < 2:
            raise SpecError(f"phantom needs >= 2 classes, got {spec.num_classes}")
        lo, hi = spec.organ_radius_range
        if not 0 < lo <= hi:
            raise SpecError(f"organ radius range {spec.organ_radius_range} invalid")
        tlo, thi = spec.tumor_radius_range
        if not 0 < tlo <= thi:
            raise SpecError(f"tumor radius range {spec.tumor_radius_range} invalid")
        if not 0.0 <= spec.tumor_probability <= 1.0:
            raise SpecError(f"tumor probability {spec.tumor_probability} outside [0, 1]")
        if not 0.0 < spec.lesion_shrink < 1.0:
            raise SpecError(f"lesion shrink {spec.lesion_shrink} outside (0, 1)")
        min_dim = min(spec.dims)
        if any(2 * math.floor(hi * min_dim) + 1 > d for d in spec.dims) or hi * min_dim < 1.0:
            raise SpecError(f"organ radius {hi} x {min_dim} does not fit in dims {spec.dims}")

    @staticmethod
    def generate(spec: PhantomSpec) -> Phantom:
        PhantomEngine._check(spec)
        rng = np.random.default_rng(spec.seed)
        dims = tuple(spec.dims)
        min_dim = min(dims)

        # Organ: integer center chosen so the whole ellipsoid stays inside
        axes = tuple(rng.uniform(*spec.organ_radius_range) * min_dim for _ in range(3))
        center = tuple(int(rng.integers(math.floor(a), d - math.floor(a))) for a, d in zip(axes, dims))
        organ = Ellipsoid(center, axes)
        organ_mask = organ.mask(dims)
        labels = organ_mask.astype(np.uint8)

        # Lesions: the first sits inside the organ, later levels nest inside the previous one
        lesions = []
        if spec.num_classes > 2 and rng.random() < spec.tumor_probability:
            inner = min(axes)
            cap = inner / math.sqrt(3.0)
            t_axes = tuple(min(rng.uniform(*spec.tumor_radius_range) * min_dim, cap) for _ in range(3))
            slack = max(cap - max(t_axes), 0.0)
            t_center = tuple(c + rng.uniform(-slack, slack) for c in center)
            lesions.append(Ellipsoid(t_center, t_axes))
            for _ in range(3, spec.num_classes):
                prev = lesions[-1]
                lesions.append(Ellipsoid(prev.center, tuple(a * spec.lesion_shrink for a in prev.axes)))

        region = organ_mask
        for level, lesion in enumerate(lesions):
            region = region & lesion.mask(dims)
            labels[region] = level + 2

        means = spec.means()
        voxels = means[labels] + rng.normal(0.0, spec.noise_sigma, size=dims)
        return Phantom(Volume(voxels.astype(np.float32)), LabelVolume(labels, spec.num_classes), organ, lesions)

    @staticmethod
    def generate_phantom(spec: PhantomSpec) -> Tuple[Volume, LabelVolume]:
        phantom = PhantomEngine.generate(spec)
        return phantom.volume, phantom.labels

    @staticmethod
    def generate_dataset(spec: PhantomSpec, count: int, workers=1) -> List[Tuple[Volume, LabelVolume]]:
        """count phantoms with per-sample seeds spec.seed + index, gathered in index order"""
        specs = [replace(spec, seed=spec.seed + i) for i in range(count)]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(PhantomEngine.generate_phantom, specs))
        logger.info(f"🧪 PHANTOMS_GENERATED: {count} x {tuple(spec.dims)} ({spec.num_classes} classes, seed {spec.seed})")
        return results

    @staticmethod
    def class_fractions(labels: LabelVolume):
        counts = np.bincount(labels.labels.reshape(-1), minlength=labels.num_classes)
        return counts / counts.sum()
