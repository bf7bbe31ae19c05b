"""
AUGMENT ENGINE
The six patch augmentation families and positive-pair sampling.

Families: rotate3d (90 degree multiples), intensity_distort (scale + shift),
identity, gaussian_noise, gaussian_blur (separable, edge-replicated),
sobel3d (gradient magnitude rescaled to [0,1]).

Every op keeps patch dims and returns values in [0,1].
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple

import numpy as np
from scipy import ndimage

from errors import DimensionError, ParameterError

logger = logging.getLogger("AUGMENT_ENGINE")

AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


class AugmentationKind(Enum):
    ROTATE3D = "rotate3d"
    INTENSITY_DISTORT = "intensity_distort"
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    SOBEL3D = "sobel3d"


@dataclass(frozen=True)
class AugmentationOp:
    kind: AugmentationKind
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CompositeAugmentation:
    first: AugmentationOp
    second: AugmentationOp


@dataclass(frozen=True)
class AugmentRanges:
    scale: Tuple[float, float] = (0.7, 1.3)
    shift: Tuple[float, float] = (-0.2, 0.2)
    noise_sigma: Tuple[float, float] = (0.01, 0.2)
    blur_sigma: Tuple[float, float] = (0.5, 1.5)
    blur_radius: int = 2
    families: Tuple[str, ...] = tuple(k.value for k in AugmentationKind)
    # second view is redrawn while it comes out identical to the first
    max_redraws: int = 4


class AugmentEngine:

    # =============================================================
    # 1. GEOMETRY
    # =============================================================
    @staticmethod
    def rotate3d(patch, axis_pair, quarter_turns):
        patch = np.asarray(patch)
        axis_pair = tuple(axis_pair)
        if axis_pair not in AXIS_PAIRS:
            raise ParameterError(f"axis pair {axis_pair} not one of {AXIS_PAIRS}")
        if quarter_turns not in (0, 1, 2, 3):
            raise ParameterError(f"quarter_turns {quarter_turns} not in 0..3")
        if quarter_turns % 2 and len(set(patch.shape)) != 1:
            raise DimensionError(f"odd quarter turn needs a cubic patch, got {patch.shape}")
        return np.ascontiguousarray(np.rot90(patch, k=quarter_turns, axes=axis_pair))

    # =============================================================
    # 2. FILTERS
    # =============================================================
    @staticmethod
    def gaussian_kernel(sigma, radius):
        offsets = np.arange(-radius, radius + 1, dtype=np.float64)
        weights = np.exp(-0.5 * (offsets / sigma) ** 2)
        return weights / weights.sum()

    @staticmethod
    def gaussian_blur(patch, sigma, radius=2):
        if sigma <= 0:
            raise ParameterError(f"blur sigma {sigma} must be > 0")
        if radius < 0:
            raise ParameterError(f"blur radius {radius} must be >= 0")
        weights = AugmentEngine.gaussian_kernel(sigma, radius)
        out = np.asarray(patch, dtype=np.float64)
        for axis in range(out.ndim):
            out = ndimage.correlate1d(out, weights, axis=axis, mode="nearest")
        return out.astype(np.float32)

    @staticmethod
    def sobel_magnitude(patch):
        """Raw sqrt(Gx^2 + Gy^2 + Gz^2); each G smooths [1,2,1] on the other two axes"""
        patch = np.asarray(patch, dtype=np.float64)
        if patch.ndim != 3 or min(patch.shape) < 3:
            raise DimensionError(f"sobel3d needs extents >= 3, got {patch.shape}")
        squared = sum(ndimage.sobel(patch, axis=axis, mode="nearest") ** 2 for axis in range(3))
        return np.sqrt(squared)

    @staticmethod
    def sobel3d(patch):
        magnitude = AugmentEngine.sobel_magnitude(patch)
        peak = magnitude.max()
        if peak <= 0:
            return np.zeros(magnitude.shape, dtype=np.float32)
        return (magnitude / peak).astype(np.float32)

    # =============================================================
    # 3. INTENSITY
    # =============================================================
    @staticmethod
    def intensity_distort(patch, scale, shift, ranges: AugmentRanges = AugmentRanges()):
        if not ranges.scale[0] <= scale <= ranges.scale[1]:
            raise ParameterError(f"scale {scale} outside {ranges.scale}")
        if not ranges.shift[0] <= shift <= ranges.shift[1]:
            raise ParameterError(f"shift {shift} outside {ranges.shift}")
        patch = np.asarray(patch, dtype=np.float32)
        if scale == 1.0 and shift == 0.0:
            return np.clip(patch, 0.0, 1.0)
        return np.clip(patch * np.float32(scale) + np.float32(shift), 0.0, 1.0).astype(np.float32)

    @staticmethod
    def gaussian_noise(patch, sigma, rng: np.random.Generator):
        if not 0.0 < sigma <= 0.2:
            raise ParameterError(f"noise sigma {sigma} outside (0, 0.2]")
        patch = np.asarray(patch, dtype=np.float32)
        noisy = patch + rng.normal(0.0, sigma, size=patch.shape).astype(np.float32)
        return np.clip(noisy, 0.0, 1.0)

    # =============================================================
    # 4. SAMPLING
    # =============================================================
    @staticmethod
    def apply_op(patch, op: AugmentationOp, ranges: AugmentRanges = AugmentRanges()):
        kind, p = op.kind, op.params
        if kind is AugmentationKind.IDENTITY:
            return patch
        if kind is AugmentationKind.ROTATE3D:
            return AugmentEngine.rotate3d(patch, p["axis_pair"], p["quarter_turns"])
        if kind is AugmentationKind.INTENSITY_DISTORT:
            return AugmentEngine.intensity_distort(patch, p["scale"], p["shift"], ranges)
        if kind is AugmentationKind.GAUSSIAN_NOISE:
            return AugmentEngine.gaussian_noise(patch, p["sigma"], np.random.default_rng(p["seed"]))
        if kind is AugmentationKind.GAUSSIAN_BLUR:
            return np.clip(AugmentEngine.gaussian_blur(patch, p["sigma"], p["radius"]), 0.0, 1.0)
        if kind is AugmentationKind.SOBEL3D:
            return AugmentEngine.sobel3d(patch)
        raise ParameterError(f"unknown augmentation kind {kind}")

    @staticmethod
    def apply_composite(patch, composite: CompositeAugmentation, ranges: AugmentRanges = AugmentRanges()):
        out = AugmentEngine.apply_op(patch, composite.first, ranges)
        return AugmentEngine.apply_op(out, composite.second, ranges)

    @staticmethod
    def sample_op(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges(), dims=None) -> AugmentationOp:
        kinds = [AugmentationKind(name) for name in ranges.families]
        if not kinds:
            raise ParameterError("no augmentation family enabled")
        kind = kinds[int(rng.integers(len(kinds)))]

        if kind is AugmentationKind.ROTATE3D:
            axis_pair = AXIS_PAIRS[int(rng.integers(len(AXIS_PAIRS)))]
            turns = int(rng.integers(1, 4))
            if dims is not None and len(set(dims)) != 1 and turns % 2:
                turns = 2
            return AugmentationOp(kind, {"axis_pair": axis_pair, "quarter_turns": turns})
        if kind is AugmentationKind.INTENSITY_DISTORT:
            return AugmentationOp(kind, {"scale": float(rng.uniform(*ranges.scale)),
                                         "shift": float(rng.uniform(*ranges.shift))})
        if kind is AugmentationKind.GAUSSIAN_NOISE:
            sigma = float(rng.uniform(*ranges.noise_sigma))
            return AugmentationOp(kind, {"sigma": sigma, "seed": int(rng.integers(2 ** 32))})
        if kind is AugmentationKind.GAUSSIAN_BLUR:
            return AugmentationOp(kind, {"sigma": float(rng.uniform(*ranges.blur_sigma)),
                                         "radius": ranges.blur_radius})
        return AugmentationOp(kind)

    @staticmethod
    def sample_composite(rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges(), dims=None):
        return CompositeAugmentation(AugmentEngine.sample_op(rng, ranges, dims),
                                     AugmentEngine.sample_op(rng, ranges, dims))

    @staticmethod
    def sample_pair(patch, rng: np.random.Generator, ranges: AugmentRanges = AugmentRanges()):
        """Two views of one patch from two random composites; rng must be dedicated to this patch"""
        patch = np.asarray(patch, dtype=np.float32)
        view_a = AugmentEngine.apply_composite(patch, AugmentEngine.sample_composite(rng, ranges, patch.shape), ranges)
        view_b = AugmentEngine.apply_composite(patch, AugmentEngine.sample_composite(rng, ranges, patch.shape), ranges)
        for _ in range(ranges.max_redraws):
            if not np.array_equal(view_a, view_b):
                break
            view_b = AugmentEngine.apply_composite(patch, AugmentEngine.sample_composite(rng, ranges, patch.shape),
                                                   ranges)
        return np.asarray(view_a, dtype=np.float32), np.asarray(view_b, dtype=np.float32)
