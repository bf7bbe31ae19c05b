import logging
from pathlib import Path
from typing import Optional

import numpy as np

from errors import DimensionError, ParameterError
from volume_manager import LabelVolume, Volume

logger = logging.getLogger("VISUAL_ENGINE")

BLUE = np.array([0, 0, 255], dtype=np.float64)
RED = np.array([255, 0, 0], dtype=np.float64)


class VisualEngine:
    """
    THE SLICE RENDERER:
    Turns uncertainty volumes into 8-bit PPM (P6) images.
    Heat runs blue (0) -> red (1); ground-truth voxels are drawn black.
    """

    # =============================================================
    # 1. COLORMAP
    # =============================================================
    @staticmethod
    def colormap(values):
        """[H,W] values in [0,1] -> [H,W,3] uint8, linear blue -> red"""
        v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)[..., None]
        rgb = BLUE * (1.0 - v) + RED * v
        return np.rint(rgb).astype(np.uint8)

    # =============================================================
    # 2. SLICE RENDER
    # =============================================================
    @staticmethod
    def render_slice(heatmap: Volume, slice_index: Optional[int] = None, truth: Optional[LabelVolume] = None,
                     truth_class: Optional[int] = None):
        """
        Axial slice (axis 0) of a heatmap volume as RGB.
        Truth voxels with label >= truth_class (nested lesion levels included) are painted black.
        """
        depth = heatmap.dims[0]
        index = depth // 2 if slice_index is None else slice_index
        if not 0 <= index < depth:
            raise ParameterError(f"slice {index} outside [0, {depth})")
        rgb = VisualEngine.colormap(heatmap.voxels[index])
        if truth is not None and truth_class is not None:
            if truth.dims != heatmap.dims:
                raise DimensionError(f"truth {truth.dims} vs heatmap {heatmap.dims}")
            rgb[truth.labels[index] >= truth_class] = 0
        return rgb

    @staticmethod
    def encode_ppm(rgb) -> bytes:
        rgb = np.asarray(rgb, dtype=np.uint8)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DimensionError(f"PPM needs [H,W,3] pixels, got {rgb.shape}")
        height, width = rgb.shape[:2]
        return f"P6\n{width} {height}\n255\n".encode("ascii") + rgb.tobytes()

    @staticmethod
    def write_ppm(rgb, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(VisualEngine.encode_ppm(rgb))
        logger.info(f"🖼️ SLICE_RENDERED: {path}")
        return path
