"""Particle amount analysis: count dark, locally-outlying pixels in the ROI."""
from __future__ import annotations

from .config import DEFAULT_CONFIG, Config
from .preprocess import Circle, RoiImage, disk_mask
from .raster import BinaryMask, adaptive_threshold


def particle_mask(roi: RoiImage, window: int = 31, offset: float = 10.0,
                  edge_margin: int = 3, invert: bool = False) -> BinaryMask:
    """Adaptive-threshold hits inside the ROI, minus a margin along its rim."""
    hits = adaptive_threshold(roi.img, window, offset, invert=invert, valid=roi.mask)
    r = roi.circle.r - edge_margin
    if r <= 0:
        return BinaryMask.empty(roi.img.width, roi.img.height)
    inner = disk_mask(roi.img.width, roi.img.height, Circle(roi.circle.cx, roi.circle.cy, r))
    return BinaryMask(hits.bits & inner)


def particle_pixel_count(roi: RoiImage, config: Config = DEFAULT_CONFIG) -> int:
    mask = particle_mask(roi, config["paa.window"], config["paa.offset"],
                         config["paa.edge_margin"], config["paa.invert"])
    return mask.popcount()
