"""Superposition analysis: how much of the check grid survives the solution.

The grid seen through the flask is recovered as line segments
(adaptive threshold, Canny, progressive probabilistic Hough), thickened
by morphology, and compared against the grid that should be there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .config import DEFAULT_CONFIG, Config
from .errors import EmptyGroundTruth, MaskShapeMismatch
from .preprocess import RoiImage
from .raster import BinaryMask, Raster, adaptive_threshold, canny, close, dilate, square_kernel


@dataclass(frozen=True, eq=False)
class CheckPatternMask:
    mask: BinaryMask
    line_segments: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return self.mask.popcount() == 0


@dataclass(frozen=True, eq=False)
class GroundTruthPattern:
    mask: BinaryMask
    source: str = "analytic-grid"
    pitch: int | None = None
    thickness: int | None = None
    origin: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mask.popcount() == 0:
            raise EmptyGroundTruth("ground-truth pattern has no set pixels")


# -- progressive probabilistic Hough transform -------------------------------------

@numba.njit(cache=True)
def _ppht(mask, ys, xs, threshold, min_len, max_gap, cos_t, sin_t, max_lines):
    h, w = mask.shape
    numangle = cos_t.shape[0]
    numrho = 2 * (w + h) + 1
    rho_off = (numrho - 1) // 2
    acc = np.zeros((numangle, numrho), dtype=np.int32)
    live = mask.copy()
    voted = np.zeros((h, w), dtype=np.bool_)
    segs = np.zeros((max_lines, 4), dtype=np.int64)
    nseg = 0
    ends = np.zeros((2, 2), dtype=np.int64)

    for idx in range(ys.shape[0]):
        y = ys[idx]
        x = xs[idx]
        if not live[y, x]:
            continue
        best = threshold - 1
        best_n = -1
        for n in range(numangle):
            r = int(math.floor(x * cos_t[n] + y * sin_t[n] + 0.5)) + rho_off
            acc[n, r] += 1
            if acc[n, r] > best:
                best = acc[n, r]
                best_n = n
        voted[y, x] = True
        if best_n < 0:
            continue

        # direction along the line is perpendicular to its normal
        a = -sin_t[best_n]
        b = cos_t[best_n]
        x_major = abs(a) > abs(b)
        if x_major:
            d_major = 1.0 if a > 0 else -1.0
            d_minor = b / abs(a)
        else:
            d_major = 1.0 if b > 0 else -1.0
            d_minor = a / abs(b)

        for k in range(2):
            sgn = 1.0 if k == 0 else -1.0
            ends[k, 0] = x
            ends[k, 1] = y
            major = float(x if x_major else y)
            minor = float(y if x_major else x) + 0.5
            gap = 0
            while True:
                if x_major:
                    px = int(major)
                    py = int(math.floor(minor))
                else:
                    px = int(math.floor(minor))
                    py = int(major)
                if px < 0 or px >= w or py < 0 or py >= h:
                    break
                if live[py, px]:
                    gap = 0
                    ends[k, 0] = px
                    ends[k, 1] = py
                else:
                    gap += 1
                    if gap > max_gap:
                        break
                major += sgn * d_major
                minor += sgn * d_minor

        good = (abs(ends[1, 0] - ends[0, 0]) >= min_len) or (abs(ends[1, 1] - ends[0, 1]) >= min_len)

        # clear the walked pixels; take back their votes if the line is kept
        for k in range(2):
            sgn = 1.0 if k == 0 else -1.0
            major = float(x if x_major else y)
            minor = float(y if x_major else x) + 0.5
            while True:
                if x_major:
                    px = int(major)
                    py = int(math.floor(minor))
                else:
                    px = int(math.floor(minor))
                    py = int(major)
                if px < 0 or px >= w or py < 0 or py >= h:
                    break
                if live[py, px]:
                    if good and voted[py, px]:
                        for n in range(numangle):
                            r = int(math.floor(px * cos_t[n] + py * sin_t[n] + 0.5)) + rho_off
                            acc[n, r] -= 1
                        voted[py, px] = False
                    live[py, px] = False
                if px == ends[k, 0] and py == ends[k, 1]:
                    break
                major += sgn * d_major
                minor += sgn * d_minor

        if good:
            segs[nseg, 0] = ends[0, 0]
            segs[nseg, 1] = ends[0, 1]
            segs[nseg, 2] = ends[1, 0]
            segs[nseg, 3] = ends[1, 1]
            nseg += 1
            if nseg >= max_lines:
                break
    return segs[:nseg]


def ppht(edges: BinaryMask, threshold: int = 30, min_len: int = 20, max_gap: int = 5,
         seed: int = 0, n_angles: int = 180, max_lines: int = 4096) -> list[tuple[int, int, int, int]]:
    """Progressive probabilistic Hough line segments ``(x1, y1, x2, y2)``.

    Edge pixels are visited in a seeded random order; each votes into a
    (theta, rho) accumulator and, as soon as some bin through it reaches
    ``threshold``, the corresponding line is walked in both directions
    (tolerating gaps of up to ``max_gap`` pixels). Walked pixels leave the
    pool, and if the segment is long enough its votes are withdrawn.
    """
    ys, xs = np.nonzero(edges.bits)
    if ys.size == 0:
        return []
    order = np.random.default_rng(seed).permutation(ys.size)
    theta = np.arange(n_angles) * (math.pi / n_angles)
    segs = _ppht(edges.bits, ys[order].astype(np.int64), xs[order].astype(np.int64),
                 int(threshold), int(min_len), int(max_gap), np.cos(theta), np.sin(theta), int(max_lines))
    return [tuple(int(v) for v in s) for s in segs]


def rasterize_segments(segments, width: int, height: int, thickness: int = 1) -> BinaryMask:
    bits = np.zeros((height, width), dtype=bool)
    for x1, y1, x2, y2 in segments:
        n = max(abs(x2 - x1), abs(y2 - y1)) + 1
        xs = np.rint(np.linspace(x1, x2, n)).astype(np.intp)
        ys = np.rint(np.linspace(y1, y2, n)).astype(np.intp)
        ok = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
        bits[ys[ok], xs[ok]] = True
    mask = BinaryMask(bits)
    if thickness > 1:
        size = thickness if thickness % 2 else thickness + 1
        mask = dilate(mask, square_kernel(size))
    return mask


# -- pattern recovery ------------------------------------------------------------

def detect_check_pattern(roi: RoiImage, config: Config = DEFAULT_CONFIG) -> CheckPatternMask:
    inside = roi.mask.bits
    dark = adaptive_threshold(roi.img, config["sa.window"], config["sa.offset"])
    binary = Raster(np.where(dark.bits, 255, 0).astype(np.uint8))
    edges = canny(binary, config["canny.low"], config["canny.high"], config["canny.sigma"])
    edges = BinaryMask(edges.bits & inside)
    segments = ppht(edges, config["sa.ppht.threshold"], config["sa.ppht.min_len"],
                    config["sa.ppht.max_gap"], seed=config["sa.seed"])
    if not segments:
        return CheckPatternMask(BinaryMask.empty(roi.img.width, roi.img.height), [])
    drawn = rasterize_segments(segments, roi.img.width, roi.img.height, config["sa.line_thickness"])
    k = config["morph.kernel"]
    grown = close(dilate(drawn, k, iterations=config["morph.dilate_iter"]), k)
    return CheckPatternMask(BinaryMask(grown.bits & inside), segments)


def analytic_grid(width: int, height: int, origin: tuple[int, int], pitch: int,
                  thickness: int) -> BinaryMask:
    """Grid of lines ``thickness`` px wide every ``pitch`` px, one through ``origin``."""
    half = (thickness - 1) / 2.0
    ox, oy = origin
    xs = np.arange(width) - ox
    ys = np.arange(height) - oy
    col = np.abs((xs + pitch / 2.0) % pitch - pitch / 2.0) <= half
    row = np.abs((ys + pitch / 2.0) % pitch - pitch / 2.0) <= half
    return BinaryMask(col[None, :] | row[:, None])


def grid_for_roi(roi: RoiImage, pitch: int | None = None, thickness: int | None = None,
                 config: Config = DEFAULT_CONFIG) -> GroundTruthPattern:
    """Analytic grid registered to the ROI center, restricted to the ROI."""
    pitch = pitch or config["sa.grid.pitch"]
    thickness = thickness or config["sa.grid.thickness"]
    origin = (int(round(roi.circle.cx)), int(round(roi.circle.cy)))
    grid = analytic_grid(roi.img.width, roi.img.height, origin, pitch, thickness)
    return GroundTruthPattern(BinaryMask(grid.bits & roi.mask.bits), "analytic-grid", pitch, thickness, origin)


def ground_truth_from_mask(mask: BinaryMask, roi: RoiImage | None = None) -> GroundTruthPattern:
    bits = mask.bits if roi is None else mask.bits & roi.mask.bits
    return GroundTruthPattern(BinaryMask(bits), "calibration-capture")


def superposition_ratio(detected: CheckPatternMask | BinaryMask, truth: GroundTruthPattern) -> float:
    """Fraction of ground-truth grid pixels that the detected pattern covers."""
    found = detected.mask if isinstance(detected, CheckPatternMask) else detected
    if found.shape != truth.mask.shape:
        raise MaskShapeMismatch(f"detected {found.shape} vs truth {truth.mask.shape}")
    total = truth.mask.popcount()
    if total == 0:
        raise EmptyGroundTruth("ground-truth pattern has no set pixels")
    return int(np.count_nonzero(found.bits & truth.mask.bits)) / total


def sa_feature(roi: RoiImage, truth: GroundTruthPattern | None = None,
               config: Config = DEFAULT_CONFIG) -> float:
    if truth is None:
        truth = grid_for_roi(roi, config=config)
    return superposition_ratio(detect_check_pattern(roi, config), truth)
