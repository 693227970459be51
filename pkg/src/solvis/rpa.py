"""Radial profile analysis of the white-background capture.

Twelve diameters through the ROI center, 30 degrees apart, are sampled,
averaged, and fitted with an even quadratic ``y = a*x**2 + c`` over
``x`` normalised to [-1, 1].  ``a`` (curvature), ``c`` (minimum) and the
fit MSE are the features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRoi
from .preprocess import RoiImage
from .raster import sample_bilinear

N_PROFILES = 12
ANGLES = tuple(30.0 * k for k in range(N_PROFILES))


@dataclass(frozen=True, eq=False)
class RadialProfileSet:
    profiles: np.ndarray  # (12, n)
    angles: tuple[float, ...] = ANGLES

    def __post_init__(self):
        p = np.asarray(self.profiles, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != len(self.angles):
            raise ValueError(f"expected {len(self.angles)} profiles, got shape {p.shape}")
        object.__setattr__(self, "profiles", p)

    @property
    def length(self) -> int:
        return self.profiles.shape[1]


@dataclass(frozen=True)
class QuadraticFit:
    a: float
    c: float
    mse: float


def radial_profiles(roi: RoiImage) -> RadialProfileSet:
    half = int(math.floor(roi.circle.r))
    if half < 2:
        raise DegenerateRoi(f"ROI radius {roi.circle.r:.2f} px is too small")
    t = np.arange(-half, half + 1, dtype=np.float64)
    rows = []
    for angle in ANGLES:
        rad = math.radians(angle)
        # same orientation as raster.rotate: +x turns toward -y
        xs = roi.circle.cx + t * math.cos(rad)
        ys = roi.circle.cy - t * math.sin(rad)
        rows.append(sample_bilinear(roi.img.data, xs, ys))
    return RadialProfileSet(np.vstack(rows))


def mean_profile(profiles: RadialProfileSet) -> np.ndarray:
    return profiles.profiles.mean(axis=0)


def fit_quadratic(profile) -> QuadraticFit:
    """Closed-form least squares for ``a*x**2 + c`` with x spread over [-1, 1]."""
    y = np.asarray(profile, dtype=np.float64)
    n = y.size
    if n < 3:
        raise ValueError("need at least 3 samples to fit a quadratic")
    x2 = np.linspace(-1.0, 1.0, n) ** 2
    s2, s4 = x2.sum(), (x2 * x2).sum()
    sy, s2y = y.sum(), (x2 * y).sum()
    det = s4 * n - s2 * s2
    a = (n * s2y - s2 * sy) / det
    c = (s4 * sy - s2 * s2y) / det
    resid = y - (a * x2 + c)
    return QuadraticFit(float(a), float(c), float(np.mean(resid * resid)))


def rpa_features(roi: RoiImage) -> tuple[float, float, float]:
    """(radial curvature, radial minimum, radial MSE)."""
    fit = fit_quadratic(mean_profile(radial_profiles(roi)))
    return fit.a, fit.c, fit.mse
