"""Locate the circular solution region in a captured frame."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .config import DEFAULT_CONFIG, Config
from .errors import DegenerateRoi, NoCircleFound
from .raster import BinaryMask, Raster, canny_with_gradients, crop_center, decode_png, encode_png, to_grayscale


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if not (self.r > 0) or not all(map(math.isfinite, (self.cx, self.cy, self.r))):
            raise ValueError(f"invalid circle {self}")

    def inside(self, width: int, height: int) -> bool:
        return (self.cx - self.r >= 0 and self.cy - self.r >= 0
                and self.cx + self.r <= width - 1 and self.cy + self.r <= height - 1)

    def flipped(self, width: int, height: int, how: str) -> "Circle":
        cx = (width - 1) - self.cx if "h" in how else self.cx
        cy = (height - 1) - self.cy if "v" in how else self.cy
        return Circle(cx, cy, self.r)


def disk_mask(width: int, height: int, circle: Circle) -> np.ndarray:
    yy, xx = np.ogrid[0:height, 0:width]
    return (xx - circle.cx) ** 2 + (yy - circle.cy) ** 2 <= circle.r ** 2


@dataclass(frozen=True, eq=False)
class RoiImage:
    img: Raster
    circle: Circle
    mask: BinaryMask

    @classmethod
    def from_circle(cls, img: Raster, circle: Circle) -> "RoiImage":
        gray = to_grayscale(img)
        return cls(gray, circle, BinaryMask(disk_mask(gray.width, gray.height, circle)))

    @property
    def area(self) -> int:
        return self.mask.popcount()

    def to_dict(self) -> dict:
        return {"png": encode_png(self.img), "cx": self.circle.cx, "cy": self.circle.cy, "r": self.circle.r}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiImage":
        return cls.from_circle(decode_png(d["png"]), Circle(d["cx"], d["cy"], d["r"]))


@numba.njit(cache=True)
def _vote_centers(ys, xs, ux, uy, r_min, r_max, r_step, h, w):
    acc = np.zeros((h, w), dtype=np.int32)
    for i in range(ys.shape[0]):
        y = ys[i]
        x = xs[i]
        for r in range(r_min, r_max + 1, r_step):
            for sign in (-1.0, 1.0):
                cx = int(math.floor(x + sign * r * ux[i] + 0.5))
                cy = int(math.floor(y + sign * r * uy[i] + 0.5))
                if 0 <= cx < w and 0 <= cy < h:
                    acc[cy, cx] += 1
    return acc


def _radial_support(xs, ys, ux, uy, cx, cy, r_lo, r_hi):
    dx, dy = xs - cx, ys - cy
    dist = np.hypot(dx, dy)
    with np.errstate(invalid="ignore", divide="ignore"):
        radial = np.abs(dx * ux + dy * uy) / dist
    return dist, (dist >= r_lo) & (dist <= r_hi) & (radial >= 0.9)


def _refine_radius(dist: np.ndarray, start: float, half: float = 4.0) -> float:
    r = start
    for _ in range(3):
        near = dist[np.abs(dist - r) <= half]
        if near.size == 0:
            break
        r = float(near.mean())
    return r


def fit_circle(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    """Algebraic least-squares circle through points (Kasa fit)."""
    x = xs.astype(np.float64)
    y = ys.astype(np.float64)
    design = np.column_stack([x, y, np.ones_like(x)])
    rhs = -(x * x + y * y)
    (d, e, f), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    cx, cy = -d / 2, -e / 2
    return float(cx), float(cy), float(math.sqrt(max(cx * cx + cy * cy - f, 0.0)))


def hough_circle(img: Raster, r_min: float, r_max: float, min_score: float = 0.25,
                 canny_low: float = 50.0, canny_high: float = 150.0, sigma: float = 1.4,
                 refine: bool = True) -> Circle:
    """Strongest circle by two-stage gradient voting.

    Edge pixels vote along their gradient line for centers at every radius in
    the band; the accumulator peak gives the center, then a histogram of edge
    distances from that center gives the radius.  The score is the number of
    center votes (voting every second radius) normalised by the half
    circumference.  With ``refine`` the edge pixels supporting that circle
    are re-fitted by least squares.
    """
    gray = to_grayscale(img).data
    h, w = gray.shape
    if not (0 < r_min < r_max <= min(w, h) / 2):
        raise ValueError(f"need 0 < r_min < r_max <= {min(w, h) / 2}, got {r_min}, {r_max}")
    edges, gx, gy = canny_with_gradients(gray, canny_low, canny_high, sigma)
    ys, xs = np.nonzero(edges)
    if ys.size == 0:
        raise NoCircleFound("no edges in frame")
    mag = np.hypot(gx[ys, xs], gy[ys, xs]).astype(np.float64)
    ux = gx[ys, xs] / mag
    uy = gy[ys, xs] / mag
    lo, hi = int(math.floor(r_min)), int(math.ceil(r_max))
    # every other radius: the 3x3 box sum below absorbs the one-pixel miss
    acc = _vote_centers(ys.astype(np.int64), xs.astype(np.int64), ux, uy, lo, hi, 2, h, w)
    padded = np.pad(acc, 1)
    box = sum(padded[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    py, px = np.unravel_index(int(np.argmax(box)), box.shape)
    y0, y1 = max(py - 1, 0), min(py + 2, h)
    x0, x1 = max(px - 1, 0), min(px + 2, w)
    patch = acc[y0:y1, x0:x1].astype(np.float64)
    total = patch.sum()
    if total <= 0:
        raise NoCircleFound("empty accumulator")
    yy, xx = np.mgrid[y0:y1, x0:x1]
    cy = float((patch * yy).sum() / total)
    cx = float((patch * xx).sum() / total)

    dist, keep = _radial_support(xs, ys, ux, uy, cx, cy, r_min, r_max)
    dist = dist[keep]
    if dist.size == 0:
        raise NoCircleFound("no edge support at any radius")
    bins = np.bincount(np.rint(dist - lo).astype(np.intp), minlength=hi - lo + 1).astype(np.float64)
    bins = np.convolve(bins, np.ones(5), mode="same")
    r = _refine_radius(dist, lo + float(np.argmax(bins)))
    score = total / (math.pi * r)
    if score < min_score:
        raise NoCircleFound(f"best circle score {score:.3f} below {min_score}")
    if refine:
        for _ in range(3):
            _, near = _radial_support(xs, ys, ux, uy, cx, cy, r - 6.0, r + 6.0)
            if np.count_nonzero(near) < 16:
                break
            cx, cy, r = fit_circle(xs[near], ys[near])
    circle = Circle(cx, cy, r)
    if not circle.inside(w, h):
        raise NoCircleFound(f"best circle {circle} extends past the frame")
    return circle


def extract_roi(img: Raster, circle: Circle, shrink: float = 0.05) -> RoiImage:
    if not 0 <= shrink < 1:
        raise ValueError(f"shrink must be in [0, 1), got {shrink}")
    r = circle.r * (1.0 - shrink)
    if r <= 2:
        raise DegenerateRoi(f"ROI radius {r:.2f} px is too small")
    return RoiImage.from_circle(img, Circle(circle.cx, circle.cy, r))


def detect_flask(gray: Raster, config: Config = DEFAULT_CONFIG) -> Circle:
    side = min(gray.width, gray.height)
    return hough_circle(
        gray,
        r_min=config["hough.r_min_frac"] * side,
        r_max=config["hough.r_max_frac"] * side,
        min_score=config["hough.min_score"],
        canny_low=config["canny.low"],
        canny_high=config["canny.high"],
        sigma=config["canny.sigma"],
    )


def locate_flask(raw: Raster, config: Config = DEFAULT_CONFIG) -> tuple[Raster, Circle]:
    """Cropped grayscale frame and the flask circle found in it."""
    # cropping first is equivalent (per-pixel conversion) and much cheaper
    gray = to_grayscale(crop_center(raw, config["crop.side"]))
    return gray, detect_flask(gray, config)


def preprocess_frame(raw: Raster, config: Config = DEFAULT_CONFIG, circle: Circle | None = None) -> RoiImage:
    """Grayscale, center crop, find the flask, mask the solution region.

    A known ``circle`` (crop coordinates) skips detection.
    """
    if circle is None:
        gray, circle = locate_flask(raw, config)
    else:
        gray = to_grayscale(crop_center(raw, config["crop.side"]))
    return extract_roi(gray, circle, config["roi.shrink"])
