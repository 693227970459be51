"""Image containers and the low-level vision primitives everything else uses.

Pixel arrays are numpy ``uint8`` in row-major ``(height, width[, 3])``
layout.  Every function here is pure: inputs are never modified.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import BadThresholds, BadWindow, CropTooLarge


@dataclass(frozen=True, eq=False)
class Raster:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.uint8:
            raise TypeError(f"Raster needs uint8 samples, got {arr.dtype}")
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
            raise ValueError(f"Raster shape must be (h, w) or (h, w, 3), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("Raster must be at least 1x1")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Raster({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.bits, dtype=bool))
        if arr.ndim != 2:
            raise ValueError(f"BinaryMask must be 2-D, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, set={self.popcount()})"


# -- pixel conversions ---------------------------------------------------------

def to_grayscale(img: Raster) -> Raster:
    """BT.601 luma, rounded half-up. Single-channel input passes through."""
    if img.channels == 1:
        return img
    rgb = img.data.astype(np.uint32)
    luma = (299 * rgb[..., 0] + 587 * rgb[..., 1] + 114 * rgb[..., 2] + 500) // 1000
    return Raster(np.minimum(luma, 255).astype(np.uint8))


def crop_center(img: Raster, side: int) -> Raster:
    if side < 1 or side > min(img.width, img.height):
        raise CropTooLarge(f"cannot crop {side}x{side} from {img.width}x{img.height}")
    top = (img.height - side) // 2
    left = (img.width - side) // 2
    return Raster(img.data[top:top + side, left:left + side])


def crop_origin(img: Raster, side: int) -> tuple[int, int]:
    """(left, top) of the region :func:`crop_center` keeps."""
    return (img.width - side) // 2, (img.height - side) // 2


def _cos_sin(angle: float) -> tuple[float, float]:
    # exact values on the quarter turns so 90/180/360 rotations are permutations
    quarter = angle / 90.0
    if quarter == round(quarter):
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(round(quarter)) % 4]
    rad = math.radians(angle)
    return math.cos(rad), math.sin(rad)


def sample_bilinear(data: np.ndarray, xs: np.ndarray, ys: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear samples of a 2-D (or HxWxC) array at float coordinates.

    Points outside ``[0, w-1] x [0, h-1]`` get ``fill``.
    """
    h, w = data.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.where(inside, xs - x0, 0.0)
    fy = np.where(inside, ys - y0, 0.0)
    if data.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    src = data.astype(np.float64)
    top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    mask = inside if data.ndim == 2 else inside[..., None]
    return np.where(mask, out, fill)


def rotate(img: Raster, angle: float, interp: str = "bilinear") -> Raster:
    """Rotate about the image center by ``angle`` degrees.

    Positive angles turn the +x axis toward -y (counter-clockwise on screen).
    Samples that map from outside the frame are 0.
    """
    if interp not in ("nearest", "bilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    h, w = img.height, img.width
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    c, s = _cos_sin(angle)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    # inverse of the forward map (x', y') = (c*dx + s*dy, -s*dx + c*dy)
    src_x = c * dx - s * dy + cx
    src_y = s * dx + c * dy + cy
    if interp == "nearest":
        ix = np.rint(src_x).astype(np.intp)
        iy = np.rint(src_y).astype(np.intp)
        inside = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        out = np.zeros_like(img.data)
        out[inside] = img.data[iy[inside], ix[inside]]
        return Raster(out)
    vals = sample_bilinear(img.data, src_x, src_y)
    return Raster(np.clip(np.rint(vals), 0, 255).astype(np.uint8))


def flip_h(img: Raster) -> Raster:
    return Raster(img.data[:, ::-1])


def flip_v(img: Raster) -> Raster:
    return Raster(img.data[::-1])


def flip_hv(img: Raster) -> Raster:
    return flip_h(flip_v(img))


FLIPS = {"identity": lambda img: img, "h": flip_h, "v": flip_v, "hv": flip_hv}


# -- thresholding ----------------------------------------------------------------

@numba.njit(cache=True)
def _box_sums(values, half):
    h, w = values.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    for y in range(h):
        run = 0
        for x in range(w):
            run += values[y, x]
            integral[y + 1, x + 1] = integral[y, x + 1] + run
    sums = np.empty((h, w), dtype=np.int64)
    counts = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        y0 = max(y - half, 0)
        y1 = min(y + half + 1, h)
        for x in range(w):
            x0 = max(x - half, 0)
            x1 = min(x + half + 1, w)
            sums[y, x] = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
            counts[y, x] = (y1 - y0) * (x1 - x0)
    return sums, counts


def local_mean(gray: np.ndarray, window: int) -> np.ndarray:
    """Mean over a ``window`` square clipped at the borders, via an integral image."""
    sums, counts = _box_sums(np.ascontiguousarray(gray, dtype=np.int64), window // 2)
    return sums / counts


def adaptive_threshold(img: Raster, window: int = 31, offset: float = 10.0,
                       invert: bool = False, valid: BinaryMask | None = None) -> BinaryMask:
    """Set bits where a pixel is darker than its local mean minus ``offset``.

    With ``invert`` the test becomes brighter than local mean plus ``offset``.
    If ``valid`` is given, local means use only valid pixels and bits outside
    it stay clear.
    """
    if window < 3 or window % 2 == 0:
        raise BadWindow(f"window must be odd and >= 3, got {window}")
    gray = to_grayscale(img).data
    if valid is not None:
        inside = valid.bits
        sums, _ = _box_sums(np.where(inside, gray, 0).astype(np.int64), window // 2)
        counts, _ = _box_sums(inside.astype(np.int64), window // 2)
        mean = sums / np.maximum(counts, 1)
        test = gray > mean + offset if invert else gray < mean - offset
        return BinaryMask(test & inside)
    mean = local_mean(gray, window)
    if invert:
        return BinaryMask(gray > mean + offset)
    return BinaryMask(gray < mean - offset)


# -- edges -----------------------------------------------------------------------

@numba.njit(cache=True)
def _smooth_sobel(padded, taps, h, w):
    # padded: input with (len(taps) // 2 + 1) replicated pixels on every side
    k = taps.shape[0] // 2
    m = k + 1
    ph = padded.shape[0]
    tmp = np.zeros((ph, w + 2), dtype=np.float32)
    for y in range(ph):
        for x in range(w + 2):
            acc = np.float32(0.0)
            for i in range(2 * k + 1):
                acc += taps[i] * padded[y, x + i + m - 1 - k]
            tmp[y, x] = acc
    smooth = np.zeros((h + 2, w + 2), dtype=np.float32)
    for y in range(h + 2):
        for i in range(2 * k + 1):
            t = taps[i]
            for x in range(w + 2):
                smooth[y, x] += t * tmp[y + i + m - 1 - k, x]
    gx = np.empty((h, w), dtype=np.float32)
    gy = np.empty((h, w), dtype=np.float32)
    for y in range(h):
        for x in range(w):
            a = smooth[y, x]
            b = smooth[y, x + 1]
            c = smooth[y, x + 2]
            d = smooth[y + 1, x]
            f = smooth[y + 1, x + 2]
            g = smooth[y + 2, x]
            e = smooth[y + 2, x + 1]
            i = smooth[y + 2, x + 2]
            gx[y, x] = (c - a) + 2.0 * (f - d) + (i - g)
            gy[y, x] = (g - a) + 2.0 * (e - b) + (i - c)
    return gx, gy


def gaussian_taps(sigma: float, truncate: float = 3.0) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    k = int(truncate * sigma + 0.5)
    x = np.arange(-k, k + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gradients(gray: np.ndarray, sigma: float = 1.4) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-smoothed Sobel derivatives (gx, gy); borders replicate."""
    taps = gaussian_taps(sigma).astype(np.float32)
    h, w = gray.shape
    padded = np.pad(gray.astype(np.float32), len(taps) // 2 + 1, mode="edge")
    return _smooth_sobel(padded, taps, h, w)


_TAN_22 = math.tan(math.radians(22.5))
_TAN_67 = math.tan(math.radians(67.5))


@numba.njit(cache=True)
def _non_max_suppression(mag, gx, gy):
    h, w = mag.shape
    keep = np.zeros((h, w), dtype=np.bool_)
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            m = mag[y, x]
            if m <= 0:
                continue
            ax = abs(gx[y, x])
            ay = abs(gy[y, x])
            # neighbours before/after along the quantised gradient direction
            if ay < ax * _TAN_22:
                before = mag[y, x - 1]
                after = mag[y, x + 1]
            elif ay >= ax * _TAN_67:
                before = mag[y - 1, x]
                after = mag[y + 1, x]
            elif gx[y, x] * gy[y, x] > 0:
                before = mag[y - 1, x - 1]
                after = mag[y + 1, x + 1]
            else:
                before = mag[y - 1, x + 1]
                after = mag[y + 1, x - 1]
            # strict on one side so a symmetric ridge keeps a single pixel
            keep[y, x] = m > before and m >= after
    return keep


def canny(img: Raster, low: float = 50.0, high: float = 150.0, sigma: float = 1.4) -> BinaryMask:
    """Canny edges with L2 Sobel magnitude and 8-connected hysteresis."""
    if low > high:
        raise BadThresholds(f"low threshold {low} exceeds high threshold {high}")
    edges, _, _ = canny_with_gradients(to_grayscale(img).data, low, high, sigma)
    return BinaryMask(edges)


def canny_with_gradients(gray: np.ndarray, low: float, high: float, sigma: float = 1.4):
    """Canny on a bare 2-D array; also returns the (gx, gy) it was built from."""
    gx, gy = gradients(gray, sigma)
    mag = np.hypot(gx, gy)
    thin = _non_max_suppression(mag, gx, gy)
    weak = thin & (mag >= low)
    strong = thin & (mag >= high)
    if not strong.any():
        return np.zeros_like(weak), gx, gy
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels], gx, gy


# -- morphology ------------------------------------------------------------------

def square_kernel(size: int = 3) -> np.ndarray:
    return np.ones((size, size), dtype=bool)


def _kernel(kernel) -> np.ndarray:
    k = square_kernel(kernel) if isinstance(kernel, (int, np.integer)) else np.asarray(kernel, dtype=bool)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0 or not k.any():
        raise ValueError("structuring element must be a non-empty, odd-sized 2-D array")
    return k


def _is_box(k: np.ndarray) -> bool:
    return bool(k.all())


def _box_filter(bits: np.ndarray, size: tuple[int, int], grow: bool, cval: int) -> np.ndarray:
    op = ndimage.maximum_filter if grow else ndimage.minimum_filter
    return op(bits.view(np.uint8), size=size, mode="constant", cval=cval).astype(bool)


def dilate(mask: BinaryMask, kernel=3, iterations: int = 1) -> BinaryMask:
    k = _kernel(kernel)
    if _is_box(k):
        size = (iterations * (k.shape[0] - 1) + 1, iterations * (k.shape[1] - 1) + 1)
        return BinaryMask(_box_filter(mask.bits, size, True, 0))
    out = ndimage.binary_dilation(mask.bits, structure=k, iterations=iterations, border_value=0)
    return BinaryMask(out)


def erode(mask: BinaryMask, kernel=3) -> BinaryMask:
    k = _kernel(kernel)
    if _is_box(k):
        return BinaryMask(_box_filter(mask.bits, k.shape, False, 0))
    return BinaryMask(ndimage.binary_erosion(mask.bits, structure=k, border_value=0))


def close(mask: BinaryMask, kernel=3) -> BinaryMask:
    """Dilate then erode with the same element.

    Computed on a zero-padded canvas so that nothing outside the frame is
    ever set, then cropped back; this keeps closing extensive and idempotent.
    """
    k = _kernel(kernel)
    py, px = k.shape[0] // 2, k.shape[1] // 2
    padded = np.pad(mask.bits, ((py, py), (px, px)))
    if _is_box(k):
        grown = _box_filter(padded, k.shape, True, 0)
        shrunk = _box_filter(grown, k.shape, False, 1)
    else:
        grown = ndimage.binary_dilation(padded, structure=k)
        shrunk = ndimage.binary_erosion(grown, structure=k, border_value=1)
    return BinaryMask(shrunk[py:py + mask.height, px:px + mask.width])


# -- PNG I/O ---------------------------------------------------------------------

def encode_png(img: Raster | BinaryMask, compress_level: int = 1) -> bytes:
    if isinstance(img, BinaryMask):
        arr = img.bits.astype(np.uint8) * 255
    else:
        arr = img.data
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB").save(
        buf, format="PNG", compress_level=compress_level)
    return buf.getvalue()


def decode_png(blob: bytes) -> Raster:
    with Image.open(io.BytesIO(blob)) as im:
        if im.format != "PNG":
            raise ValueError(f"expected PNG data, got {im.format}")
        im = im.convert("L") if im.mode in ("L", "1", "LA", "I;16", "I") else im.convert("RGB")
        return Raster(np.array(im, dtype=np.uint8))


def read_png(path: str | Path) -> Raster:
    return decode_png(Path(path).read_bytes())


def write_png(img: Raster | BinaryMask, path: str | Path, compress_level: int = 1) -> None:
    Path(path).write_bytes(encode_png(img, compress_level))


def read_mask(path: str | Path) -> BinaryMask:
    return BinaryMask(to_grayscale(read_png(path)).data >= 128)
