"""Grayscale raster helpers and the 7-channel filter bank.

Images are plain ``numpy.ndarray`` objects of dtype ``uint8`` and shape
``(height, width)``. Pixel ``(row, col)`` covers the unit square
``[col, col + 1) x [row, row + 1)`` so its centre sits at
``(col + 0.5, row + 0.5)`` in landmark coordinates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CHANNEL_NAMES = ("gray", "gamma_1.5", "gamma_0.667", "histeq", "canny", "harris", "dog")

# Filter defaults; the values are conventional textbook choices.
CANNY_SIGMA = 1.0
CANNY_LO = 50.0
CANNY_HI = 100.0
HARRIS_K = 0.04
HARRIS_SIGMA = 1.0
DOG_SIGMA1 = 1.0
DOG_SIGMA2 = 2.0
DEFAULT_MARGIN = 0.5

_STACK_MAGIC = b"PTFS"


class ImageError(ValueError):
    """Invalid image, region, or filter parameter."""


def as_gray(img) -> np.ndarray:
    """Validate and return ``img`` as a 2-D uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 255:
            raise ImageError("pixel values must lie in [0, 255]")
        if np.any(arr != np.round(arr)):
            raise ImageError("pixel values must be integers")
        arr = arr.astype(np.uint8)
    return arr


@dataclass(frozen=True)
class Crop:
    image: np.ndarray
    # (x, y) of the crop's top-left corner in the source image
    offset: tuple[int, int]

    def to_crop(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) - np.asarray(self.offset, dtype=float)

    def to_source(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) + np.asarray(self.offset, dtype=float)


def crop_eye_region(img, six_points, margin: float = DEFAULT_MARGIN) -> Crop:
    """Crop the bounding box of the eye-contour points, padded by ``margin``.

    The box is expanded by ``margin * max(box width, box height)`` on every
    side and clamped to the image.
    """
    img = as_gray(img)
    pts = np.asarray(six_points, dtype=float)
    if pts.shape != (6, 2):
        raise ImageError(f"expected 6 (x, y) points, got shape {pts.shape}")
    if margin < 0:
        raise ImageError("margin must be >= 0")
    h, w = img.shape
    if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] < 0) or np.any(pts[:, 1] > h):
        raise ImageError("eye landmarks fall outside the image")

    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad = margin * max(x1 - x0, y1 - y0)
    left = max(0, int(np.floor(x0 - pad)))
    top = max(0, int(np.floor(y0 - pad)))
    right = min(w, int(np.ceil(x1 + pad)))
    bottom = min(h, int(np.ceil(y1 + pad)))
    if right <= left or bottom <= top:
        raise ImageError("eye region does not intersect the image")
    return Crop(img[top:bottom, left:right].copy(), (left, top))


def mirror_horizontal(img) -> np.ndarray:
    return as_gray(img)[:, ::-1].copy()


def gamma_correct(img, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ImageError(f"gamma must be positive, got {gamma}")
    img = as_gray(img)
    levels = np.arange(256, dtype=np.float64) / 255.0
    # round half up, per pixel
    lut = np.floor(255.0 * levels**gamma + 0.5).astype(np.uint8)
    return lut[img]


def hist_equalize(img) -> np.ndarray:
    """Classic CDF remap. A constant image is returned unchanged."""
    img = as_gray(img)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = img.size
    cdf_min = cdf[np.nonzero(cdf)[0][0]]
    if cdf_min == n:
        return img.copy()
    lut = np.floor((cdf - cdf_min) / (n - cdf_min) * 255.0 + 0.5)
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[img]


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img.astype(np.float64), sigma, mode="nearest")


def _sobel(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return gx, gy


def _non_max_suppress(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    angle = (np.degrees(np.arctan2(gy, gx)) + 180.0) % 180.0
    # neighbour offsets (drow, dcol) for the 4 quantised directions
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dr, dc) in offsets.items():
        fwd = padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        bwd = padded[1 - dr : 1 - dr + h, 1 - dc : 1 - dc + w]
        sel = sector == s
        keep |= sel & (mag >= fwd) & (mag > bwd)
    return np.where(keep, mag, 0.0)


def canny_edges(img, sigma: float = CANNY_SIGMA, lo: float = CANNY_LO, hi: float = CANNY_HI) -> np.ndarray:
    """Binary Canny edge map (edges 255, background 0).

    ``lo`` and ``hi`` apply to the unnormalised L2 Sobel magnitude of the
    blurred 0-255 image.
    """
    if not 0 <= lo <= hi:
        raise ImageError("Canny thresholds must satisfy 0 <= lo <= hi")
    img = as_gray(img)
    smooth = _blur(img, sigma) if sigma > 0 else img.astype(np.float64)
    gx, gy = _sobel(smooth)
    mag = np.hypot(gx, gy)
    thin = _non_max_suppress(mag, gx, gy)
    strong = thin >= hi
    weak = thin >= lo
    if hi == 0:
        strong &= thin > 0
        weak &= thin > 0
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros(img.shape, dtype=np.uint8)
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return np.where(keep[labels], 255, 0).astype(np.uint8)


def _harris_raw(img: np.ndarray, k: float, sigma: float) -> np.ndarray:
    gx, gy = _sobel(img.astype(np.float64))
    sxx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _rescale(resp: np.ndarray) -> np.ndarray:
    lo, hi = float(resp.min()), float(resp.max())
    span = hi - lo
    # flat response; also absorbs float dust from constant inputs
    if span <= 1e-9 * max(1.0, abs(hi), abs(lo)):
        return np.zeros(resp.shape, dtype=np.uint8)
    return np.floor((resp - lo) / span * 255.0 + 0.5).astype(np.uint8)


def harris_response(img, k: float = HARRIS_K, sigma: float = HARRIS_SIGMA) -> np.ndarray:
    """Harris corner response ``det(M) - k tr(M)^2`` min-max scaled to 0..255."""
    return _rescale(_harris_raw(as_gray(img), k, sigma))


def difference_of_gaussians(img, sigma1: float = DOG_SIGMA1, sigma2: float = DOG_SIGMA2) -> np.ndarray:
    if not 0 < sigma1 < sigma2:
        raise ImageError("DoG requires 0 < sigma1 < sigma2")
    img = as_gray(img)
    diff = _blur(img, sigma1) - _blur(img, sigma2)
    return np.clip(np.floor(diff + 128.0 + 0.5), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class FilterParams:
    canny_sigma: float = CANNY_SIGMA
    canny_lo: float = CANNY_LO
    canny_hi: float = CANNY_HI
    harris_k: float = HARRIS_K
    harris_sigma: float = HARRIS_SIGMA
    dog_sigma1: float = DOG_SIGMA1
    dog_sigma2: float = DOG_SIGMA2


@dataclass(frozen=True)
class FeatureStack:
    # shape (7, height, width), order fixed by CHANNEL_NAMES
    planes: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.planes.ndim != 3 or self.planes.shape[0] != len(CHANNEL_NAMES):
            raise ImageError(f"feature stack must have shape (7, h, w), got {self.planes.shape}")

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    def channel(self, name: str) -> np.ndarray:
        return self.planes[CHANNEL_NAMES.index(name)]

    def to_bytes(self) -> bytes:
        header = _STACK_MAGIC + struct.pack("<III", self.width, self.height, len(CHANNEL_NAMES))
        return header + np.ascontiguousarray(self.planes, dtype=np.uint8).tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureStack":
        if blob[:4] != _STACK_MAGIC:
            raise ImageError("not a feature stack file")
        width, height, channels = struct.unpack("<III", blob[4:16])
        if channels != len(CHANNEL_NAMES):
            raise ImageError(f"expected 7 channels, header says {channels}")
        body = np.frombuffer(blob, dtype=np.uint8, offset=16)
        if body.size != channels * width * height:
            raise ImageError("feature stack payload size does not match header")
        return cls(body.reshape(channels, height, width).copy())


def build_feature_stack(img, params: FilterParams | None = None) -> FeatureStack:
    p = params or FilterParams()
    gray = as_gray(img)
    planes = [
        gray,
        gamma_correct(gray, 1.5),
        gamma_correct(gray, 1 / 1.5),
        hist_equalize(gray),
        canny_edges(gray, p.canny_sigma, p.canny_lo, p.canny_hi),
        harris_response(gray, p.harris_k, p.harris_sigma),
        difference_of_gaussians(gray, p.dog_sigma1, p.dog_sigma2),
    ]
    return FeatureStack(np.stack(planes).astype(np.uint8))
