"""CLR detection, MRD1 and iris ratio from eye landmarks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .geometry import Circle, GeometryError, Point2
from .imaging import as_gray

N_CONTOUR = 16
N_IRIS = 5
# contour: 0 temporal canthus, 1-7 upper lid, 8 nasal canthus, 9-15 lower lid
UPPER_LID = slice(0, 9)

DEFAULT_IRIS_DIAMETER_MM = 11.7
CLR_FLOOR = 240
CLR_DELTA = 5


class MeasurementError(ValueError):
    """A measurement stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class EyeLandmarks:
    side: str
    contour: np.ndarray
    iris: np.ndarray

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        contour = np.asarray(self.contour, dtype=float)
        iris = np.asarray(self.iris, dtype=float)
        if contour.shape != (N_CONTOUR, 2):
            raise ValueError(f"contour must have {N_CONTOUR} (x, y) points, got shape {contour.shape}")
        if iris.shape != (N_IRIS, 2):
            raise ValueError(f"iris must have {N_IRIS} (x, y) points, got shape {iris.shape}")
        if not (np.all(np.isfinite(contour)) and np.all(np.isfinite(iris))):
            raise ValueError("landmarks must be finite")
        object.__setattr__(self, "contour", contour)
        object.__setattr__(self, "iris", iris)

    @property
    def upper_lid(self) -> np.ndarray:
        return self.contour[UPPER_LID]

    def translated(self, dx: float, dy: float) -> "EyeLandmarks":
        d = np.array([dx, dy])
        return EyeLandmarks(self.side, self.contour + d, self.iris + d)

    def scaled(self, s: float) -> "EyeLandmarks":
        return EyeLandmarks(self.side, self.contour * s, self.iris * s)


@dataclass(frozen=True)
class CalibrationModel:
    assumed_iris_diameter_mm: float = DEFAULT_IRIS_DIAMETER_MM

    def __post_init__(self):
        if not self.assumed_iris_diameter_mm > 0:
            raise ValueError("assumed iris diameter must be positive")


@dataclass(frozen=True)
class ClinicalMeasurements:
    mrd1_px: float
    mrd1_mm: float
    iris_ratio_pct: float
    clr: Point2
    clr_found: bool
    mm_per_px: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clr"] = [float(self.clr[0]), float(self.clr[1])]
        return d


def detect_clr(img, iris: Circle, floor: int = CLR_FLOOR, delta: int = CLR_DELTA) -> tuple[Point2, bool]:
    """Locate the corneal light reflex inside the iris disc.

    Pixels brighter than both ``floor`` and ``iris max - delta`` are grouped
    into 8-connected blobs; the blob whose centroid is closest to the iris
    centre wins. Falls back to the iris centre with ``found=False``.
    """
    img = as_gray(img)
    h, w = img.shape
    (cx, cy), r = iris
    x0, x1 = max(0, int(math.floor(cx - r))), min(w, int(math.ceil(cx + r)) + 1)
    y0, y1 = max(0, int(math.floor(cy - r))), min(h, int(math.ceil(cy + r)) + 1)
    center = Point2(float(cx), float(cy))
    if x0 >= x1 or y0 >= y1:
        raise ValueError("iris disc lies entirely outside the image")

    cols = np.arange(x0, x1) + 0.5
    rows = np.arange(y0, y1) + 0.5
    inside = (cols[None, :] - cx) ** 2 + (rows[:, None] - cy) ** 2 <= r * r
    if not inside.any():
        raise ValueError("iris disc lies entirely outside the image")
    window = img[y0:y1, x0:x1]
    cut = max(floor, int(window[inside].max()) - delta)
    bright = inside & (window >= cut)
    if not bright.any():
        return center, False

    labels, n = ndimage.label(bright, structure=np.ones((3, 3), dtype=bool))
    idx = np.arange(1, n + 1)
    ys = ndimage.mean(rows[:, None] * np.ones_like(cols)[None, :], labels, idx)
    xs = ndimage.mean(np.ones_like(rows)[:, None] * cols[None, :], labels, idx)
    d2 = (np.asarray(xs) - cx) ** 2 + (np.asarray(ys) - cy) ** 2
    k = int(np.argmin(d2))
    return Point2(float(xs[k]), float(ys[k])), True


def measure_mrd1(landmarks: EyeLandmarks, clr, mode: str = "segment", clamp: bool = False) -> float:
    """Signed distance from the reflex to the upper-lid chain, in pixels.

    Negative when the nearest lid point lies below the reflex (the lid
    covers it). ``clamp=True`` floors the result at zero.
    """
    dist, nearest = geometry.point_to_polyline_distance(clr, landmarks.upper_lid, mode=mode)
    signed = -dist if nearest.y > clr[1] else dist
    if clamp:
        signed = max(0.0, signed)
    return float(signed)


def measure_iris_ratio(landmarks: EyeLandmarks) -> float:
    iris = geometry.circle_from_iris_landmarks(landmarks.iris)
    try:
        inter = geometry.circle_polygon_intersection_area(iris, landmarks.contour)
    except GeometryError as exc:
        raise MeasurementError("iris_ratio", str(exc)) from exc
    pct = 100.0 * inter / (math.pi * iris.radius**2)
    return min(100.0, max(0.0, pct))


def px_to_mm(mrd1_px: float, iris: Circle, cal: CalibrationModel | None = None) -> tuple[float, float]:
    cal = cal or CalibrationModel()
    if not iris.radius > 0:
        raise ValueError("iris radius must be positive for mm calibration")
    diameter_px = 2.0 * iris.radius
    # one rounding for the mm value: 35 px on a 117 px iris is exactly 3.5 mm
    return mrd1_px * cal.assumed_iris_diameter_mm / diameter_px, cal.assumed_iris_diameter_mm / diameter_px


def measure_eye(
    img,
    landmarks: EyeLandmarks,
    cal: CalibrationModel | None = None,
    mrd1_mode: str = "segment",
    clamp_mrd1: bool = False,
) -> ClinicalMeasurements:
    """Run the full measurement chain on one eye.

    Landmarks must be in the image's coordinate space. Right eyes are
    measured as-is (no mirroring).
    """
    cal = cal or CalibrationModel()
    try:
        iris = geometry.circle_from_iris_landmarks(landmarks.iris)
    except GeometryError as exc:
        raise MeasurementError("iris_fit", str(exc)) from exc
    try:
        clr, found = detect_clr(img, iris)
    except ValueError as exc:
        raise MeasurementError("clr", str(exc)) from exc
    try:
        mrd1_px = measure_mrd1(landmarks, clr, mode=mrd1_mode, clamp=clamp_mrd1)
    except GeometryError as exc:
        raise MeasurementError("mrd1", str(exc)) from exc
    ratio = measure_iris_ratio(landmarks)
    mrd1_mm, mm_per_px = px_to_mm(mrd1_px, iris, cal)
    return ClinicalMeasurements(
        mrd1_px=mrd1_px,
        mrd1_mm=mrd1_mm,
        iris_ratio_pct=ratio,
        clr=clr,
        clr_found=found,
        mm_per_px=mm_per_px,
    )
