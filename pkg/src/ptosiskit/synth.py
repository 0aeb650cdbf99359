"""Synthetic eye renderer with analytic ground truth.

Eyelids are parabolas ``y = apex_y + curvature * (x - lid_center_x)**2``
(image y points down, so the upper lid has positive curvature and the lower
lid negative). The canthi are where the two curves meet.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .clinical import DEFAULT_IRIS_DIAMETER_MM, EyeLandmarks
from .geometry import Point2

PTOSIS_MRD1_MM = 2.0
GT_LID_SAMPLES = 10_000
GT_MC_SAMPLES = 1_000_000

_MASK64 = (1 << 64) - 1


class SceneError(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(suite_seed: int, index: int) -> int:
    return splitmix64(splitmix64(suite_seed & _MASK64) ^ (index & _MASK64))


@dataclass(frozen=True)
class EyeSceneSpec:
    width: int
    height: int
    iris_center: tuple[float, float]
    iris_radius: float
    pupil_radius: float
    lid_center_x: float
    upper_apex_y: float
    upper_curvature: float
    lower_apex_y: float
    lower_curvature: float
    clr_offset: tuple[float, float] = (0.0, 0.0)
    side: str = "left"
    sclera: int = 220
    iris: int = 100
    pupil: int = 30
    skin: int = 150
    clr: int = 255
    clr_radius: float = 2.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise SceneError("image size must be positive")
        if not 0 < self.pupil_radius < self.iris_radius:
            raise SceneError("need 0 < pupil radius < iris radius")
        if not self.upper_apex_y < self.lower_apex_y:
            raise SceneError("upper-lid apex must lie above the lower-lid apex")
        if not self.upper_curvature > self.lower_curvature:
            raise SceneError("lid curves never meet: upper curvature must exceed lower curvature")
        if math.hypot(*self.clr_offset) >= self.iris_radius:
            raise SceneError("CLR offset must lie inside the iris")
        if self.noise_sigma < 0:
            raise SceneError("noise sigma must be >= 0")
        if self.side not in ("left", "right"):
            raise SceneError("side must be 'left' or 'right'")
        for v in (self.sclera, self.iris, self.pupil, self.skin, self.clr):
            if not 0 <= v <= 255:
                raise SceneError("intensities must lie in [0, 255]")
        (xt, yt), (xn, yn) = self.canthi()
        for x, y in ((xt, yt), (xn, yn)):
            if not (0 <= x <= self.width and 0 <= y <= self.height):
                raise SceneError("canthi fall outside the image")

    def upper(self, x):
        return self.upper_apex_y + self.upper_curvature * (np.asarray(x, dtype=float) - self.lid_center_x) ** 2

    def lower(self, x):
        return self.lower_apex_y + self.lower_curvature * (np.asarray(x, dtype=float) - self.lid_center_x) ** 2

    def half_width(self) -> float:
        return math.sqrt((self.lower_apex_y - self.upper_apex_y) / (self.upper_curvature - self.lower_curvature))

    def temporal_sign(self) -> int:
        # a left eye sits on the image's right, its temporal corner further right
        return 1 if self.side == "left" else -1

    def canthi(self) -> tuple[Point2, Point2]:
        """(temporal, nasal) canthus."""
        hw = self.half_width()
        s = self.temporal_sign()
        xt = self.lid_center_x + s * hw
        xn = self.lid_center_x - s * hw
        return Point2(xt, float(self.upper(xt))), Point2(xn, float(self.upper(xn)))

    @property
    def clr_point(self) -> Point2:
        return Point2(self.iris_center[0] + self.clr_offset[0], self.iris_center[1] + self.clr_offset[1])

    def clr_visible(self) -> bool:
        """The reflex is drawn only if its whole disc clears both lids."""
        x, y = self.clr_point
        pad = self.clr_radius + 1.0
        return bool(self.upper(x) <= y - pad and y + pad <= self.lower(x))


def make_scene(
    iris_center: tuple[float, float],
    iris_radius: float,
    upper_apex_y: float,
    canthus_half_width: float,
    canthus_y: float,
    lower_apex_y: float,
    width: int,
    height: int,
    lid_center_x: float | None = None,
    **kwargs,
) -> EyeSceneSpec:
    """Scene whose lids both pass through canthi at ``lid_center_x +- canthus_half_width``."""
    cx = iris_center[0] if lid_center_x is None else lid_center_x
    hw2 = canthus_half_width**2
    kwargs.setdefault("pupil_radius", 0.4 * iris_radius)
    spec = EyeSceneSpec(
        width=width,
        height=height,
        iris_center=(float(iris_center[0]), float(iris_center[1])),
        iris_radius=float(iris_radius),
        lid_center_x=float(cx),
        upper_apex_y=float(upper_apex_y),
        upper_curvature=(canthus_y - upper_apex_y) / hw2,
        lower_apex_y=float(lower_apex_y),
        lower_curvature=(canthus_y - lower_apex_y) / hw2,
        **kwargs,
    )
    spec.validate()
    return spec


def with_upper_apex(spec: EyeSceneSpec, apex_y: float) -> EyeSceneSpec:
    """Move the upper-lid apex keeping the canthi fixed (a droop step)."""
    (xt, yt), _ = spec.canthi()
    d2 = (xt - spec.lid_center_x) ** 2
    out = replace(spec, upper_apex_y=float(apex_y), upper_curvature=(yt - apex_y) / d2)
    out.validate()
    return out


@dataclass(frozen=True)
class GroundTruth:
    mrd1_px: float
    mrd1_mm: float
    iris_ratio_pct: float
    # true reflex position, whether drawn or not
    clr: Point2
    clr_visible: bool
    # point MRD1 is measured from: the reflex, or the iris centre when covered
    reference: Point2
    landmarks: EyeLandmarks
    label: int
    mm_per_px: float
    iris_ratio_method: str


def scene_landmarks(spec: EyeSceneSpec) -> EyeLandmarks:
    (xt, _), (xn, _) = spec.canthi()
    up_x = xt + (xn - xt) * np.arange(9) / 8.0
    low_x = xn + (xt - xn) * np.arange(1, 8) / 8.0
    contour = np.concatenate(
        [np.column_stack([up_x, spec.upper(up_x)]), np.column_stack([low_x, spec.lower(low_x)])]
    )
    cx, cy = spec.iris_center
    r = spec.iris_radius
    s = spec.temporal_sign()
    iris = np.array([[cx, cy], [cx + s * r, cy], [cx, cy - r], [cx - s * r, cy], [cx, cy + r]])
    return EyeLandmarks(spec.side, contour, iris)


def lid_curve_distance(spec: EyeSceneSpec, p, samples: int = GT_LID_SAMPLES) -> float:
    """Signed distance from ``p`` to the upper-lid curve by dense sampling."""
    (xt, _), (xn, _) = spec.canthi()
    xs = np.linspace(min(xt, xn), max(xt, xn), samples)
    ys = spec.upper(xs)
    d = np.hypot(xs - p[0], ys - p[1])
    i = int(np.argmin(d))
    return float(-d[i] if ys[i] > p[1] else d[i])


def flat_lid_iris_ratio(iris_radius: float, lid_height_above_center: float) -> float:
    """Visible iris percent under a straight lid ``d`` px above the centre."""
    r, d = iris_radius, lid_height_above_center
    if d >= r:
        return 100.0
    if d <= -r:
        return 0.0
    hidden = r * r * math.acos(d / r) - d * math.sqrt(r * r - d * d)
    return 100.0 * (1.0 - hidden / (math.pi * r * r))


def monte_carlo_iris_ratio(spec: EyeSceneSpec, samples: int = GT_MC_SAMPLES, seed: int = 0) -> float:
    """Visible iris percent from ~``samples`` uniform points in the iris disc."""
    rng = np.random.default_rng(seed)
    # rejection from the bounding square; about `samples` points survive
    m = int(samples * 4 / math.pi) + 1
    u = rng.random((2, m), dtype=np.float32) * 2.0 - 1.0
    inside = u[0] * u[0] + u[1] * u[1] <= 1.0
    r = spec.iris_radius
    x = spec.iris_center[0] + r * u[0][inside].astype(np.float64)
    y = spec.iris_center[1] + r * u[1][inside].astype(np.float64)
    dx2 = (x - spec.lid_center_x) ** 2
    visible = (y >= spec.upper_apex_y + spec.upper_curvature * dx2) & (y <= spec.lower_apex_y + spec.lower_curvature * dx2)
    return 100.0 * float(np.count_nonzero(visible)) / float(np.count_nonzero(inside))


def _iris_clear(spec: EyeSceneSpec) -> tuple[bool, bool]:
    cx, cy = spec.iris_center
    r = spec.iris_radius
    xs = cx + r * np.linspace(-1.0, 1.0, 2001)
    half = np.sqrt(np.clip(r * r - (xs - cx) ** 2, 0.0, None))
    return bool(np.all(spec.upper(xs) <= cy - half)), bool(np.all(spec.lower(xs) >= cy + half))


def ground_truth_iris_ratio(spec: EyeSceneSpec, mc_samples: int = GT_MC_SAMPLES) -> tuple[float, str]:
    upper_clear, lower_clear = _iris_clear(spec)
    if upper_clear and lower_clear:
        return 100.0, "contained"
    if lower_clear and spec.upper_curvature == 0.0:
        return flat_lid_iris_ratio(spec.iris_radius, spec.iris_center[1] - spec.upper_apex_y), "analytic"
    return monte_carlo_iris_ratio(spec, mc_samples, seed=derive_seed(spec.seed, 1)), "monte_carlo"


def render_eye(spec: EyeSceneSpec, mc_samples: int = GT_MC_SAMPLES) -> tuple[np.ndarray, GroundTruth]:
    spec.validate()
    X = np.arange(spec.width) + 0.5
    Y = (np.arange(spec.height) + 0.5)[:, None]
    img = np.full((spec.height, spec.width), float(spec.skin))
    lid = (Y >= spec.upper(X)[None, :]) & (Y <= spec.lower(X)[None, :])
    img[lid] = spec.sclera
    cx, cy = spec.iris_center
    r2 = (X[None, :] - cx) ** 2 + (Y - cy) ** 2
    img[lid & (r2 <= spec.iris_radius**2)] = spec.iris
    img[lid & (r2 <= spec.pupil_radius**2)] = spec.pupil
    clr = spec.clr_point
    visible = spec.clr_visible()
    if visible:
        dot = (X[None, :] - clr.x) ** 2 + (Y - clr.y) ** 2 <= spec.clr_radius**2
        img[lid & dot] = spec.clr
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(derive_seed(spec.seed, 0))
        img = img + rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)

    reference = clr if visible else Point2(float(cx), float(cy))
    mrd1_px = lid_curve_distance(spec, reference)
    mm_per_px = DEFAULT_IRIS_DIAMETER_MM / (2.0 * spec.iris_radius)
    mrd1_mm = mrd1_px * DEFAULT_IRIS_DIAMETER_MM / (2.0 * spec.iris_radius)
    ratio, method = ground_truth_iris_ratio(spec, mc_samples)
    truth = GroundTruth(
        mrd1_px=mrd1_px,
        mrd1_mm=mrd1_mm,
        iris_ratio_pct=ratio,
        clr=clr,
        clr_visible=visible,
        reference=reference,
        landmarks=scene_landmarks(spec),
        label=int(mrd1_mm < PTOSIS_MRD1_MM),
        mm_per_px=mm_per_px,
        iris_ratio_method=method,
    )
    return img, truth


@dataclass(frozen=True)
class SuiteConfig:
    # upper-lid apex relative to the iris centre, in iris radii (negative = above)
    droop_range: tuple[float, float] = (-1.0, 0.3)
    radius_range: tuple[float, float] = (40.0, 80.0)
    noise_range: tuple[float, float] = (0.0, 8.0)
    # CLR offset as a fraction of the iris radius; dy >= 0 keeps it at or below the centre
    clr_dx_range: tuple[float, float] = (-0.15, 0.15)
    clr_dy_range: tuple[float, float] = (0.0, 0.15)
    mc_samples: int = GT_MC_SAMPLES


def suite_spec(index: int, seed: int, config: SuiteConfig = SuiteConfig(), n: int = 1) -> EyeSceneSpec:
    """Scene parameters for suite item ``index``; the droop level sweeps evenly."""
    rng = np.random.default_rng(derive_seed(seed, index))
    r = rng.uniform(*config.radius_range)
    lo, hi = config.droop_range
    level = lo + (hi - lo) * (index + rng.random()) / n
    hw = r * rng.uniform(2.3, 2.7)
    canthus_off = r * rng.uniform(0.35, 0.5)
    lower_off = r * rng.uniform(0.9, 1.15)
    width = int(math.ceil(2 * hw * 1.4))
    cy = 2.0 * r + 10.0 + rng.random()
    height = int(math.ceil(cy + 2.0 * r + 10.0))
    cx = width / 2.0 + rng.uniform(-0.5, 0.5)
    return make_scene(
        iris_center=(cx, cy),
        iris_radius=r,
        upper_apex_y=cy + level * r,
        canthus_half_width=hw,
        canthus_y=cy + canthus_off,
        lower_apex_y=cy + lower_off,
        width=width,
        height=height,
        lid_center_x=cx + r * rng.uniform(-0.1, 0.1),
        pupil_radius=r * rng.uniform(0.35, 0.5),
        clr_offset=(r * rng.uniform(*config.clr_dx_range), r * rng.uniform(*config.clr_dy_range)),
        side="left" if rng.random() < 0.5 else "right",
        noise_sigma=float(rng.uniform(*config.noise_range)),
        seed=derive_seed(seed, index + 1_000_003),
    )


def _render_item(args):
    index, seed, config, n = args
    return render_eye(suite_spec(index, seed, config, n), config.mc_samples)


def generate_suite(n: int, seed: int = 0, config: SuiteConfig = SuiteConfig(), jobs: int = 1):
    """Deterministic list of ``(image, truth)`` pairs sweeping the droop range."""
    if n <= 0:
        raise ValueError("suite size must be positive")
    work = [(i, seed, config, n) for i in range(n)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_render_item, work))
    return [_render_item(w) for w in work]
