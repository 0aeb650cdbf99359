import math

import numpy as np
import pytest

from ptosiskit import synth
from ptosiskit.clinical import (
    CalibrationModel,
    EyeLandmarks,
    MeasurementError,
    detect_clr,
    measure_eye,
    measure_iris_ratio,
    measure_mrd1,
    px_to_mm,
)
from ptosiskit.geometry import Circle, Point2, point_to_polyline_distance

HIDDEN_HALF_R = math.acos(0.5) - 0.5 * math.sqrt(0.75)


def box_landmarks(upper_y, lower_y, x0=20.0, x1=80.0, iris=((50, 60), 10.0), side="left"):
    """Eye contour with a straight upper lid at ``upper_y`` and straight lower lid."""
    ux = np.linspace(x0, x1, 9)
    upper = np.column_stack([ux, np.full(9, float(upper_y))])
    lx = np.linspace(x1, x0, 9)[1:-1]
    lower = np.column_stack([lx, np.full(7, float(lower_y))])
    (cx, cy), r = iris
    ring = [(cx, cy), (cx + r, cy), (cx, cy - r), (cx - r, cy), (cx, cy + r)]
    return EyeLandmarks(side, np.vstack([upper, lower]), np.array(ring, float))


def iris_image(size=100, center=(50.5, 50.5), r=20, value=120):
    img = np.full((size, size), 60, np.uint8)
    yy, xx = np.mgrid[:size, :size] + 0.5
    img[(xx - center[0]) ** 2 + (yy - center[1]) ** 2 <= r * r] = value
    return img


def put_dot(img, x, y, value=250, r=1.5):
    yy, xx = np.mgrid[: img.shape[0], : img.shape[1]] + 0.5
    img[(xx - x) ** 2 + (yy - y) ** 2 <= r * r] = value


class TestDetectClr:
    def test_single_dot(self):
        img = iris_image()
        put_dot(img, 55.5, 47.5)
        p, found = detect_clr(img, Circle(Point2(50.5, 50.5), 20))
        assert found and p == pytest.approx((55.5, 47.5), abs=1e-9)

    def test_nearest_of_two_equal_dots(self):
        img = iris_image()
        put_dot(img, 53.5, 50.5)  # 3 px from centre
        put_dot(img, 40.5, 50.5)  # 10 px from centre
        p, found = detect_clr(img, Circle(Point2(50.5, 50.5), 20))
        assert found and p == pytest.approx((53.5, 50.5))

    def test_no_bright_pixel_falls_back(self):
        p, found = detect_clr(iris_image(), Circle(Point2(50.5, 50.5), 20))
        assert not found and p == (50.5, 50.5)

    def test_dim_spot_below_floor_ignored(self):
        img = iris_image()
        put_dot(img, 55.5, 47.5, value=200)
        assert detect_clr(img, Circle(Point2(50.5, 50.5), 20))[1] is False

    def test_bright_pixel_outside_iris_ignored(self):
        img = iris_image()
        put_dot(img, 90.5, 90.5, value=255)
        assert detect_clr(img, Circle(Point2(50.5, 50.5), 20))[1] is False

    def test_iris_outside_image(self):
        with pytest.raises(ValueError):
            detect_clr(iris_image(), Circle(Point2(500, 500), 20))


class TestMrd1:
    def test_vertical_drop(self):
        lm = box_landmarks(upper_y=40, lower_y=80)
        assert measure_mrd1(lm, (50, 60)) == 20.0

    def test_on_lid(self):
        lm = box_landmarks(upper_y=40, lower_y=80)
        assert measure_mrd1(lm, (50, 40)) == 0.0

    def test_covered_negative(self):
        lm = box_landmarks(upper_y=65, lower_y=80)
        d = measure_mrd1(lm, (50, 60))
        # dense-sampling oracle for the magnitude
        xs = np.linspace(20, 80, 60001)
        assert abs(d) == pytest.approx(np.hypot(xs - 50, 5).min(), abs=1e-9)
        assert d == -5.0

    def test_clamp_mode(self):
        lm = box_landmarks(upper_y=65, lower_y=80)
        assert measure_mrd1(lm, (50, 60), clamp=True) == 0.0

    def test_vertex_mode_not_below_segment(self):
        lm = box_landmarks(upper_y=40, lower_y=80)
        assert measure_mrd1(lm, (51, 60), mode="vertex") >= measure_mrd1(lm, (51, 60))

    def test_uses_upper_lid_only(self):
        lm = box_landmarks(upper_y=40, lower_y=62)
        # the lower lid is closer but must not count
        assert measure_mrd1(lm, (50, 60)) == 20.0


class TestIrisRatio:
    def test_fully_visible(self):
        lm = box_landmarks(upper_y=30, lower_y=90, iris=((50, 60), 10.0))
        assert measure_iris_ratio(lm) == pytest.approx(100.0, abs=1e-9)

    def test_half_covered(self):
        lm = box_landmarks(upper_y=60, lower_y=90, iris=((50, 60), 10.0))
        assert measure_iris_ratio(lm) == pytest.approx(50.0, abs=1e-9)

    def test_half_radius_chord(self):
        lm = box_landmarks(upper_y=55, lower_y=90, iris=((50, 60), 10.0))
        expected = 100 * (1 - HIDDEN_HALF_R / math.pi)  # 80.4499 (mpmath)
        assert measure_iris_ratio(lm) == pytest.approx(expected, rel=1e-9)
        assert measure_iris_ratio(lm) == pytest.approx(80.45, abs=0.005)

    def test_degenerate_contour(self):
        contour = np.column_stack([np.linspace(0, 15, 16), np.zeros(16)])
        lm = EyeLandmarks("left", contour, [(5, 0), (0, 0), (5, -5), (10, 0), (5, 5)])
        with pytest.raises(MeasurementError):
            measure_iris_ratio(lm)


class TestCalibration:
    def test_117_px_iris(self):
        mm, k = px_to_mm(35.0, Circle(Point2(0, 0), 58.5))
        assert mm == 3.5 and k == pytest.approx(0.1)

    def test_zero(self):
        assert px_to_mm(0.0, Circle(Point2(0, 0), 33.0))[0] == 0.0

    def test_unit(self):
        assert px_to_mm(1.0, Circle(Point2(0, 0), 5.85))[1] == pytest.approx(1.0, rel=1e-15)

    def test_zero_radius(self):
        with pytest.raises(ValueError):
            px_to_mm(1.0, Circle(Point2(0, 0), 0.0))

    def test_custom_diameter_linear(self):
        iris = Circle(Point2(0, 0), 50.0)
        a, _ = px_to_mm(30.0, iris)
        b, _ = px_to_mm(30.0, iris, CalibrationModel(12.2))
        assert b / a == pytest.approx(12.2 / 11.7)

    def test_bad_calibration(self):
        with pytest.raises(ValueError):
            CalibrationModel(0.0)


def base_scene(apex_offset, **kw):
    kw.setdefault("clr_offset", (3.0, 4.0))
    return synth.make_scene(
        iris_center=(200.3, 160.7),
        iris_radius=60.0,
        upper_apex_y=160.7 + apex_offset,
        canthus_half_width=150.0,
        canthus_y=160.7 + 25.0,
        lower_apex_y=160.7 + 66.0,
        width=400,
        height=320,
        **kw,
    )


class TestMeasureEye:
    def test_known_mrd1(self):
        # CLR 4 mm below the lid apex: 4 / (11.7/120) px
        spec = base_scene(apex_offset=4.0 - 4.0 / (11.7 / 120.0), clr_offset=(0.0, 4.0))
        img, gt = synth.render_eye(spec, mc_samples=10_000)
        m = measure_eye(img, gt.landmarks)
        assert gt.mrd1_mm == pytest.approx(4.0, abs=0.01)
        assert m.clr_found
        assert m.mrd1_mm == pytest.approx(4.0, abs=0.2)
        assert m.mrd1_mm == pytest.approx(m.mrd1_px * m.mm_per_px, rel=1e-15)

    def test_open_eye_full_iris(self):
        spec = synth.make_scene(
            iris_center=(200.0, 160.0), iris_radius=40.0, upper_apex_y=100.0, canthus_half_width=150.0,
            canthus_y=180.0, lower_apex_y=215.0, width=400, height=320,
        )
        img, gt = synth.render_eye(spec, mc_samples=10_000)
        assert gt.iris_ratio_pct == 100.0
        assert measure_eye(img, gt.landmarks).iris_ratio_pct == pytest.approx(100.0, abs=0.5)

    def test_covered_clr_uses_iris_center(self):
        spec = base_scene(apex_offset=20.0)
        img, gt = synth.render_eye(spec, mc_samples=10_000)
        m = measure_eye(img, gt.landmarks)
        assert not gt.clr_visible and not m.clr_found
        assert m.clr == pytest.approx(spec.iris_center)
        d, _ = point_to_polyline_distance(spec.iris_center, gt.landmarks.upper_lid)
        assert m.mrd1_px == pytest.approx(-d)

    def test_stage_labelled_errors(self):
        lm = box_landmarks(40, 80)
        bad = EyeLandmarks("left", lm.contour, np.array([(50, 60), (40, 60), (50, 50), (40, 60), (50, 70)], float))
        with pytest.raises(MeasurementError) as err:
            measure_eye(np.zeros((100, 100), np.uint8), bad)
        assert err.value.stage == "iris_fit"

    def test_scale_equivariance(self):
        img, gt = synth.render_eye(base_scene(-40.0, noise_sigma=3.0, seed=5), mc_samples=10_000)
        m1 = measure_eye(img, gt.landmarks)
        big = np.kron(img, np.ones((2, 2), np.uint8))
        m2 = measure_eye(big, gt.landmarks.scaled(2.0))
        assert m2.mrd1_px == pytest.approx(2 * m1.mrd1_px, rel=1e-9)
        assert m2.mrd1_mm == pytest.approx(m1.mrd1_mm, rel=1e-6)
        assert m2.iris_ratio_pct == pytest.approx(m1.iris_ratio_pct, rel=1e-9)

    def test_translation_invariance(self):
        img, gt = synth.render_eye(base_scene(-30.0, noise_sigma=2.0, seed=9), mc_samples=10_000)
        m1 = measure_eye(img, gt.landmarks)
        shifted = np.pad(img, ((7, 0), (13, 0)), mode="edge")
        m2 = measure_eye(shifted, gt.landmarks.translated(13, 7))
        assert m2.mrd1_px == pytest.approx(m1.mrd1_px, abs=1e-9)
        assert m2.iris_ratio_pct == pytest.approx(m1.iris_ratio_pct, abs=1e-9)
        assert m2.clr == pytest.approx((m1.clr[0] + 13, m1.clr[1] + 7))

    def test_droop_sweep_monotone(self):
        spec = base_scene(-70.0)
        ratios, mrd1s, found = [], [], []
        for apex in np.linspace(spec.upper_apex_y, spec.iris_center[1] + 15, 25):
            img, gt = synth.render_eye(synth.with_upper_apex(spec, apex), mc_samples=10_000)
            m = measure_eye(img, gt.landmarks)
            ratios.append(m.iris_ratio_pct)
            mrd1s.append(m.mrd1_px)
            found.append(m.clr_found)
        assert np.all(np.diff(ratios) <= 1e-9)
        visible = np.array(found)
        assert visible[0] and not visible[-1]
        assert np.all(np.diff(np.array(mrd1s)[visible]) < 0)
