"""Per-image measurement and the diagnosis report document."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .classify import FusionPolicy, Model, aggregate_face, fuse, predict_features
from .clinical import CalibrationModel, ClinicalMeasurements, EyeLandmarks, measure_eye
from .imaging import DEFAULT_MARGIN, Crop, crop_eye_region, mirror_horizontal

REPORT_SCHEMA = "ptosiskit-report"
REPORT_VERSION = 1
# contour indices standing in for the 6-point per-eye detector output:
# both canthi plus two upper-lid and two lower-lid points
CROP_POINTS = (0, 3, 5, 8, 11, 13)

PATH_DEEP = "deep"
PATH_DEFERRED = "deferred"
PATH_CLINICAL = "clinical-only"


def eye_crop(img, eye: EyeLandmarks, margin: float = DEFAULT_MARGIN) -> tuple[Crop, EyeLandmarks]:
    crop = crop_eye_region(img, eye.contour[list(CROP_POINTS)], margin)
    ox, oy = crop.offset
    return crop, eye.translated(-ox, -oy)


def measure_eye_in_image(img, eye: EyeLandmarks, cal: CalibrationModel, margin: float = DEFAULT_MARGIN, **kw) -> ClinicalMeasurements:
    crop, local = eye_crop(img, eye, margin)
    m = measure_eye(crop.image, local, cal, **kw)
    ox, oy = crop.offset
    return ClinicalMeasurements(
        m.mrd1_px, m.mrd1_mm, m.iris_ratio_pct, type(m.clr)(m.clr.x + ox, m.clr.y + oy), m.clr_found, m.mm_per_px
    )


def eye_feature_crop(img, eye: EyeLandmarks, margin: float = DEFAULT_MARGIN) -> np.ndarray:
    """Eye crop oriented as a left eye (right eyes are mirrored)."""
    crop, _ = eye_crop(img, eye, margin)
    return mirror_horizontal(crop.image) if eye.side == "right" else crop.image


@dataclass
class EyeEntry:
    side: str
    measurements: dict
    prediction: int | None = None
    p_deep: float | None = None
    decision_path: str | None = None
    score: float | None = None

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "prediction": self.prediction,
            "p_deep": self.p_deep,
            "decision_path": self.decision_path,
            "score": self.score,
            **self.measurements,
        }


@dataclass
class DiagnosisReport:
    eyes: list[EyeEntry]
    provenance: dict = field(default_factory=dict)

    @property
    def face(self) -> str | None:
        preds = {e.side: e.prediction for e in self.eyes}
        if preds.get("left") is None or preds.get("right") is None:
            return None
        return aggregate_face(preds["left"], preds["right"])

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "eyes": [e.to_dict() for e in self.eyes],
            "face": self.face,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "DiagnosisReport":
        if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
            raise ValueError("not a ptosiskit report (schema/version)")
        eyes = []
        for e in doc["eyes"]:
            meas = {k: e[k] for k in ("mrd1_px", "mrd1_mm", "iris_ratio_pct", "clr", "clr_found", "mm_per_px")}
            eyes.append(EyeEntry(e["side"], meas, e.get("prediction"), e.get("p_deep"), e.get("decision_path"), e.get("score")))
        return cls(eyes, doc.get("provenance", {}))

    def summary(self) -> str:
        lines = []
        for e in self.eyes:
            m = e.measurements
            pred = {None: "n/a", 1: "ptosis", 0: "no ptosis"}[e.prediction]
            clr = "CLR found" if m["clr_found"] else "CLR not found, iris centre used"
            lines.append(
                f"{e.side:>5} eye: MRD1 {m['mrd1_mm']:.2f} mm, iris ratio {m['iris_ratio_pct']:.1f}%, {clr}; prediction: {pred}"
            )
        if self.face is not None:
            lines.append(f"face: {self.face}")
        return "\n".join(lines)


def measurement_report(img, eyes, cal: CalibrationModel, margin: float, provenance: dict, **kw) -> DiagnosisReport:
    entries = [EyeEntry(e.side, measure_eye_in_image(img, e, cal, margin, **kw).to_dict()) for e in eyes]
    prov = {"tool_version": __version__, **provenance}
    return DiagnosisReport(entries, prov)


def classify_eye(features: dict, model: Model, p_deep: float | None, t_lo: float, t_hi: float) -> tuple[int, str, float]:
    """Label, decision path and a ranking score for one eye."""
    if p_deep is not None:
        label, used = fuse(p_deep, features, FusionPolicy(model, t_lo, t_hi))
        if used == "deep":
            return label, PATH_DEEP, float(p_deep)
        row = {**features, "p_deep": p_deep}
        return label, PATH_DEFERRED, _score(model, row)
    return predict_features(model, features), PATH_CLINICAL, _score(model, features)


def _score(model: Model, features: dict) -> float:
    row = np.array([[float(features[f]) for f in model.feature_names]])
    return float(model.score(row)[0])
