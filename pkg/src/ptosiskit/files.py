"""On-disk formats: landmark files, feature/truth/prediction CSVs, synthetic suites."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clinical import N_CONTOUR, N_IRIS, EyeLandmarks
from .pnm import encode_pgm, write_bytes_atomic

LANDMARK_SCHEMA = "ptosiskit-landmarks"
LANDMARK_VERSION = 1
FEATURE_HEADER = ("p_deep", "mrd1_mm", "iris_ratio_pct", "label")
TRUTH_HEADER = ("id", "mrd1_px", "mrd1_mm", "iris_ratio_pct", "label")


class SchemaError(ValueError):
    """Input file does not match its declared format."""


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _line_of(text: str, needle: str, nth: int = 0) -> int:
    pos = -1
    for _ in range(nth + 1):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return 1
    return text.count("\n", 0, pos) + 1


@dataclass(frozen=True)
class LandmarkFile:
    image: str
    eyes: tuple[EyeLandmarks, ...]

    def eye(self, side: str) -> EyeLandmarks | None:
        return next((e for e in self.eyes if e.side == side), None)


def parse_landmarks(text: str, source: str = "<landmarks>") -> LandmarkFile:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc

    def fail(msg, needle="{", nth=0):
        raise SchemaError(f"{source}:{_line_of(text, needle, nth)}: {msg}")

    if not isinstance(doc, dict):
        fail("top level must be an object")
    if doc.get("schema") != LANDMARK_SCHEMA:
        fail(f"schema must be {LANDMARK_SCHEMA!r}", '"schema"')
    if doc.get("version") != LANDMARK_VERSION:
        fail(f"unsupported version {doc.get('version')!r}", '"version"')
    image = doc.get("image")
    if not isinstance(image, str):
        fail("'image' must be a path string", '"image"')
    eyes_doc = doc.get("eyes")
    if not isinstance(eyes_doc, list) or not eyes_doc:
        fail("'eyes' must be a non-empty list", '"eyes"')
    if len(eyes_doc) > 2:
        fail("at most two eyes per file", '"eyes"')
    eyes = []
    for i, e in enumerate(eyes_doc):
        if not isinstance(e, dict):
            fail(f"eyes[{i}] must be an object", '"eyes"')
        side = e.get("side")
        if side not in ("left", "right"):
            fail(f"eyes[{i}].side must be 'left' or 'right'", '"side"', i)
        if any(x.side == side for x in eyes):
            fail(f"duplicate {side} eye", '"side"', i)
        for key, count in (("contour", N_CONTOUR), ("iris", N_IRIS)):
            pts = e.get(key)
            ok = isinstance(pts, list) and len(pts) == count and all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)
                for p in pts
            )
            if not ok:
                fail(f"eyes[{i}].{key} must hold exactly {count} [x, y] number pairs", f'"{key}"', i)
            if not np.all(np.isfinite(np.asarray(pts, dtype=float))):
                fail(f"eyes[{i}].{key} has non-finite coordinates", f'"{key}"', i)
        eyes.append(EyeLandmarks(side, np.asarray(e["contour"], float), np.asarray(e["iris"], float)))
    return LandmarkFile(image, tuple(eyes))


def read_landmarks(path) -> LandmarkFile:
    path = Path(path)
    return parse_landmarks(path.read_text(encoding="utf-8"), str(path))


def landmarks_json(image: str, eyes) -> str:
    doc = {
        "schema": LANDMARK_SCHEMA,
        "version": LANDMARK_VERSION,
        "image": image,
        "eyes": [
            {"side": e.side, "contour": e.contour.tolist(), "iris": e.iris.tolist()} for e in eyes
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    write_bytes_atomic(path, buf.getvalue().encode("utf-8"))


def read_csv(path, required, source: str | None = None) -> list[dict]:
    """Rows of a headed CSV; ``required`` columns must be present."""
    source = source or str(path)
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{source}:1: header lacks columns {missing}; expected {','.join(required)}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if None in row or any(v is None for v in row.values()):
            raise SchemaError(f"{source}:{lineno}: wrong number of fields")
        row["_line"] = lineno
        rows.append(row)
    return rows


def parse_float(row: dict, key: str, source: str, optional: bool = False) -> float | None:
    raw = row.get(key, "")
    if raw == "" and optional:
        return None
    try:
        v = float(raw)
    except ValueError:
        raise SchemaError(f"{source}:{row['_line']}: column {key!r} is not a number: {raw!r}") from None
    if not math.isfinite(v):
        raise SchemaError(f"{source}:{row['_line']}: column {key!r} is not finite")
    return v


def parse_label(row: dict, key: str, source: str) -> int:
    raw = row.get(key, "").strip()
    if raw not in ("0", "1"):
        raise SchemaError(f"{source}:{row['_line']}: column {key!r} must be 0 or 1, got {raw!r}")
    return int(raw)


@dataclass
class FeatureTable:
    ids: list[str]
    p_deep: list[float | None]
    mrd1_mm: np.ndarray
    iris_ratio_pct: np.ndarray
    labels: np.ndarray | None

    def matrix(self, features) -> np.ndarray:
        cols = []
        for f in features:
            if f == "p_deep":
                if any(p is None for p in self.p_deep):
                    raise SchemaError("p_deep column has empty cells but the model needs it")
                cols.append(np.asarray(self.p_deep, dtype=float))
            else:
                cols.append(getattr(self, f))
        return np.column_stack(cols)


def read_feature_csv(path, need_labels: bool = True) -> FeatureTable:
    source = str(path)
    required = FEATURE_HEADER if need_labels else FEATURE_HEADER[:3]
    rows = read_csv(path, required)
    if not rows:
        raise SchemaError(f"{source}:2: no data rows")
    ids = [r.get("id") or str(i) for i, r in enumerate(rows)]
    return FeatureTable(
        ids=ids,
        p_deep=[parse_float(r, "p_deep", source, optional=True) for r in rows],
        mrd1_mm=np.array([parse_float(r, "mrd1_mm", source) for r in rows]),
        iris_ratio_pct=np.array([parse_float(r, "iris_ratio_pct", source) for r in rows]),
        labels=np.array([parse_label(r, "label", source) for r in rows]) if need_labels else None,
    )


def write_suite(out_dir, items) -> None:
    """Write ``NNNN.pgm``, ``NNNN.landmarks.json`` and ``truth.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, truth) in enumerate(items):
        stem = f"{i:04d}"
        write_bytes_atomic(out / f"{stem}.pgm", encode_pgm(img))
        write_bytes_atomic(
            out / f"{stem}.landmarks.json",
            landmarks_json(f"{stem}.pgm", [truth.landmarks]).encode("utf-8"),
        )
        rows.append((stem, truth.mrd1_px, truth.mrd1_mm, truth.iris_ratio_pct, truth.label))
    write_csv(out / "truth.csv", TRUTH_HEADER, rows)
