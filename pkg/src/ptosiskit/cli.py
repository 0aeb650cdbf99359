"""``ptosiskit`` command line: measure, classify, fit, synth, eval, features.

Exit codes: 0 success, 2 input/schema error, 3 computation error, 4 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, classify, evaluation, files, synth
from .classify import FEATURES, CLINICAL_FEATURES, FitError
from .clinical import CalibrationModel, MeasurementError
from .geometry import GeometryError
from .imaging import DEFAULT_MARGIN, ImageError, build_feature_stack
from .pnm import read_image, write_bytes_atomic, write_pgm
from .report import DiagnosisReport, classify_eye, eye_feature_crop, measure_eye_in_image, measurement_report

EXIT_INPUT = 2
EXIT_COMPUTE = 3
EXIT_IO = 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(text: str, out: str | None) -> None:
    if out:
        try:
            write_bytes_atomic(out, text.encode("utf-8"))
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from exc
    else:
        sys.stdout.write(text)


def _load_image(path) -> np.ndarray:
    try:
        return read_image(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"{path}: no such file") from exc
    except ImageError as exc:
        raise CliError(EXIT_INPUT, f"{path}: {exc}") from exc


def _load_landmarks(path) -> files.LandmarkFile:
    try:
        return files.read_landmarks(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"{path}: no such file") from exc


def _measure_one(image_path, landmarks_path, cal, margin, mode, clamp) -> DiagnosisReport:
    lm = _load_landmarks(landmarks_path)
    img = _load_image(image_path)
    prov = {
        "image": {"name": Path(image_path).name, "sha256": files.sha256_file(image_path)},
        "landmarks": {"name": Path(landmarks_path).name, "sha256": files.sha256_file(landmarks_path)},
        "parameters": {
            "iris_diameter_mm": cal.assumed_iris_diameter_mm,
            "margin": margin,
            "mrd1_mode": mode,
            "clamp_mrd1": clamp,
        },
    }
    try:
        return measurement_report(img, lm.eyes, cal, margin, prov, mrd1_mode=mode, clamp_mrd1=clamp)
    except MeasurementError as exc:
        raise CliError(EXIT_COMPUTE, f"measurement failed at stage {exc.stage}: {exc}") from exc
    except (ImageError, GeometryError) as exc:
        raise CliError(EXIT_COMPUTE, f"measurement failed at stage crop: {exc}") from exc


def _read_p_deep_map(path) -> dict[str, float]:
    rows = files.read_csv(path, ("id", "p_deep"))
    return {r["id"]: files.parse_float(r, "p_deep", str(path)) for r in rows}


def cmd_measure(args) -> int:
    cal = CalibrationModel(args.iris_mm)
    if args.suite:
        return _measure_suite(args, cal)
    if not (args.image and args.landmarks):
        raise CliError(EXIT_INPUT, "measure needs IMAGE and LANDMARKS (or --suite DIR)")
    report = _measure_one(args.image, args.landmarks, cal, args.margin, args.mrd1_mode, args.clamp_mrd1)
    _emit(report.to_json(), args.out)
    print(report.summary(), file=sys.stderr)
    return 0


def _measure_suite(args, cal) -> int:
    """Measure every item of a synthetic suite into a feature CSV."""
    if not args.out:
        raise CliError(EXIT_INPUT, "--suite mode needs --out for the feature CSV")
    suite = Path(args.suite)
    truth = files.read_csv(suite / "truth.csv", files.TRUTH_HEADER)
    p_map = _read_p_deep_map(args.p_deep) if args.p_deep else {}

    def work(row):
        stem = row["id"]
        rep = _measure_one(suite / f"{stem}.pgm", suite / f"{stem}.landmarks.json", cal, args.margin, args.mrd1_mode, args.clamp_mrd1)
        m = rep.eyes[0].measurements
        return (stem, p_map.get(stem), m["mrd1_mm"], m["iris_ratio_pct"], files.parse_label(row, "label", "truth.csv"))

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        rows = list(pool.map(work, truth))
    try:
        files.write_csv(args.out, ("id",) + files.FEATURE_HEADER, rows)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    print(f"measured {len(rows)} eyes -> {args.out}", file=sys.stderr)
    return 0


def _load_model(path):
    try:
        return classify.model_from_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"{path}: no such file") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{path}: invalid model file: {exc}") from exc


def _parse_p_deep(spec: str | None):
    """``--p-deep`` as a float, ``left=..,right=..`` pairs, or a CSV path."""
    if spec is None:
        return None
    try:
        return float(spec)
    except ValueError:
        pass
    if "=" in spec and not Path(spec).exists():
        out = {}
        for part in spec.split(","):
            key, _, val = part.partition("=")
            try:
                out[key.strip()] = float(val)
            except ValueError:
                raise CliError(EXIT_INPUT, f"--p-deep: bad value in {part!r}") from None
        return out
    return _read_p_deep_map(spec)


def _lookup_p(p_src, key: str):
    if p_src is None:
        return None
    if isinstance(p_src, float):
        return p_src
    if key not in p_src:
        raise CliError(EXIT_INPUT, f"--p-deep has no value for {key!r}")
    return p_src[key]


def _check_p(p):
    if p is not None and not 0.0 <= p <= 1.0:
        raise CliError(EXIT_INPUT, f"p_deep must lie in [0, 1], got {p}")
    return p


def cmd_classify(args) -> int:
    model = _load_model(args.model)
    t_lo, t_hi = args.fusion
    if not 0.0 <= t_lo <= t_hi <= 1.0:
        raise CliError(EXIT_INPUT, f"--fusion needs 0 <= t_lo <= t_hi <= 1, got {t_lo} {t_hi}")
    p_src = _parse_p_deep(args.p_deep)
    model_params = {"model_kind": model.kind, "model_features": list(model.feature_names), "fusion": [t_lo, t_hi]}

    def decide(features, p):
        if p is None and "p_deep" in model.feature_names:
            raise CliError(EXIT_INPUT, f"model {model.kind} needs p_deep; pass --p-deep")
        try:
            return classify_eye(features, model, _check_p(p), t_lo, t_hi)
        except KeyError as exc:
            raise CliError(EXIT_INPUT, f"model/input feature mismatch: {exc}") from exc

    src = Path(args.input)
    if src.suffix.lower() == ".csv":
        try:
            table = files.read_feature_csv(src, need_labels=False)
        except FileNotFoundError as exc:
            raise CliError(EXIT_INPUT, f"{src}: no such file") from exc
        rows = []
        for i, ident in enumerate(table.ids):
            p = _lookup_p(p_src, ident) if p_src is not None else table.p_deep[i]
            feats = {"mrd1_mm": float(table.mrd1_mm[i]), "iris_ratio_pct": float(table.iris_ratio_pct[i])}
            label, path, score = decide(feats, p)
            rows.append((ident, label, score, path))
        if args.out:
            files.write_csv(args.out, ("id", "prediction", "score", "path"), rows)
        else:
            _emit("id,prediction,score,path\n" + "".join(f"{a},{b},{files._fmt(c)},{d}\n" for a, b, c, d in rows), None)
        return 0

    try:
        report = DiagnosisReport.from_dict(json.loads(src.read_text(encoding="utf-8")))
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"{src}: no such file") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(EXIT_INPUT, f"{src}: not a valid report: {exc}") from exc
    for eye in report.eyes:
        p = _lookup_p(p_src, eye.side)
        label, path, score = decide(eye.measurements, p)
        eye.prediction, eye.decision_path, eye.p_deep, eye.score = label, path, p, score
    report.provenance["classifier"] = {"model_sha256": files.sha256_file(args.model), **model_params}
    _emit(report.to_json(), args.out)
    print(report.summary(), file=sys.stderr)
    return 0


_MODEL_FEATURES = {
    "threshold-mrd1": ("mrd1_mm",),
    "threshold-ir": ("iris_ratio_pct",),
    "tree": CLINICAL_FEATURES,
    "logistic": FEATURES,
}


def cmd_fit(args) -> int:
    try:
        table = files.read_feature_csv(args.csv)
    except FileNotFoundError as exc:
        raise CliError(EXIT_INPUT, f"{args.csv}: no such file") from exc
    feats = _MODEL_FEATURES[args.model]
    X = table.matrix(feats)
    y = table.labels
    idx = np.arange(y.size)
    val_idx = np.array([], dtype=int)
    if args.validation_fraction > 0:
        rng = np.random.default_rng(args.seed)
        perm = rng.permutation(y.size)
        n_val = int(round(args.validation_fraction * y.size))
        val_idx, idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    balanced = not args.unbalanced
    try:
        if len(np.unique(y[idx])) < 2:
            raise FitError("training data has a single class")
        if args.model.startswith("threshold"):
            model = classify.fit_threshold(X[idx], y[idx], 0, feats, balanced=balanced)
        elif args.model == "tree":
            model = classify.fit_tree(X[idx], y[idx], args.max_depth, args.min_leaf, feats, balanced=balanced)
        else:
            cfg = classify.LogisticConfig(l2=args.l2)
            model = classify.fit_logistic(X[idx], y[idx], cfg, feats)
    except FitError as exc:
        raise CliError(EXIT_COMPUTE, f"fit failed: {exc}") from exc
    _emit(classify.model_to_json(model), args.out)
    train_acc = float(np.mean(model.predict(X[idx]) == y[idx]))
    print(f"train accuracy: {train_acc:.4f} (n={idx.size})", file=sys.stderr)
    if val_idx.size:
        val_acc = float(np.mean(model.predict(X[val_idx]) == y[val_idx]))
        print(f"validation accuracy: {val_acc:.4f} (n={val_idx.size})", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    if args.n <= 0:
        raise CliError(EXIT_INPUT, "--n must be positive")
    if not args.droop_min < args.droop_max:
        raise CliError(EXIT_INPUT, "--droop-min must be below --droop-max")
    config = synth.SuiteConfig(
        droop_range=(args.droop_min, args.droop_max),
        noise_range=(0.0, args.noise_max),
        mc_samples=args.mc_samples,
    )
    items = synth.generate_suite(args.n, args.seed, config, jobs=args.jobs)
    try:
        files.write_suite(args.out, items)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write suite to {args.out}: {exc}") from exc
    print(f"wrote {args.n} eyes to {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    pred_rows = files.read_csv(args.predictions, ("id", "prediction"))
    truth_rows = files.read_csv(args.truth, ("id", "label"))
    truth = {r["id"]: files.parse_label(r, "label", args.truth) for r in truth_rows}
    methods: dict[str, dict[str, tuple[int, float | None]]] = {}
    for r in pred_rows:
        name = r.get("method") or "model"
        score = files.parse_float(r, "score", args.predictions, optional=True) if "score" in r else None
        methods.setdefault(name, {})[r["id"]] = (files.parse_label(r, "prediction", args.predictions), score)
    outputs = {}
    for name, by_id in methods.items():
        if set(by_id) != set(truth):
            raise CliError(EXIT_INPUT, f"method {name!r}: prediction ids do not match truth ids")
        ids = sorted(truth)
        preds = [by_id[i][0] for i in ids]
        scores = [by_id[i][1] for i in ids]
        outputs[name] = (preds, None if any(s is None for s in scores) else scores)
    ids = sorted(truth)
    rows = evaluation.evaluate_methods([truth[i] for i in ids], outputs)
    sys.stdout.write(evaluation.table_text(rows))
    if args.csv:
        _emit(evaluation.table_csv(rows), args.csv)
    return 0


def cmd_features(args) -> int:
    lm = _load_landmarks(args.landmarks)
    img = _load_image(args.image)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from exc
    for eye in lm.eyes:
        try:
            crop = eye_feature_crop(img, eye, args.margin)
        except ImageError as exc:
            raise CliError(EXIT_COMPUTE, f"measurement failed at stage crop: {exc}") from exc
        stack = build_feature_stack(crop)
        write_bytes_atomic(out / f"{eye.side}.ptfs", stack.to_bytes())
        if args.pgm:
            from .imaging import CHANNEL_NAMES

            for name, plane in zip(CHANNEL_NAMES, stack.planes):
                write_pgm(out / f"{eye.side}_{name}.pgm", plane)
        print(f"{eye.side}: {stack.width}x{stack.height}x7 -> {out / (eye.side + '.ptfs')}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ptosiskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("measure", help="MRD1 / iris ratio for the eyes in an image")
    p.add_argument("image", nargs="?")
    p.add_argument("landmarks", nargs="?")
    p.add_argument("--suite", help="measure a synthetic suite directory into a feature CSV")
    p.add_argument("--p-deep", help="CSV id,p_deep to merge into --suite output")
    p.add_argument("--iris-mm", type=float, default=11.7, help="assumed horizontal iris diameter (mm)")
    p.add_argument("--margin", type=float, default=DEFAULT_MARGIN)
    p.add_argument("--mrd1-mode", choices=("segment", "vertex"), default="segment")
    p.add_argument("--clamp-mrd1", action="store_true", help="floor MRD1 at 0 instead of keeping the sign")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("classify", help="predict ptosis from a report or feature CSV")
    p.add_argument("input")
    p.add_argument("--model", required=True)
    p.add_argument("--fusion", nargs=2, type=float, metavar=("T_LO", "T_HI"), default=(classify.FUSION_T_LO, classify.FUSION_T_HI))
    p.add_argument("--p-deep", help="deep-model probability: a number, left=P,right=P, or CSV id,p_deep")
    p.add_argument("--out")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("fit", help="fit a classifier on a feature CSV")
    p.add_argument("csv")
    p.add_argument("--model", required=True, choices=tuple(_MODEL_FEATURES))
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--validation-fraction", type=float, default=0.0)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--min-leaf", type=int, default=5)
    p.add_argument("--l2", type=float, default=classify.LogisticConfig.l2)
    p.add_argument("--unbalanced", action="store_true", help="plain accuracy / Gini, no class weighting")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="render a synthetic eye suite with ground truth")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--droop-min", type=float, default=synth.SuiteConfig.droop_range[0])
    p.add_argument("--droop-max", type=float, default=synth.SuiteConfig.droop_range[1])
    p.add_argument("--noise-max", type=float, default=synth.SuiteConfig.noise_range[1])
    p.add_argument("--mc-samples", type=int, default=synth.GT_MC_SAMPLES)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="metrics table from predictions and truth CSVs")
    p.add_argument("predictions")
    p.add_argument("truth")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("features", help="export 7-channel filter stacks per eye")
    p.add_argument("image")
    p.add_argument("landmarks")
    p.add_argument("--out", required=True)
    p.add_argument("--margin", type=float, default=DEFAULT_MARGIN)
    p.add_argument("--pgm", action="store_true", help="also write each channel as a PGM")
    p.set_defaults(func=cmd_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"ptosiskit {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except files.SchemaError as exc:
        print(f"ptosiskit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"ptosiskit {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
