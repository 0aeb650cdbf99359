"""Classifiers over clinical features, deep/clinical fusion, face aggregation.

Labels are 1 = ptosis, 0 = not ptosis. Feature matrices are ``(n, d)``
float arrays whose columns are named by each model's ``feature_names``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

FEATURES = ("p_deep", "mrd1_mm", "iris_ratio_pct")
CLINICAL_FEATURES = ("mrd1_mm", "iris_ratio_pct")
MODEL_FORMAT = "ptosiskit-model"
MODEL_VERSION = 1

BELOW = "below"
ABOVE = "above"

FUSION_T_LO = 0.34
FUSION_T_HI = 0.78


class FitError(ValueError):
    """Training data cannot support the requested fit."""


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X and y disagree: {X.shape} vs {y.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    return X, y.astype(np.int64)


def class_weights(y: np.ndarray, balanced: bool) -> tuple[int, int]:
    """Integer (negative, positive) class weights.

    Balanced weights are proportional to n / (2 n_c); multiplying through
    by 2 n_neg n_pos / n gives the integers (n_pos, n_neg).
    """
    n_pos = int(np.sum(y == 1))
    n_neg = int(y.size - n_pos)
    if not balanced or n_pos == 0 or n_neg == 0:
        return 1, 1
    return n_pos, n_neg


# --- single-feature threshold ------------------------------------------------


@dataclass(frozen=True)
class ThresholdClassifier:
    feature: str
    threshold: float
    direction: str
    accuracy: float = math.nan
    kind = "threshold"

    @property
    def feature_names(self) -> tuple[str, ...]:
        return (self.feature,)

    def predict(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float).reshape(-1)
        hit = x < self.threshold if self.direction == BELOW else x > self.threshold
        return hit.astype(np.int64)

    def score(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float).reshape(-1)
        return -x if self.direction == BELOW else x

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(self.feature_names),
            "threshold": _enc_float(self.threshold),
            "direction": self.direction,
            "train_accuracy": self.accuracy,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ThresholdClassifier":
        (feature,) = d["features"]
        if d["direction"] not in (BELOW, ABOVE):
            raise ValueError(f"bad threshold direction {d['direction']!r}")
        return cls(feature, _dec_float(d["threshold"]), d["direction"], float(d.get("train_accuracy", math.nan)))


def _cut(a: float, b: float, upper_inclusive: bool) -> float:
    """Midpoint of ``a < b`` that still separates them.

    Adjacent floats have no float strictly between them and the rounded
    midpoint lands on an endpoint; fall back to the endpoint that keeps
    the comparison separating. ``upper_inclusive`` means the cut may equal
    ``b`` (used with ``x < t``); otherwise it may equal ``a`` (``x > t``,
    ``x <= t``).
    """
    mid = (a + b) / 2.0
    if upper_inclusive:
        return mid if a < mid else b
    return mid if mid < b else a


def fit_threshold(X, y, feature: int = 0, feature_names: Sequence[str] | None = None, balanced: bool = True) -> ThresholdClassifier:
    """Exhaustive accuracy-maximising threshold on one feature column.

    Candidates are the midpoints between consecutive distinct values plus
    -inf/+inf, in both directions. With ``balanced`` each class counts with
    weight inverse to its frequency. Ties go to the smaller threshold, then
    to the "below" direction.
    """
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2:
        raise FitError("threshold fit needs both classes")
    x = X[:, feature]
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    w_neg, w_pos = class_weights(y, balanced)

    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    # candidate j sits in gap j of the unique values (gap 0 / last = -inf / +inf);
    # k[j] is the number of samples strictly below it
    u = np.unique(xs)
    k = np.concatenate(([0], np.searchsorted(xs, u[1:], side="left"), [xs.size]))
    pos_cum = np.concatenate(([0], np.cumsum(ys)))
    n_pos = int(ys.sum())
    n_neg = ys.size - n_pos
    pos_below = pos_cum[k]
    neg_below = k - pos_below
    # "below": predict 1 for x < t
    score_below = w_pos * pos_below + w_neg * (n_neg - neg_below)
    # "above": predict 1 for x > t  (no sample equals a candidate)
    score_above = w_pos * (n_pos - pos_below) + w_neg * neg_below

    scores = np.stack([score_below, score_above], axis=1).reshape(-1)
    best = int(np.argmax(scores))  # first maximum: smaller threshold, then below
    ci, di = divmod(best, 2)
    if ci == 0:
        t = -math.inf
    elif ci == u.size:
        t = math.inf
    else:
        t = _cut(float(u[ci - 1]), float(u[ci]), upper_inclusive=di == 0)
    clf = ThresholdClassifier(names[feature], t, (BELOW, ABOVE)[di])
    acc = float(np.mean(clf.predict(x) == y))
    return ThresholdClassifier(clf.feature, clf.threshold, clf.direction, acc)


# --- CART decision tree -------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    # leaf when feature is None
    label: int
    prob: float
    n: int
    feature: int | None = None
    threshold: float = math.nan
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def to_dict(self) -> dict:
        d = {"label": self.label, "prob": self.prob, "n": self.n}
        if not self.is_leaf:
            d.update(feature=self.feature, threshold=self.threshold, left=self.left.to_dict(), right=self.right.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TreeNode":
        if "feature" not in d:
            return cls(int(d["label"]), float(d["prob"]), int(d["n"]))
        return cls(
            int(d["label"]),
            float(d["prob"]),
            int(d["n"]),
            int(d["feature"]),
            float(d["threshold"]),
            cls.from_dict(d["left"]),
            cls.from_dict(d["right"]),
        )


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    feature_names: tuple[str, ...]
    max_depth: int = 3
    min_leaf: int = 5
    kind = "tree"

    def _leaf(self, row) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        return node

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self._leaf(row).label for row in X], dtype=np.int64)

    def score(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.array([self._leaf(row).prob for row in X], dtype=float)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(self.feature_names),
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DecisionTree":
        return cls(TreeNode.from_dict(d["root"]), tuple(d["features"]), int(d["max_depth"]), int(d["min_leaf"]))


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    # sum over children of (w0^2 + w1^2) / W, exact; larger means purer
    purity: Fraction


def _purity(w0: int, w1: int) -> Fraction:
    total = w0 + w1
    return Fraction(w0 * w0 + w1 * w1, total) if total else Fraction(0)


def best_split(X: np.ndarray, y: np.ndarray, weights: tuple[int, int], min_leaf: int) -> Split | None:
    """Best weighted-Gini split, or None when no split lowers impurity.

    Weighted Gini of a split is ``W - sum_children (w0^2 + w1^2) / W_child``,
    so maximising the child purity sum minimises it. Scores are exact
    rationals; ties keep the lower feature index, then the smaller value.
    """
    w_neg, w_pos = weights
    n = y.size
    tot_pos = int(y.sum())
    parent = _purity(w_neg * (n - tot_pos), w_pos * tot_pos)
    best: Split | None = None
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        pos_cum = np.cumsum(ys)
        for i in range(min_leaf - 1, n - min_leaf):
            if xs[i] == xs[i + 1]:
                continue
            left_n = i + 1
            lp = int(pos_cum[i])
            rp = tot_pos - lp
            purity = _purity(w_neg * (left_n - lp), w_pos * lp) + _purity(w_neg * (n - left_n - rp), w_pos * rp)
            if purity <= parent:
                continue
            if best is None or purity > best.purity:
                best = Split(f, _cut(float(xs[i]), float(xs[i + 1]), upper_inclusive=False), purity)
    return best


def _leaf_for(y: np.ndarray, weights: tuple[int, int]) -> TreeNode:
    w_neg, w_pos = weights
    pos = w_pos * int(y.sum())
    neg = w_neg * int(y.size - y.sum())
    prob = pos / (pos + neg) if pos + neg else 0.5
    return TreeNode(label=int(pos >= neg), prob=float(prob), n=int(y.size))


def fit_tree(
    X,
    y,
    max_depth: int = 3,
    min_leaf: int = 5,
    feature_names: Sequence[str] | None = None,
    balanced: bool = True,
) -> DecisionTree:
    """CART classification tree with (optionally class-balanced) Gini impurity.

    Single-class or too-small data yields a one-leaf majority tree.
    """
    X, y = _check_xy(X, y)
    if min_leaf < 1 or max_depth < 0:
        raise ValueError("min_leaf must be >= 1 and max_depth >= 0")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    weights = class_weights(y, balanced)

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        ys = y[idx]
        leaf = _leaf_for(ys, weights)
        if depth >= max_depth or idx.size < 2 * min_leaf or ys.min() == ys.max():
            return leaf
        split = best_split(X[idx], ys, weights, min_leaf)
        if split is None:
            return leaf
        go_left = X[idx, split.feature] <= split.threshold
        return TreeNode(
            leaf.label,
            leaf.prob,
            leaf.n,
            split.feature,
            split.threshold,
            grow(idx[go_left], depth + 1),
            grow(idx[~go_left], depth + 1),
        )

    return DecisionTree(grow(np.arange(y.size), 0), names, max_depth, min_leaf)


# --- logistic regression --------------------------------------------------------


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_loss_grad(params: np.ndarray, Z: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean cross-entropy plus ``l2 |w|^2 / 2`` and its gradient.

    ``params`` is ``[w_1, ..., w_d, bias]``; the bias is not penalised.
    """
    w, b = params[:-1], params[-1]
    z = Z @ w + b
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w, w))
    resid = _sigmoid(z) - y
    grad = np.empty_like(params)
    grad[:-1] = Z.T @ resid / y.size + l2 * w
    grad[-1] = np.mean(resid)
    return loss, grad


@dataclass(frozen=True)
class LogisticConfig:
    learning_rate: float = 1.0
    max_iter: int = 20000
    tol: float = 1e-6
    l2: float = 0.01


@dataclass(frozen=True)
class LogisticModel:
    weights: tuple[float, ...]
    bias: float
    mean: tuple[float, ...]
    scale: tuple[float, ...]
    feature_names: tuple[str, ...] = FEATURES
    loss_history: tuple[float, ...] = field(default=(), repr=False, compare=False)
    kind = "logistic"

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (X - np.asarray(self.mean)) / np.asarray(self.scale)

    def score(self, X) -> np.ndarray:
        return _sigmoid(self.standardize(X) @ np.asarray(self.weights) + self.bias)

    def predict(self, X) -> np.ndarray:
        return (self.score(X) >= 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(self.feature_names),
            "weights": list(self.weights),
            "bias": self.bias,
            "standardization": {"mean": list(self.mean), "scale": list(self.scale)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LogisticModel":
        std = d["standardization"]
        model = cls(
            tuple(float(v) for v in d["weights"]),
            float(d["bias"]),
            tuple(float(v) for v in std["mean"]),
            tuple(float(v) for v in std["scale"]),
            tuple(d["features"]),
        )
        if not (len(model.weights) == len(model.mean) == len(model.scale) == len(model.feature_names)):
            raise ValueError("logistic model parameter lengths disagree")
        return model


def fit_logistic(X, y, config: LogisticConfig | None = None, feature_names: Sequence[str] = FEATURES) -> LogisticModel:
    """Full-batch gradient descent from zero on standardised features.

    A step that would raise the loss is rejected and the step size halved,
    so the recorded loss sequence never increases.
    """
    cfg = config or LogisticConfig()
    X, y = _check_xy(X, y)
    if len(np.unique(y)) < 2:
        raise FitError("logistic fit needs both classes")
    if X.shape[1] != len(feature_names):
        raise ValueError(f"{X.shape[1]} feature columns but {len(feature_names)} names")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    yf = y.astype(float)

    params = np.zeros(X.shape[1] + 1)
    lr = cfg.learning_rate
    loss, grad = logistic_loss_grad(params, Z, yf, cfg.l2)
    history = [loss]
    for _ in range(cfg.max_iter):
        if np.max(np.abs(grad)) < cfg.tol:
            break
        trial = params - lr * grad
        trial_loss, trial_grad = logistic_loss_grad(trial, Z, yf, cfg.l2)
        if trial_loss > loss:
            lr *= 0.5
            if lr < 1e-12:
                break
            continue
        params, loss, grad = trial, trial_loss, trial_grad
        history.append(loss)
    return LogisticModel(
        tuple(float(v) for v in params[:-1]),
        float(params[-1]),
        tuple(float(v) for v in mean),
        tuple(float(v) for v in scale),
        tuple(feature_names),
        tuple(history),
    )


# --- ensemble, fusion, aggregation ------------------------------------------------


def ensemble_average(probs: Sequence[float], cutoff: float = 0.5) -> tuple[float, int]:
    p = np.asarray(probs, dtype=float).reshape(-1)
    if p.size == 0:
        raise ValueError("need at least one probability")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    mean = float(np.sort(p).sum() / p.size)
    return mean, int(mean >= cutoff)


Model = Union[ThresholdClassifier, DecisionTree, LogisticModel]


def predict_features(model: Model, features: Mapping[str, float]) -> int:
    """Predict one sample given a name -> value mapping."""
    missing = [f for f in model.feature_names if f not in features or features[f] is None]
    if missing:
        raise KeyError(f"model needs features {missing}")
    row = np.array([[float(features[f]) for f in model.feature_names]])
    return int(model.predict(row)[0])


@dataclass(frozen=True)
class FusionPolicy:
    deferred: Model
    t_lo: float = FUSION_T_LO
    t_hi: float = FUSION_T_HI

    def __post_init__(self):
        if not 0.0 <= self.t_lo <= self.t_hi <= 1.0:
            raise ValueError(f"need 0 <= t_lo <= t_hi <= 1, got {self.t_lo}, {self.t_hi}")


def _feature_map(p_deep: float, measurements) -> dict:
    if isinstance(measurements, Mapping):
        m = dict(measurements)
    else:
        m = {"mrd1_mm": measurements.mrd1_mm, "iris_ratio_pct": measurements.iris_ratio_pct}
    m["p_deep"] = p_deep
    return m


def fuse(p_deep: float, measurements, policy: FusionPolicy) -> tuple[int, str]:
    """Trust the deep probability outside ``[t_lo, t_hi]``, else defer.

    Returns ``(label, used)`` with ``used`` in {"deep", "deferred"}.
    """
    if not 0.0 <= p_deep <= 1.0:
        raise ValueError(f"p_deep must lie in [0, 1], got {p_deep}")
    if p_deep < policy.t_lo:
        return 0, "deep"
    if p_deep > policy.t_hi:
        return 1, "deep"
    return predict_features(policy.deferred, _feature_map(p_deep, measurements)), "deferred"


def fit_fusion_band(p_val, y_val) -> tuple[float, float]:
    """Tightest ``[t_lo, t_hi]`` with no deep-model error outside it.

    ``t_lo`` is the smallest ptosis probability and ``t_hi`` the largest
    non-ptosis probability on validation data; a separable set collapses
    the band to the midpoint of the gap.
    """
    p = np.asarray(p_val, dtype=float)
    y = np.asarray(y_val)
    if not (np.any(y == 1) and np.any(y == 0)):
        raise FitError("fusion band needs both classes")
    t_lo = float(p[y == 1].min())
    t_hi = float(p[y == 0].max())
    if t_lo > t_hi:
        mid = (t_lo + t_hi) / 2.0
        return mid, mid
    return t_lo, t_hi


_FACE = {(1, 1): "both", (1, 0): "left-only", (0, 1): "right-only", (0, 0): "none"}
FACE_LABELS = tuple(_FACE.values())


def aggregate_face(left: int, right: int) -> str:
    """Four-class face label from per-eye labels (1 = ptosis)."""
    return _FACE[(int(bool(left)), int(bool(right)))]


# --- serialisation ---------------------------------------------------------------------


def _enc_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def _dec_float(v) -> float:
    return float(v)


_KINDS = {"threshold": ThresholdClassifier, "tree": DecisionTree, "logistic": LogisticModel}


def model_to_json(model: Model) -> str:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION, **model.to_dict()}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def model_from_json(text: str) -> Model:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a ptosiskit model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind not in _KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    unknown = [f for f in doc["features"] if f not in FEATURES]
    if unknown:
        raise ValueError(f"unknown feature names {unknown}")
    return _KINDS[kind].from_dict(doc)
