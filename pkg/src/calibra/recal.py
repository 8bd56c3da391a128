"""Recalibration maps, their fitting routines, and improvement accounting.

Maps are fitted on a validation set and applied row-wise to prediction
vectors.  Injective maps (temperature scaling, the three-component
mixture with positive weight on the tempered branch) cannot change the
conditional outcome distribution given the prediction, so any drop in
an estimable score bound is a genuine drop in calibration error; the
lookup-table transform is deliberately not injective.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import estimators
from .core import LabeledPredictions, ValidationError, decimal17
from .synth import FiniteJointModel, temper

LOG_T_LO = -5.0
LOG_T_HI = 5.0
LOG_T_TOL = 1e-6
ETS_STEP = 0.1
ETS_ITERATIONS = 500


class FitError(ValueError):
    """The validation data cannot identify the requested map."""


@dataclass(frozen=True, eq=False)
class RecalMap:
    """One fitted recalibration map.

    kind: identity | temperature | ets | tf_multiclass | tf_binary |
    platt_variance.  Only the fields of the active kind are set.
    """

    kind: str = "identity"
    temperature: float | None = None
    weights: tuple | None = None      # (tempered, raw, uniform) on the simplex
    table: np.ndarray | None = None   # tf_multiclass: one row per class
    lo: float | None = None           # tf_binary cell for rows below 0.5
    hi: float | None = None
    w: float | None = None            # platt_variance affine coefficients
    b: float | None = None

    @property
    def injective(self) -> bool:
        if self.kind in ("identity", "temperature"):
            return True
        if self.kind == "ets":
            return self.weights[0] > 0.0
        if self.kind == "platt_variance":
            return self.w is not None and self.w > 0.0
        return False

    def name(self) -> str:
        if self.kind == "temperature":
            return f"temperature(T={self.temperature:.4g})"
        if self.kind == "ets":
            w = ",".join(f"{v:.3g}" for v in self.weights)
            return f"ets(T={self.temperature:.4g},w={w})"
        return self.kind


def identity_map() -> RecalMap:
    return RecalMap(kind="identity")


def temperature_map(temperature) -> RecalMap:
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    return RecalMap(kind="temperature", temperature=float(temperature))


def apply(recal_map: RecalMap, data: LabeledPredictions) -> LabeledPredictions:
    """Apply a classification map row-wise; labels pass through untouched."""
    p = data.predictions
    if recal_map.kind == "identity":
        return data
    if recal_map.kind == "temperature":
        out = temper(p, recal_map.temperature)
    elif recal_map.kind == "ets":
        w1, w2, w3 = recal_map.weights
        out = w1 * temper(p, recal_map.temperature) + w2 * p + w3 / data.n_classes
    elif recal_map.kind == "tf_multiclass":
        if recal_map.table.shape[1] != data.n_classes:
            raise ValidationError("table class count does not match the data")
        out = recal_map.table[data.top_indices()]
    elif recal_map.kind == "tf_binary":
        if data.n_classes != 2:
            raise ValidationError("the binary transform needs exactly 2 classes")
        v = np.where(p[:, 1] >= 0.5, recal_map.hi, recal_map.lo)
        out = np.column_stack([1.0 - v, v])
    elif recal_map.kind == "platt_variance":
        raise ValidationError("platt_variance acts on Gaussian predictions, see regress")
    else:
        raise ValidationError(f"unknown map kind {recal_map.kind!r}")
    return LabeledPredictions(np.ascontiguousarray(out), data.labels, validate=False)


def apply_to_joint(recal_map: RecalMap, joint: FiniteJointModel) -> FiniteJointModel:
    """Push a joint through a map, merging atoms the map glues together.

    Atoms whose transformed predictions coincide exactly are pooled
    (weights added, conditionals weight-averaged), which is what
    conditioning on the transformed prediction does.  Injective maps on
    distinct support never merge anything.
    """
    transformed = apply(
        recal_map,
        LabeledPredictions(
            joint.predictions, np.zeros(joint.support_size, dtype=int), validate=False
        ),
    ).predictions
    groups: dict[bytes, int] = {}
    z_rows, w_rows, q_rows = [], [], []
    for j in range(joint.support_size):
        key = transformed[j].tobytes()
        if key in groups:
            g = groups[key]
            w_rows[g] += joint.weights[j]
            q_rows[g] += joint.weights[j] * joint.conditionals[j]
        else:
            groups[key] = len(z_rows)
            z_rows.append(transformed[j])
            w_rows.append(float(joint.weights[j]))
            q_rows.append(joint.weights[j] * joint.conditionals[j].copy())
    w = np.asarray(w_rows)
    q = np.asarray(q_rows) / w[:, None]
    q = q / q.sum(axis=1, keepdims=True)
    return FiniteJointModel(np.asarray(z_rows), w / w.sum(), q)


def _nll(probs_true_label) -> float:
    if np.any(probs_true_label <= 0.0):
        return math.inf
    return float(-np.mean(np.log(probs_true_label)))


def _temperature_nll(data, log_t) -> float:
    out = temper(data.predictions, math.exp(log_t))
    return _nll(out[np.arange(data.n_items), data.labels])


INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
INV_PHI_SQ = (3.0 - math.sqrt(5.0)) / 2.0


def golden_section_min(f, lo, hi, tol, history=None):
    """Golden-section search; returns the midpoint of the final bracket.

    The bracket shrinks by the golden ratio each step; `history`
    collects the bracket width after every shrink when provided.
    """
    a, b = float(lo), float(hi)
    h = b - a
    if h <= tol:
        return (a + b) / 2.0
    c = a + INV_PHI_SQ * h
    d = a + INV_PHI * h
    fc, fd = f(c), f(d)
    while h > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            h = b - a
            c = a + INV_PHI_SQ * h
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            h = b - a
            d = a + INV_PHI * h
            fd = f(d)
        if history is not None:
            history.append(h)
    return (a + b) / 2.0


def _check_fit_data(val: LabeledPredictions):
    if val.n_items < 2:
        raise FitError("need at least 2 validation rows")
    if len(np.unique(val.labels)) < 2:
        raise FitError("validation labels are degenerate (single class)")


def fit_temperature(val: LabeledPredictions) -> RecalMap:
    """Minimize validation NLL over log T in [-5, 5] by golden section."""
    _check_fit_data(val)
    log_t = golden_section_min(
        lambda x: _temperature_nll(val, x), LOG_T_LO, LOG_T_HI, LOG_T_TOL
    )
    return temperature_map(math.exp(log_t))


def _simplex_projection(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort algorithm)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ranks = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / ranks > 0.0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def fit_ets(val: LabeledPredictions) -> RecalMap:
    """Fit the tempered/raw/uniform mixture.

    Temperature comes from plain NLL fitting first; the mixture weights
    then follow by projected gradient descent on the simplex from
    (1, 0, 0), keeping the best iterate, so the result never loses to
    temperature scaling alone.
    """
    ts = fit_temperature(val)
    rows = np.arange(val.n_items)
    tempered = temper(val.predictions, ts.temperature)[rows, val.labels]
    raw = val.predictions[rows, val.labels]
    uniform = np.full(val.n_items, 1.0 / val.n_classes)
    comps = np.stack([tempered, raw, uniform], axis=1)  # (N, 3)

    def objective(w):
        return _nll(comps @ w)

    w = np.array([1.0, 0.0, 0.0])
    best_w, best_val = w.copy(), objective(w)
    for _ in range(ETS_ITERATIONS):
        mix = comps @ w
        if np.any(mix <= 0.0):
            grad = np.zeros(3)
        else:
            grad = -np.mean(comps / mix[:, None], axis=0)
        w = _simplex_projection(w - ETS_STEP * grad)
        value = objective(w)
        if value < best_val:
            best_w, best_val = w.copy(), value
    return RecalMap(kind="ets", temperature=ts.temperature, weights=tuple(best_w))


def tf_transform(val: LabeledPredictions, binary=False) -> RecalMap:
    """Fit the lookup-table transform.

    Multiclass: predictions collapse to the empirical label distribution
    of their top class, so the transformed model is perfectly calibrated
    on the fitting population while conditioning information is thrown
    away.  Binary: rows split at probability 0.5 on class 1 and each
    side maps to its empirical class-1 rate.
    """
    if binary:
        if val.n_classes != 2:
            raise FitError("the binary transform needs exactly 2 classes")
        upper = val.predictions[:, 1] >= 0.5
        if not upper.any() or upper.all():
            raise FitError("one side of the 0.5 threshold is empty")
        hi = float(np.mean(val.labels[upper] == 1))
        lo = float(np.mean(val.labels[~upper] == 1))
        return RecalMap(kind="tf_binary", lo=lo, hi=hi)
    top = val.top_indices()
    table = np.zeros((val.n_classes, val.n_classes))
    missing = []
    for a in range(val.n_classes):
        mask = top == a
        if not mask.any():
            missing.append(a)
            continue
        table[a] = np.bincount(val.labels[mask], minlength=val.n_classes) / mask.sum()
    if missing:
        raise FitError(f"no validation rows with top class in {missing}")
    return RecalMap(kind="tf_multiclass", table=table)


def improvement(
    data: LabeledPredictions,
    recal_map: RecalMap,
    config: estimators.EstimatorConfig,
    squared=False,
) -> float:
    """Estimator value before minus after the map; squared space optional."""
    before = estimators.estimate(data, config).value
    after = estimators.estimate(apply(recal_map, data), config).value
    if squared:
        return before * before - after * after
    return before - after


def map_to_json(recal_map: RecalMap) -> str:
    doc: dict = {"kind": recal_map.kind}
    if recal_map.temperature is not None:
        doc["temperature"] = decimal17(recal_map.temperature)
    if recal_map.weights is not None:
        doc["weights"] = [decimal17(v) for v in recal_map.weights]
    if recal_map.table is not None:
        doc["table"] = [[decimal17(v) for v in row] for row in recal_map.table]
    if recal_map.lo is not None:
        doc["lo"] = decimal17(recal_map.lo)
        doc["hi"] = decimal17(recal_map.hi)
    if recal_map.w is not None:
        doc["w"] = decimal17(recal_map.w)
        doc["b"] = decimal17(recal_map.b)
    return json.dumps(doc, indent=2)


_MAP_KINDS = (
    "identity",
    "temperature",
    "ets",
    "tf_multiclass",
    "tf_binary",
    "platt_variance",
)


def map_from_json(text) -> RecalMap:
    try:
        doc = json.loads(text)
        kind = doc["kind"]
        if kind not in _MAP_KINDS:
            raise ValueError(f"unknown map kind {kind!r}")
        return RecalMap(
            kind=kind,
            temperature=float(doc["temperature"]) if "temperature" in doc else None,
            weights=tuple(float(v) for v in doc["weights"]) if "weights" in doc else None,
            table=np.array([[float(v) for v in row] for row in doc["table"]])
            if "table" in doc
            else None,
            lo=float(doc["lo"]) if "lo" in doc else None,
            hi=float(doc["hi"]) if "hi" in doc else None,
            w=float(doc["w"]) if "w" in doc else None,
            b=float(doc["b"]) if "b" in doc else None,
        )
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"malformed map document: {err}") from None
