"""Proper scores, divergences, and the calibration decomposition.

A score S(P, y) is summarized by a `ScoreDefinition` bundling the
pointwise score, the generalized entropy g(Q) = E_{Y~Q} S(Q, Y), and the
infimum of g over the simplex when one exists.  The expected-score gap
to that infimum is an estimable upper bound on the score's calibration
error; the decomposition splits an expected score over a finite joint
into entropy, sharpness, and calibration terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .core import LabeledPredictions, ValidationError

if TYPE_CHECKING:  # pragma: no cover
    from .synth import FiniteJointModel


class UnsupportedScoreError(ValueError):
    """The score lacks a finite entropy infimum, so no bound exists."""


@dataclass(frozen=True)
class ScoreDefinition:
    """A proper score with its entropy and entropy infimum.

    `pointwise_score(p, y)` evaluates S at one prediction/outcome pair,
    `entropy(q)` evaluates g(Q), and `entropy_infimum` is inf_Q g(Q) or
    None when the infimum is not finite.
    """

    name: str
    pointwise_score: Callable
    entropy: Callable
    entropy_infimum: float | None
    strictly_proper: bool = True


def brier(p, y) -> float:
    """Squared distance between the prediction and the one-hot outcome."""
    p = np.asarray(p, dtype=float)
    y = int(y)
    if not 0 <= y < len(p):
        raise IndexError(f"outcome {y} outside [0, {len(p)})")
    return float(p @ p - 2.0 * p[y] + 1.0)


def log_score(p, y) -> float:
    """Negative log-likelihood; +inf when the outcome has probability 0."""
    p = np.asarray(p, dtype=float)
    y = int(y)
    if not 0 <= y < len(p):
        raise IndexError(f"outcome {y} outside [0, {len(p)})")
    if p[y] == 0.0:
        return math.inf
    return float(-np.log(p[y]))


def _brier_entropy(q) -> float:
    q = np.asarray(q, dtype=float)
    return float(1.0 - q @ q)


def _shannon_entropy(q) -> float:
    q = np.asarray(q, dtype=float)
    pos = q[q > 0]
    return float(-(pos * np.log(pos)).sum())


BRIER = ScoreDefinition("brier", brier, _brier_entropy, 0.0)
LOG = ScoreDefinition("log", log_score, _shannon_entropy, 0.0)


def score_against(score: ScoreDefinition, p, q) -> float:
    """s(P, Q) = E_{Y~Q} S(P, Y), enumerated over outcomes with q_y > 0."""
    q = np.asarray(q, dtype=float)
    total = 0.0
    for y in range(len(q)):
        if q[y] > 0.0:
            total += q[y] * score.pointwise_score(p, y)
    return total


def divergence(score: ScoreDefinition, p, q) -> float:
    """d(P, Q) = s(P, Q) - g(Q); nonnegative for proper scores."""
    return score_against(score, p, q) - score.entropy(q)


def expected_score(data: LabeledPredictions, score: ScoreDefinition) -> float:
    """Mean pointwise score over the dataset; +inf propagates untouched."""
    total = 0.0
    for p, y in zip(data.predictions, data.labels):
        v = score.pointwise_score(p, int(y))
        if math.isinf(v):
            return math.inf
        total += v
    return total / data.n_items


def mean_brier(data: LabeledPredictions) -> float:
    """Vectorized Brier mean, identical to expected_score(data, BRIER)."""
    p = data.predictions
    py = p[np.arange(data.n_items), data.labels]
    return float(np.mean(np.sum(p * p, axis=1) - 2.0 * py + 1.0))

def rbs(data: LabeledPredictions) -> float:
    """Root Brier score, the canonical estimable calibration bound."""
    return math.sqrt(mean_brier(data))


def upper_bound(data: LabeledPredictions, score: ScoreDefinition) -> float:
    """Expected score minus the entropy infimum.

    Bounds the score's calibration error from above without touching any
    conditional distribution.  Scores whose entropy is unbounded below
    carry no such bound.
    """
    if score.entropy_infimum is None:
        raise UnsupportedScoreError(
            f"score {score.name!r} has no finite entropy infimum; compare "
            "models through expected_score differences instead"
        )
    return expected_score(data, score) - score.entropy_infimum


@dataclass(frozen=True)
class DecompositionResult:
    entropy: float
    sharpness: float
    calibration: float
    expected_score: float

    @property
    def residual(self) -> float:
        """entropy - sharpness + calibration - expected_score; 0 in exact arithmetic."""
        return self.entropy - self.sharpness + self.calibration - self.expected_score


def decompose(joint: "FiniteJointModel", score: ScoreDefinition) -> DecompositionResult:
    """Exact entropy/sharpness/calibration split of an expected score.

    Enumerates a finite joint whose support atoms carry exact outcome
    conditionals.  All three terms must come out finite; a score that
    diverges on the support is rejected.
    """
    z = joint.predictions
    pi = joint.weights
    q = joint.conditionals
    marginal = pi @ q

    g_marginal = score.entropy(marginal)
    sharp = 0.0
    calib = 0.0
    exp_score = 0.0
    for j in range(len(pi)):
        g_j = score.entropy(q[j])
        s_pred = score_against(score, z[j], q[j])
        sharp += pi[j] * (score_against(score, marginal, q[j]) - g_j)
        calib += pi[j] * (s_pred - g_j)
        exp_score += pi[j] * s_pred
    parts = (g_marginal, sharp, calib, exp_score)
    if not all(math.isfinite(v) for v in parts):
        raise ValidationError(f"score {score.name!r} diverges on the joint's support")
    return DecompositionResult(*parts)


def verify_entropy_consistency(score: ScoreDefinition, q, atol=1e-10) -> bool:
    """Check g(Q) == E_{Y~Q} S(Q, Y) by enumeration."""
    return abs(score.entropy(q) - score_against(score, q, q)) <= atol


__all__ = [
    "BRIER",
    "LOG",
    "DecompositionResult",
    "ScoreDefinition",
    "UnsupportedScoreError",
    "brier",
    "decompose",
    "divergence",
    "expected_score",
    "log_score",
    "mean_brier",
    "rbs",
    "score_against",
    "upper_bound",
    "verify_entropy_consistency",
]
