"""Finite joints with enumerable calibration errors, plus samplers.

A `FiniteJointModel` stores support atoms (z_j, pi_j, q_j): the model
predicts z_j on atom j, the atom has probability pi_j, and the true
outcome distribution on that atom is q_j.  Atoms are identified with
values of the underlying feature variable, so prediction rows may
repeat; errors that condition on a derived statistic (a class
probability, the top-label confidence) pool atoms sharing that value,
while the full calibration error and the score decomposition condition
on the atom itself.  For joints with distinct prediction rows the two
notions coincide.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import (
    LabeledPredictions,
    ValidationError,
    as_prob_matrix,
    decimal17,
    equal_width_bin_indices,
    softmax,
)

WEIGHT_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteJointModel:
    """Support atoms (prediction, weight, outcome conditional)."""

    predictions: np.ndarray  # (J, n)
    weights: np.ndarray      # (J,) positive, sums to 1
    conditionals: np.ndarray  # (J, n) rows on the simplex

    def __post_init__(self):
        z = as_prob_matrix(self.predictions).copy()
        q = as_prob_matrix(self.conditionals).copy()
        pi = np.array(self.weights, dtype=float)
        if z.ndim == 1:
            z = z[None, :]
        if q.ndim == 1:
            q = q[None, :]
        if pi.ndim != 1 or len(pi) != len(z) or len(q) != len(z):
            raise ValidationError("support arrays must share their first dimension")
        if z.shape[1] != q.shape[1]:
            raise ValidationError("prediction and conditional class counts differ")
        if np.any(pi <= 0):
            raise ValidationError("atom weights must be positive")
        if abs(pi.sum() - 1.0) > WEIGHT_ATOL:
            raise ValidationError(f"atom weights sum to {pi.sum()!r}, not 1")
        for arr in (z, pi, q):
            arr.flags.writeable = False
        object.__setattr__(self, "predictions", z)
        object.__setattr__(self, "weights", pi)
        object.__setattr__(self, "conditionals", q)

    @property
    def n_classes(self) -> int:
        return self.predictions.shape[1]

    @property
    def support_size(self) -> int:
        return self.predictions.shape[0]

    def marginal(self) -> np.ndarray:
        """Label marginal P_Y."""
        return self.weights @ self.conditionals

    def accuracy(self) -> float:
        """Probability that the top label matches the outcome."""
        top = np.argmax(self.predictions, axis=1)
        return float(self.weights @ self.conditionals[np.arange(self.support_size), top])


def _pool_by_value(values, weights, numerators):
    """Group by exact value; return (value, weight, numerator/weight) arrays."""
    uniq, inverse = np.unique(values, return_inverse=True)
    w = np.bincount(inverse, weights=weights, minlength=len(uniq))
    num = np.bincount(inverse, weights=numerators, minlength=len(uniq))
    return uniq, w, num / w


def _top_statistics(joint):
    top = np.argmax(joint.predictions, axis=1)
    conf = joint.predictions[np.arange(joint.support_size), top]
    hit = joint.conditionals[np.arange(joint.support_size), top]
    return conf, hit


def _oracle_ce_p(joint, p):
    diff = np.abs(joint.predictions - joint.conditionals) ** p
    return float((joint.weights @ diff.sum(axis=1)) ** (1.0 / p))


def _oracle_ce_brier(joint):
    diff = joint.predictions - joint.conditionals
    return float(joint.weights @ np.sum(diff * diff, axis=1))


def _oracle_brier(joint):
    z = joint.predictions
    q = joint.conditionals
    return float(joint.weights @ (np.sum(z * z, axis=1) - 2.0 * np.sum(z * q, axis=1) + 1.0))


def _oracle_cwce_p(joint, p):
    total = 0.0
    for k in range(joint.n_classes):
        vals, w, cond = _pool_by_value(
            joint.predictions[:, k],
            joint.weights,
            joint.weights * joint.conditionals[:, k],
        )
        total += float(w @ np.abs(vals - cond) ** p)
    return total ** (1.0 / p)


def _oracle_tce_p(joint, p):
    conf, hit = _top_statistics(joint)
    vals, w, acc = _pool_by_value(conf, joint.weights, joint.weights * hit)
    return float((w @ np.abs(vals - acc) ** p) ** (1.0 / p))


def _oracle_ece(joint, m):
    conf, hit = _top_statistics(joint)
    idx = equal_width_bin_indices(conf, m)
    w = np.bincount(idx, weights=joint.weights, minlength=m)
    wc = np.bincount(idx, weights=joint.weights * conf, minlength=m)
    wa = np.bincount(idx, weights=joint.weights * hit, minlength=m)
    keep = w > 0
    return float(np.sum(np.abs(wc[keep] - wa[keep])))


def _oracle_ks(joint):
    conf, hit = _top_statistics(joint)
    vals, w, acc = _pool_by_value(conf, joint.weights, joint.weights * hit)
    deltas = w * (vals - acc)
    return float(np.max(np.abs(np.cumsum(deltas))))


def _oracle_mmce(joint, nu):
    conf, hit = _top_statistics(joint)
    vals, w, acc = _pool_by_value(conf, joint.weights, joint.weights * hit)
    r = w * (vals - acc)
    k = np.exp(-np.abs(vals[:, None] - vals[None, :]) / nu)
    return float(math.sqrt(max(r @ k @ r, 0.0)))


def true_error(joint: FiniteJointModel, which, p=2.0, bins=15, nu=0.4) -> float:
    """Exact calibration error of a finite joint.

    which: ce_p | ce_brier | brier | cwce_p | tce_p | ece | ks | mmce.
    ce_p conditions per atom; cwce/tce/ece/ks/mmce pool atoms by the
    statistic they condition on, and ece uses the same right-closed
    equal-width bins as the sample estimator.
    """
    p = float(p)
    if p < 1.0:
        raise ValidationError("p must be >= 1")
    if which == "ce_p":
        return _oracle_ce_p(joint, p)
    if which == "ce_brier":
        return _oracle_ce_brier(joint)
    if which == "brier":
        return _oracle_brier(joint)
    if which == "cwce_p":
        return _oracle_cwce_p(joint, p)
    if which == "tce_p":
        return _oracle_tce_p(joint, p)
    if which == "ece":
        return _oracle_ece(joint, int(bins))
    if which == "ks":
        return _oracle_ks(joint)
    if which == "mmce":
        return _oracle_mmce(joint, float(nu))
    raise ValidationError(f"unknown error kind {which!r}")


def sample(joint: FiniteJointModel, n_items, seed) -> LabeledPredictions:
    """Draw (prediction, label) pairs from the joint."""
    n_items = int(n_items)
    if n_items < 1:
        raise ValidationError("need at least one draw")
    rng = np.random.default_rng(seed)
    atoms = rng.choice(joint.support_size, size=n_items, p=joint.weights)
    u = rng.random(n_items)
    cdf = np.cumsum(joint.conditionals, axis=1)
    labels = (cdf[atoms] < u[:, None]).sum(axis=1)
    labels = np.minimum(labels, joint.n_classes - 1)
    return LabeledPredictions(joint.predictions[atoms], labels, validate=False)


def calibrated_labels(predictions, seed) -> LabeledPredictions:
    """Attach labels drawn from each prediction row itself."""
    preds = as_prob_matrix(predictions).copy()
    if preds.ndim == 1:
        preds = preds[None, :]
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(preds, axis=1)
    u = rng.random(len(preds))
    labels = (cdf < u[:, None]).sum(axis=1)
    labels = np.minimum(labels, preds.shape[1] - 1)
    return LabeledPredictions(preds, labels, validate=False)


def temper(predictions, temperature) -> np.ndarray:
    """softmax(log p / T); zero entries stay at zero."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    preds = as_prob_matrix(predictions)
    squeeze = preds.ndim == 1
    if squeeze:
        preds = preds[None, :]
    with np.errstate(divide="ignore"):
        logits = np.log(preds)
    # rows are renormalized by softmax; -inf logits drop out as exact zeros
    shifted = logits / temperature
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


class LogisticNormalSampler:
    """Predictions via softmax of correlated Gaussian logits.

    The logit covariance is one inverse-Wishart draw with df = n + 2 and
    scale I/scale, fixed for the sampler's lifetime.  The raw draw is
    then tempered: a scalar gain on the covariance is tuned so that the
    expected top probability (the accuracy under labels sampled from the
    predictions themselves) hits `target_accuracy`.  Tuning uses a fixed
    probe batch, so the whole construction is deterministic given the
    seed.  Pass target_accuracy=None to keep the raw covariance.
    sample() streams softmax(N(0, Sigma)) rows reproducibly.
    """

    PROBE_SIZE = 3000

    def __init__(self, n_classes, scale=0.01, seed=0, target_accuracy=0.876):
        if n_classes < 2:
            raise ValidationError("need at least two classes")
        if scale <= 0:
            raise ValidationError("scale must be positive")
        if target_accuracy is not None and not 1.0 / n_classes < target_accuracy < 1.0:
            raise ValidationError("target accuracy must sit strictly between chance and 1")
        self.n_classes = int(n_classes)
        self.scale = float(scale)
        root = np.random.SeedSequence(seed)
        setup_seq, stream_seq = root.spawn(2)
        setup = np.random.default_rng(setup_seq)
        df = self.n_classes + 2
        psi = np.eye(self.n_classes) / self.scale
        cov = np.atleast_2d(stats.invwishart.rvs(df=df, scale=psi, random_state=setup))
        gain = 1.0
        if target_accuracy is not None:
            probe = setup.standard_normal((self.PROBE_SIZE, self.n_classes))
            gain = _accuracy_gain(probe @ np.linalg.cholesky(cov).T, target_accuracy)
        self.covariance = gain * gain * cov
        self._chol = np.linalg.cholesky(self.covariance)
        self._rng = np.random.default_rng(stream_seq)

    def sample(self, n_items) -> np.ndarray:
        n_items = int(n_items)
        z = self._rng.standard_normal((n_items, self.n_classes))
        return softmax(z @ self._chol.T)


def _accuracy_gain(probe_logits, target) -> float:
    """Scalar logit gain driving E[max softmax] to the target on the probe."""

    def mean_top(log_gain):
        return float(np.max(softmax(math.exp(log_gain) * probe_logits), axis=1).mean())

    lo, hi = -4.0, 8.0
    # expected top probability is increasing in the gain
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        if mean_top(mid) < target:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))


def logistic_normal_model(
    n_classes=100, scale=0.01, seed=0, target_accuracy=0.876
) -> LogisticNormalSampler:
    return LogisticNormalSampler(n_classes, scale, seed, target_accuracy)


def random_joint(n_classes, support_size, seed, concentration=1.0) -> FiniteJointModel:
    """Dirichlet-drawn joint for property tests; prediction rows distinct."""
    rng = np.random.default_rng(seed)
    alpha = np.full(n_classes, concentration)
    z = rng.dirichlet(alpha, size=support_size)
    q = rng.dirichlet(alpha, size=support_size)
    pi = rng.dirichlet(np.ones(support_size))
    pi = np.maximum(pi, 1e-9)
    pi = pi / pi.sum()
    return FiniteJointModel(z, pi, q)


def subatom_joint(points, weights) -> FiniteJointModel:
    """Lift prediction points to atoms with one-hot conditionals.

    Each point z with weight w becomes, for every class k with z_k > 0,
    an atom (z, w * z_k, e_k).  Pooling the atoms of one point by any
    statistic of z reproduces z itself, so every channel-conditioned
    error of the lifted joint vanishes while the atom-conditioned
    calibration error stays large.
    """
    z = as_prob_matrix(points)
    if z.ndim == 1:
        z = z[None, :]
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or len(w) != len(z):
        raise ValidationError("one weight per point")
    if np.any(w <= 0) or abs(w.sum() - 1.0) > WEIGHT_ATOL:
        raise ValidationError("weights must be positive and sum to 1")
    n = z.shape[1]
    preds, pis, conds = [], [], []
    for j in range(len(z)):
        for k in range(n):
            if z[j, k] > 0.0:
                preds.append(z[j])
                pis.append(w[j] * z[j, k])
                e = np.zeros(n)
                e[k] = 1.0
                conds.append(e)
    pis = np.asarray(pis)
    return FiniteJointModel(np.asarray(preds), pis / pis.sum(), np.asarray(conds))


def counterexample(n_classes, epsilon, support_size=4, seed=0) -> FiniteJointModel:
    """A joint with zero channel-conditioned errors but large ce_2.

    Prediction points sit within epsilon of the uniform vector in mean
    squared norm (E|z|^2 <= 1/n + epsilon), so ce_2^2 = 1 - E|z|^2 >=
    1 - 1/n - epsilon even though cwce, tce, ece, ks, and mmce all
    vanish exactly.
    """
    n = int(n_classes)
    if n < 2:
        raise ValidationError("need at least two classes")
    if epsilon <= 0:
        raise ValidationError(
            "epsilon must be positive; E|z|^2 >= 1/n makes epsilon <= 0 infeasible"
        )
    if support_size < 1:
        raise ValidationError("need at least one support point")
    rng = np.random.default_rng(seed)
    # zero-sum perturbations keep rows on the simplex; the radius cap keeps
    # every entry positive and |d|^2 within the epsilon budget
    radius = math.sqrt(min(0.9 * epsilon, 0.2 / n))
    d = rng.standard_normal((support_size, n))
    d = d - d.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    d = d / norms * radius
    entry_cap = 0.5 / n
    biggest = np.abs(d).max()
    if biggest > entry_cap:
        d = d * (entry_cap / biggest)
    z = 1.0 / n + d
    z = z / z.sum(axis=1, keepdims=True)
    if np.mean(np.sum(z * z, axis=1)) > 1.0 / n + epsilon:
        raise ValidationError("could not place support within the epsilon budget")
    w = np.full(support_size, 1.0 / support_size)
    return subatom_joint(z, w / w.sum())


def folded_normal_mean(mu, sigma) -> float:
    """E|Z| for Z ~ N(mu, sigma^2); |mu| when sigma == 0."""
    mu = float(mu)
    sigma = float(sigma)
    if sigma < 0:
        raise ValidationError("sigma must be nonnegative")
    if sigma == 0.0:
        return abs(mu)
    # Phi(x) via erfc keeps relative error near machine precision in the tails
    phi_neg = 0.5 * math.erfc((mu / sigma) / math.sqrt(2.0))
    return (
        math.sqrt(2.0 / math.pi) * sigma * math.exp(-(mu * mu) / (2.0 * sigma * sigma))
        + mu * (1.0 - 2.0 * phi_neg)
    )


@dataclass(frozen=True, eq=False)
class BiasApprox:
    """Per-bin normal approximation of the expected binned estimate."""

    bin_weight: np.ndarray   # p_i over nonempty bins
    gap: np.ndarray          # mu_i = conf_i - acc_i
    sigma_sq: np.ndarray     # (V_conf + V_acc) / (p_i * n)
    mu_n: float              # expected estimate at sample size n
    n: float
    bins: int

    @property
    def oracle_value(self) -> float:
        """Sum of p_i |mu_i|, the n -> infinity limit."""
        return float(self.bin_weight @ np.abs(self.gap))


def ece_bias_mu(joint: FiniteJointModel, n, bins=15) -> BiasApprox:
    """Closed-form approximation of E[binned top-label estimate] at size n.

    Within each bin the estimate's gap is treated as normal with the
    exact conditional mean and a variance shrinking like 1/n_i; the
    expectation of its absolute value is the folded-normal mean.
    """
    n = float(n)
    m = int(bins)
    if n < m:
        raise ValidationError("need at least one expected item per bin")
    conf, hit = _top_statistics(joint)
    idx = equal_width_bin_indices(conf, m)
    w = np.bincount(idx, weights=joint.weights, minlength=m)
    wc = np.bincount(idx, weights=joint.weights * conf, minlength=m)
    wc2 = np.bincount(idx, weights=joint.weights * conf * conf, minlength=m)
    wa = np.bincount(idx, weights=joint.weights * hit, minlength=m)
    keep = w > 0
    p_i = w[keep]
    conf_i = wc[keep] / p_i
    acc_i = wa[keep] / p_i
    var_conf = np.maximum(wc2[keep] / p_i - conf_i * conf_i, 0.0)
    var_acc = acc_i * (1.0 - acc_i)
    sigma_sq = (var_conf + var_acc) / (p_i * n)
    gap = conf_i - acc_i
    mu_n = float(
        sum(
            p * folded_normal_mean(g, math.sqrt(s))
            for p, g, s in zip(p_i, gap, sigma_sq)
        )
    )
    return BiasApprox(p_i, gap, sigma_sq, mu_n, n, m)


def ece_bias_curve(joint: FiniteJointModel, sizes, bins=15) -> np.ndarray:
    return np.array([ece_bias_mu(joint, n, bins).mu_n for n in sizes])


def ece_bias_slope(joint: FiniteJointModel, n, bins=15, rel_step=1e-4) -> float:
    """Central-difference d mu_(n) / dn of the closed form."""
    h = max(n * rel_step, 1e-6)
    hi = ece_bias_mu(joint, n + h, bins).mu_n
    lo = ece_bias_mu(joint, n - h, bins).mu_n
    return (hi - lo) / (2.0 * h)


def joint_to_json(joint: FiniteJointModel) -> str:
    support = [
        {
            "z": [decimal17(v) for v in joint.predictions[j]],
            "pi": decimal17(joint.weights[j]),
            "q": [decimal17(v) for v in joint.conditionals[j]],
        }
        for j in range(joint.support_size)
    ]
    return json.dumps({"support": support}, indent=2)


def joint_from_json(text) -> FiniteJointModel:
    try:
        doc = json.loads(text)
        support = doc["support"]
        z = np.array([[float(v) for v in atom["z"]] for atom in support])
        pi = np.array([float(atom["pi"]) for atom in support])
        q = np.array([[float(v) for v in atom["q"]] for atom in support])
    except (KeyError, TypeError, ValueError) as err:
        raise ValidationError(f"malformed joint document: {err}") from None
    return FiniteJointModel(z, pi, q)
