"""Gaussian-prediction regression: scoring, a small density network,
variance recalibration, and an unbiased kernel calibration statistic.

Predictions are (mean, variance) pairs; batches travel as two aligned
float arrays.  Variances below VARIANCE_FLOOR are clamped everywhere,
with a warning so silent clamping cannot hide a collapsed variance head.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import ValidationError, decimal17
from .recal import RecalMap
from .scores import ScoreDefinition

VARIANCE_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the iteration where it happened."""

    def __init__(self, iteration):
        self.iteration = int(iteration)
        super().__init__(f"non-finite loss at iteration {self.iteration}")


def _floor_variance(variance):
    variance = np.asarray(variance, dtype=float)
    if np.any(variance < VARIANCE_FLOOR):
        warnings.warn("variance clamped at the floor", RuntimeWarning, stacklevel=3)
        variance = np.maximum(variance, VARIANCE_FLOOR)
    return variance


@dataclass(frozen=True)
class GaussianPrediction:
    mean: float
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "variance", float(_floor_variance(self.variance)))


def dss(mean, variance, target):
    """Dawid-Sebastiani score (mu - y)^2 / sigma^2 + log sigma^2."""
    mean = np.asarray(mean, dtype=float)
    variance = _floor_variance(variance)
    target = np.asarray(target, dtype=float)
    r = mean - target
    out = r * r / variance + np.log(variance)
    return float(out) if out.ndim == 0 else out


def _dss_entropy(pred) -> float:
    # g(N(mu, s)) = 1 + log s, unbounded below as s -> 0
    return 1.0 + math.log(float(pred[1]))


DSS_SCORE = ScoreDefinition(
    name="dss",
    pointwise_score=lambda pred, y: dss(pred[0], pred[1], y),
    entropy=_dss_entropy,
    entropy_infimum=None,
)


@dataclass(frozen=True, eq=False)
class RegressionDataset:
    features: np.ndarray  # (N, d)
    targets: np.ndarray   # (N,)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ValidationError("features must be (N, d) with one target per row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValidationError("non-finite regression data")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def n_items(self) -> int:
        return len(self.targets)


def friedman1(
    n_items,
    seed,
    heteroscedastic=False,
    include_noise=True,
    noise_param_is_std=False,
) -> RegressionDataset:
    """Friedman's ten-feature benchmark with an optional input-driven noise level.

    y = 10 sin(pi x1 x2) + 20 (x3 - 0.5)^2 + 10 x4 + 5 x5 + eps.  The
    homoscedastic noise has unit variance; the heteroscedastic variant
    draws eps ~ N(0, 0.5 + x6) where 0.5 + x6 is a variance by default
    (`noise_param_is_std` reads it as a standard deviation instead).
    Features 7..10 never enter the target.
    """
    rng = np.random.default_rng(seed)
    x = rng.random((int(n_items), 10))
    signal = (
        10.0 * np.sin(np.pi * x[:, 0] * x[:, 1])
        + 20.0 * (x[:, 2] - 0.5) ** 2
        + 10.0 * x[:, 3]
        + 5.0 * x[:, 4]
    )
    if include_noise:
        if heteroscedastic:
            level = 0.5 + x[:, 5]
            sd = level if noise_param_is_std else np.sqrt(level)
        else:
            sd = 1.0
        signal = signal + sd * rng.standard_normal(int(n_items))
    return RegressionDataset(x, signal)


def friedman1_noise_variance(features, heteroscedastic=False, noise_param_is_std=False):
    """The generating noise variance per row, for oracle comparisons."""
    x = np.asarray(features, dtype=float)
    if not heteroscedastic:
        return np.ones(len(x))
    level = 0.5 + x[:, 5]
    return level * level if noise_param_is_std else level


@dataclass(frozen=True)
class MdnConfig:
    hidden: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    iterations: int = 2000
    seed: int = 0


class MdnModel:
    """One-hidden-layer tanh network with mean and log-variance heads.

    Targets are shifted and scaled to zero mean and unit variance during
    training; predictions are mapped back, so the floor applies in the
    original units.
    """

    def __init__(self, w1, b1, w2, b2, shift=0.0, scale=1.0):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2
        self.shift = float(shift)
        self.scale = float(scale)

    def copy(self) -> "MdnModel":
        return MdnModel(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(),
            self.shift, self.scale,
        )

    def _raw_forward(self, x):
        hidden = np.tanh(x @ self.w1 + self.b1)
        out = hidden @ self.w2 + self.b2
        return hidden, out[:, 0], out[:, 1]

    def predict(self, features):
        """Return (mean, variance) arrays in target units."""
        x = np.asarray(features, dtype=float)
        _, mean, log_var = self._raw_forward(x)
        variance = np.maximum(np.exp(log_var), VARIANCE_FLOOR)
        return (
            mean * self.scale + self.shift,
            np.maximum(variance * self.scale * self.scale, VARIANCE_FLOOR),
        )


def mdn_init(n_features, config: MdnConfig) -> MdnModel:
    rng = np.random.default_rng(config.seed)
    lim1 = 1.0 / math.sqrt(n_features)
    lim2 = 1.0 / math.sqrt(config.hidden)
    return MdnModel(
        w1=rng.uniform(-lim1, lim1, size=(n_features, config.hidden)),
        b1=np.zeros(config.hidden),
        w2=rng.uniform(-lim2, lim2, size=(config.hidden, 2)),
        b2=np.zeros(2),
    )


def mdn_loss_and_grads(model: MdnModel, features, targets):
    """Mean standardized-unit loss and its gradients, by hand.

    The loss per row is (mu - y)^2 / v + log v with v = max(exp(s),
    floor); rows pinned at the floor contribute zero gradient through s.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    hidden, mean, log_var = model._raw_forward(x)
    v_raw = np.exp(log_var)
    clamped = v_raw < VARIANCE_FLOOR
    v = np.where(clamped, VARIANCE_FLOOR, v_raw)
    r = mean - y
    loss = float(np.mean(r * r / v + np.log(v)))

    d_mean = 2.0 * r / v / n
    d_logv = np.where(clamped, 0.0, (1.0 - r * r / v) / n)
    d_out = np.column_stack([d_mean, d_logv])
    grads = {
        "w2": hidden.T @ d_out,
        "b2": d_out.sum(axis=0),
    }
    d_hidden = (d_out @ model.w2.T) * (1.0 - hidden * hidden)
    grads["w1"] = x.T @ d_hidden
    grads["b1"] = d_hidden.sum(axis=0)
    return loss, grads


def mdn_train(
    train: RegressionDataset,
    config: MdnConfig = MdnConfig(),
    callback=None,
    callback_every=25,
) -> MdnModel:
    """Full-batch Adam on the mean DSS loss.

    `callback(iteration, model)` fires every `callback_every` iterations
    and once more after the last one, on a snapshot safe to keep.
    """
    x = train.features
    shift = float(np.mean(train.targets))
    scale = float(np.std(train.targets))
    if scale == 0.0:
        scale = 1.0
    y = (train.targets - shift) / scale
    model = mdn_init(x.shape[1], config)
    model.shift, model.scale = shift, scale

    params = ("w1", "b1", "w2", "b2")
    m = {k: np.zeros_like(getattr(model, k)) for k in params}
    v = {k: np.zeros_like(getattr(model, k)) for k in params}
    for t in range(1, config.iterations + 1):
        loss, grads = mdn_loss_and_grads(model, x, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(t)
        for k in params:
            g = grads[k]
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g
            m_hat = m[k] / (1.0 - config.beta1 ** t)
            v_hat = v[k] / (1.0 - config.beta2 ** t)
            getattr(model, k)[...] -= config.learning_rate * m_hat / (np.sqrt(v_hat) + 1e-8)
        if callback is not None and (t % callback_every == 0 or t == config.iterations):
            callback(t, model.copy())
    return model


def fit_platt_variance(mean, variance, targets) -> RecalMap:
    """Affine variance rescaling v -> max(w v + b, floor) fitted by DSS.

    Plain gradient descent with backtracking from (w, b) = (1, 0); every
    accepted step decreases the fitting loss, so the fitted map never
    scores worse than the identity on its own fitting set.  When the
    input variances are all equal the affine pair is unidentifiable and
    the closed-form optimal constant is returned through b.
    """
    mu = np.asarray(mean, dtype=float)
    v0 = _floor_variance(variance)
    y = np.asarray(targets, dtype=float)
    if not len(mu) == len(v0) == len(y):
        raise ValidationError("mean, variance, and target lengths differ")
    r2 = (mu - y) ** 2

    if float(np.std(v0)) == 0.0:
        v_star = max(float(np.mean(r2)), VARIANCE_FLOOR)
        return RecalMap(kind="platt_variance", w=1.0, b=v_star - float(v0[0]))

    def objective(w, b):
        v = np.maximum(w * v0 + b, VARIANCE_FLOOR)
        return float(np.mean(r2 / v + np.log(v)))

    def gradient(w, b):
        v_aff = w * v0 + b
        active = v_aff > VARIANCE_FLOOR
        v = np.maximum(v_aff, VARIANCE_FLOOR)
        dv = np.where(active, (1.0 / v - r2 / (v * v)) / len(y), 0.0)
        return np.array([float(dv @ v0), float(dv.sum())])

    theta = np.array([1.0, 0.0])
    value = objective(*theta)
    for _ in range(2000):
        g = gradient(*theta)
        norm = float(np.linalg.norm(g))
        if norm < 1e-8:
            break
        step = 1.0
        for _ in range(60):
            cand = theta - step * g
            cand_val = objective(*cand)
            if cand_val <= value - 1e-4 * step * norm * norm:
                theta, value = cand, cand_val
                break
            step *= 0.5
        else:
            break
    return RecalMap(kind="platt_variance", w=float(theta[0]), b=float(theta[1]))


def apply_platt_variance(recal_map: RecalMap, variance) -> np.ndarray:
    if recal_map.kind != "platt_variance":
        raise ValidationError(f"expected a platt_variance map, got {recal_map.kind!r}")
    v = np.asarray(variance, dtype=float)
    out = recal_map.w * v + recal_map.b
    return _floor_variance(out)


def _gaussian_kernel_sq(d2, nu):
    return np.exp(-d2 / (2.0 * nu * nu))


def skce_regression(mean, variance, targets, nu_p=1.0, nu_y=1.0) -> float:
    """Unbiased squared kernel calibration error for Gaussian predictions.

    Prediction kernel: Gaussian in (mean, variance).  Outcome kernel:
    Gaussian in y, with its expectations under the predicted normals
    available in closed form (a Gaussian convolved with a Gaussian stays
    Gaussian), so no quadrature enters the statistic.
    """
    if nu_p <= 0 or nu_y <= 0:
        raise ValidationError("kernel widths must be positive")
    mu = np.asarray(mean, dtype=float)
    v = _floor_variance(variance)
    y = np.asarray(targets, dtype=float)
    n = len(y)
    if n < 2:
        raise ValidationError("the pair statistic needs at least 2 rows")

    dmu = mu[:, None] - mu[None, :]
    dv = v[:, None] - v[None, :]
    k_pred = _gaussian_kernel_sq(dmu * dmu + dv * dv, nu_p)

    dy = y[:, None] - y[None, :]
    k_yy = _gaussian_kernel_sq(dy * dy, nu_y)

    ny2 = nu_y * nu_y
    # E_{z ~ N(mu_j, v_j)} k(y_i, z)
    s1 = ny2 + v[None, :]
    a = nu_y / np.sqrt(s1) * np.exp(-((y[:, None] - mu[None, :]) ** 2) / (2.0 * s1))
    # E k(z_i, z_j) over both predicted normals
    s2 = ny2 + v[:, None] + v[None, :]
    b = nu_y / np.sqrt(s2) * np.exp(-(dmu * dmu) / (2.0 * s2))

    h = k_pred * (k_yy - a - a.T + b)
    return float((h.sum() - np.trace(h)) / (n * (n - 1)))


def expected_outcome_kernel(y_value, mean, variance, nu_y) -> float:
    """Closed-form E_{z ~ N(mean, variance)} exp(-(y - z)^2 / (2 nu_y^2))."""
    s = nu_y * nu_y + variance
    return float(nu_y / math.sqrt(s) * math.exp(-((y_value - mean) ** 2) / (2.0 * s)))


@dataclass(frozen=True)
class Diagnostics:
    avg_var: float
    mse: float
    se_var_ratio_mean: float
    se_var_ratio_sd: float


def diagnostics(mean, variance, targets) -> Diagnostics:
    """Average variance, MSE, and the squared-error/variance ratio spread."""
    mu = np.asarray(mean, dtype=float)
    v = _floor_variance(variance)
    y = np.asarray(targets, dtype=float)
    ratio = (mu - y) ** 2 / v
    return Diagnostics(
        avg_var=float(np.mean(v)),
        mse=float(np.mean((mu - y) ** 2)),
        se_var_ratio_mean=float(np.mean(ratio)),
        se_var_ratio_sd=float(np.std(ratio, ddof=1)) if len(y) > 1 else 0.0,
    )


def variance_experiment(
    seed,
    n_train=100,
    n_val=100,
    n_test=100,
    config: MdnConfig | None = None,
    checkpoint_every=25,
    heteroscedastic=True,
) -> dict:
    """Train a density network on the ten-feature benchmark and track
    variance calibration along the way.

    Every checkpoint logs train/validation DSS, the test average
    variance before and after an affine variance map fitted on the
    validation split, and the kernel calibration statistic of the
    recalibrated test predictions.  The summary reports test diagnostics
    at the checkpoint with the best validation DSS.
    """
    config = config or MdnConfig(seed=int(seed))
    train = friedman1(n_train, (int(seed), 0), heteroscedastic=heteroscedastic)
    val = friedman1(n_val, (int(seed), 1), heteroscedastic=heteroscedastic)
    test = friedman1(n_test, (int(seed), 2), heteroscedastic=heteroscedastic)

    curve: list[dict] = []
    snapshots: list[tuple[int, MdnModel]] = []

    def on_checkpoint(iteration, model):
        mu_t, v_t = model.predict(train.features)
        mu_v, v_v = model.predict(val.features)
        mu_s, v_s = model.predict(test.features)
        platt = fit_platt_variance(mu_v, v_v, val.targets)
        v_s_cal = apply_platt_variance(platt, v_s)
        curve.append(
            {
                "iter": int(iteration),
                "dss_train": float(np.mean(dss(mu_t, v_t, train.targets))),
                "dss_val": float(np.mean(dss(mu_v, v_v, val.targets))),
                "avg_var_raw": float(np.mean(v_s)),
                "avg_var_cal": float(np.mean(v_s_cal)),
                "skce": skce_regression(mu_s, v_s_cal, test.targets),
            }
        )
        snapshots.append((int(iteration), model))

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mdn_train(train, config, callback=on_checkpoint, callback_every=checkpoint_every)

        best = int(np.argmin([row["dss_val"] for row in curve]))
        _, best_model = snapshots[best]
        mu_v, v_v = best_model.predict(val.features)
        platt = fit_platt_variance(mu_v, v_v, val.targets)
        mu_s, v_s = best_model.predict(test.features)
        v_s_cal = apply_platt_variance(platt, v_s)
        raw = diagnostics(mu_s, v_s, test.targets)
        cal = diagnostics(mu_s, v_s_cal, test.targets)

    summary = {
        "best_iter": curve[best]["iter"],
        "dss_val_best": curve[best]["dss_val"],
        "test_mse": raw.mse,
        "avg_var_raw": raw.avg_var,
        "avg_var_cal": cal.avg_var,
        "se_var_ratio_raw": raw.se_var_ratio_mean,
        "se_var_ratio_cal": cal.se_var_ratio_mean,
        "skce_raw": skce_regression(mu_s, v_s, test.targets),
        "skce_cal": skce_regression(mu_s, v_s_cal, test.targets),
        "platt_w": platt.w,
        "platt_b": platt.b,
    }
    return {"curve": curve, "summary": summary}


def regression_to_csv(dataset: RegressionDataset, path) -> None:
    d = dataset.features.shape[1]
    header = ",".join([f"x{k}" for k in range(d)] + ["y"])
    rows = [
        ",".join([decimal17(v) for v in x] + [decimal17(y)])
        for x, y in zip(dataset.features, dataset.targets)
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n" + "\n".join(rows) + "\n")


def regression_from_csv(path) -> RegressionDataset:
    arr = np.genfromtxt(path, delimiter=",", skip_header=1)
    arr = np.atleast_2d(arr)
    if arr.shape[1] < 2 or not np.all(np.isfinite(arr)):
        raise ValidationError(f"malformed regression table in {path}")
    return RegressionDataset(arr[:, :-1], arr[:, -1])


def predictions_to_csv(mean, variance, targets, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mu,var,y\n")
        for m, v, y in zip(mean, variance, targets):
            fh.write(f"{decimal17(m)},{decimal17(v)},{decimal17(y)}\n")
