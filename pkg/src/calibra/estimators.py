"""Sample estimators of classification calibration errors.

All estimators are symmetric statistics of the rows.  Binned variants
share one binning code path: equal-width bins are the right-closed
partition ((i-1)/m, i/m] and equal-mass bins split the stably sorted
values into m near-equal runs, with duplicated boundary values pulled
into the earlier bin so the result depends only on row values, never on
row order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import scores
from .core import LabeledPredictions, ValidationError, equal_width_bin_indices


class ConfigError(ValueError):
    """Estimator configuration is inconsistent or unknown."""


@dataclass(frozen=True)
class BinningScheme:
    kind: str = "equal_width"
    m: int = 15

    def __post_init__(self):
        if self.kind not in ("equal_width", "equal_mass"):
            raise ConfigError(f"unknown binning kind {self.kind!r}")
        if int(self.m) < 1:
            raise ConfigError("need at least one bin")
        object.__setattr__(self, "m", int(self.m))


DEFAULT_ECE_BINS = BinningScheme("equal_width", 15)


def _equal_mass_bin_indices(values, m):
    """0-based group index per item; ties never straddle a boundary."""
    n = len(values)
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    base, extra = divmod(n, m)
    sizes = np.full(m, base)
    sizes[:extra] += 1
    ends = np.cumsum(sizes)
    out = np.empty(n, dtype=int)
    start = 0
    for i in range(m):
        end = max(int(ends[i]), start)
        if end > start:
            while end < n and sorted_vals[end] == sorted_vals[end - 1]:
                end += 1
        out[order[start:end]] = i
        start = end
    return out


@dataclass(frozen=True, eq=False)
class BinStats:
    """Per-bin summaries over the nonempty bins only."""

    bin_index: np.ndarray  # which of the m bins each row below describes
    count: np.ndarray
    freq: np.ndarray       # count / N
    conf: np.ndarray       # mean channel value
    acc: np.ndarray        # empirical success rate
    var_conf: np.ndarray   # population variance of the channel value
    var_acc: np.ndarray    # acc * (1 - acc)
    n_bins: int
    n_items: int

    @property
    def empty_bins(self) -> int:
        return self.n_bins - len(self.bin_index)


def _channel_arrays(data, channel):
    if channel == "top":
        return data.top_confidences(), data.top_correct()
    k = int(channel)
    if not 0 <= k < data.n_classes:
        raise ConfigError(f"channel {k} outside [0, {data.n_classes})")
    return data.predictions[:, k], (data.labels == k).astype(float)


def bin_stats(data: LabeledPredictions, scheme: BinningScheme, channel="top") -> BinStats:
    values, success = _channel_arrays(data, channel)
    m = scheme.m
    if scheme.kind == "equal_width":
        idx = equal_width_bin_indices(values, m)
    else:
        idx = _equal_mass_bin_indices(values, m)
    count = np.bincount(idx, minlength=m)
    sums = np.bincount(idx, weights=values, minlength=m)
    sq_sums = np.bincount(idx, weights=values * values, minlength=m)
    hits = np.bincount(idx, weights=success, minlength=m)
    keep = count > 0
    c = count[keep].astype(float)
    conf = sums[keep] / c
    acc = hits[keep] / c
    var_conf = np.maximum(sq_sums[keep] / c - conf * conf, 0.0)
    return BinStats(
        bin_index=np.nonzero(keep)[0],
        count=count[keep],
        freq=c / data.n_items,
        conf=conf,
        acc=acc,
        var_conf=var_conf,
        var_acc=acc * (1.0 - acc),
        n_bins=m,
        n_items=data.n_items,
    )


def ece(data: LabeledPredictions, scheme: BinningScheme = DEFAULT_ECE_BINS) -> float:
    """Binned top-label estimate: sum_i p_i |conf_i - acc_i|."""
    stats = bin_stats(data, scheme, channel="top")
    return float(stats.freq @ np.abs(stats.conf - stats.acc))


def _binned_power_gap(stats: BinStats, p, debias):
    gap_p = np.abs(stats.conf - stats.acc) ** p
    if not debias:
        return float(stats.freq @ gap_p)
    if p != 2.0:
        raise ConfigError("debiasing is defined for p == 2 only")
    # plug-in variance of the per-bin success rate; singleton bins carry
    # no variance estimate and keep their raw squared gap
    corr = np.where(
        stats.count > 1,
        stats.var_acc / np.maximum(stats.count - 1, 1),
        0.0,
    )
    return max(float(stats.freq @ (gap_p - corr)), 0.0)


def tce_p(
    data: LabeledPredictions,
    p=2.0,
    scheme: BinningScheme = BinningScheme("equal_mass", 15),
    debias=False,
) -> float:
    """Binned top-label error with exponent p, optionally debiased at p = 2."""
    p = float(p)
    if p < 1.0:
        raise ConfigError("p must be >= 1")
    stats = bin_stats(data, scheme, channel="top")
    return _binned_power_gap(stats, p, debias) ** (1.0 / p)


def cwce_p(
    data: LabeledPredictions,
    p=2.0,
    scheme: BinningScheme = BinningScheme("equal_width", 15),
) -> float:
    """Classwise binned error: every class channel binned over all rows."""
    p = float(p)
    if p < 1.0:
        raise ConfigError("p must be >= 1")
    total = 0.0
    for k in range(data.n_classes):
        stats = bin_stats(data, scheme, channel=k)
        total += float(stats.freq @ np.abs(stats.conf - stats.acc) ** p)
    return total ** (1.0 / p)


def ks(data: LabeledPredictions) -> float:
    """Max absolute partial mean of (confidence - correctness), sorted by confidence."""
    conf = data.top_confidences()
    correct = data.top_correct()
    order = np.argsort(conf, kind="stable")
    s = np.cumsum(conf[order] - correct[order]) / data.n_items
    return float(np.max(np.abs(s)))


def kde_tce(data: LabeledPredictions, p=2.0, bandwidth="auto") -> float:
    """Kernel-regression top-label error.

    Correctness is smoothed over confidence with a Gaussian kernel
    (Silverman bandwidth 1.06 sd N^(-1/5) by default, 0.01 when the
    confidences are constant) and the residual |conf - smoothed|^p is
    averaged and rooted.
    """
    p = float(p)
    if p < 1.0:
        raise ConfigError("p must be >= 1")
    if data.n_items < 10:
        raise ValidationError("kernel regression needs at least 10 rows")
    conf = data.top_confidences()
    correct = data.top_correct()
    if bandwidth == "auto":
        sd = float(np.std(conf, ddof=1))
        h = 1.06 * sd * data.n_items ** (-0.2)
        if h == 0.0:
            h = 0.01
    else:
        h = float(bandwidth)
        if h <= 0:
            raise ConfigError("bandwidth must be positive")
    diff = conf[:, None] - conf[None, :]
    w = np.exp(-(diff * diff) / (2.0 * h * h))
    smoothed = (w @ correct) / w.sum(axis=1)
    return float(np.mean(np.abs(conf - smoothed) ** p) ** (1.0 / p))


def mmce(data: LabeledPredictions, nu=0.4) -> float:
    """Kernel mean embedding norm of the confidence residual (V-statistic).

    Laplacian kernel exp(-|a - b| / nu) on confidences; the squared form
    is clipped at zero before the root to absorb float cancellation.
    """
    if nu <= 0:
        raise ConfigError("kernel width must be positive")
    conf = data.top_confidences()
    d = conf - data.top_correct()
    k = np.exp(-np.abs(conf[:, None] - conf[None, :]) / nu)
    val = float(d @ k @ d) / (data.n_items ** 2)
    return math.sqrt(max(val, 0.0))


def skce(data: LabeledPredictions, nu=1.0) -> float:
    """Unbiased squared kernel calibration error over prediction vectors.

    Matrix kernel exp(-|p - q|^2 / (2 nu^2)) I; the U-statistic averages
    h_ij = k(p_i, p_j) (p_i - e_{y_i}) . (p_j - e_{y_j}) over unordered
    pairs and may legitimately be negative.
    """
    if nu <= 0:
        raise ConfigError("kernel width must be positive")
    if data.n_items < 2:
        raise ValidationError("the pair statistic needs at least 2 rows")
    p = data.predictions
    r = p.copy()
    r[np.arange(data.n_items), data.labels] -= 1.0
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    k = np.exp(-np.maximum(d2, 0.0) / (2.0 * nu * nu))
    h = k * (r @ r.T)
    n = data.n_items
    return float((h.sum() - np.trace(h)) / (n * (n - 1)))


def rbs(data: LabeledPredictions) -> float:
    return scores.rbs(data)


@dataclass(frozen=True)
class EstimatorConfig:
    """Dispatchable estimator description.

    name: ece | tce | cwce | ks | kde_tce | mmce | skce | rbs.
    Fields that a given estimator ignores are left at their defaults.
    """

    name: str = "ece"
    p: float = 2.0
    binning: BinningScheme | None = None
    debias: bool = False
    bandwidth: object = "auto"
    nu: float | None = None

    def label(self) -> str:
        parts = [self.name]
        if self.name in ("tce", "cwce", "kde_tce"):
            parts.append(f"p{self.p:g}")
        if self.binning is not None:
            parts.append(f"{self.binning.kind[6:]}{self.binning.m}")
        if self.debias:
            parts.append("debiased")
        return "_".join(parts)


@dataclass(frozen=True)
class EstimateResult:
    value: float
    metadata: dict = field(default_factory=dict)


def estimate(data: LabeledPredictions, config: EstimatorConfig) -> EstimateResult:
    """Run one configured estimator and echo the configuration back."""
    binning = config.binning
    empty = None
    if config.name == "ece":
        scheme = binning or DEFAULT_ECE_BINS
        value = ece(data, scheme)
        empty = bin_stats(data, scheme).empty_bins
    elif config.name == "tce":
        scheme = binning or BinningScheme("equal_mass", 15)
        value = tce_p(data, config.p, scheme, config.debias)
        empty = bin_stats(data, scheme).empty_bins
    elif config.name == "cwce":
        scheme = binning or BinningScheme("equal_width", 15)
        value = cwce_p(data, config.p, scheme)
        empty = 0
    elif config.name == "ks":
        value = ks(data)
    elif config.name == "kde_tce":
        value = kde_tce(data, config.p, config.bandwidth)
    elif config.name == "mmce":
        value = mmce(data, config.nu if config.nu is not None else 0.4)
    elif config.name == "skce":
        value = skce(data, config.nu if config.nu is not None else 1.0)
    elif config.name == "rbs":
        value = rbs(data)
    else:
        raise ConfigError(f"unknown estimator {config.name!r}")
    meta = {"n": data.n_items, "estimator": config.label()}
    if empty is not None:
        meta["empty_bins"] = int(empty)
    return EstimateResult(float(value), meta)
