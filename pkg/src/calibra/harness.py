"""Sample-size sweep harness and report plumbing.

A sweep draws subsamples without replacement from a fixed pool at
log2-spaced tick sizes, runs each configured estimator on every
replicate, and reports per-tick means and standard errors.  Replicate
seeds derive from the master seed plus the (tick, replicate) pair, so a
report is reproducible bit for bit regardless of thread count or
scheduling order.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from . import recal as rc
from . import synth
from .core import LabeledPredictions, Split, ValidationError

# Replicate schedule matching the reference experiments tick for tick.
DEFAULT_REPLICATES = (20000, 15842, 12168, 8978, 6272, 4050, 2312, 1058, 288, 2)
MIN_TICK = 100


def log2_ticks(max_size, min_size=MIN_TICK, count=10) -> tuple[int, ...]:
    """`count` sizes from min_size to max_size, evenly spaced in log2."""
    if max_size < min_size:
        raise ValidationError("pool smaller than the smallest tick")
    if count < 2:
        return (int(max_size),)
    grid = np.logspace(
        math.log2(min_size), math.log2(max_size), num=count, base=2.0
    )
    sizes = sorted({int(round(v)) for v in grid})
    sizes[-1] = int(max_size)
    return tuple(sizes)


@dataclass(frozen=True)
class SweepConfig:
    sizes: tuple[int, ...]
    replicates: tuple[int, ...]
    master_seed: int
    threads: int = 1

    def __post_init__(self):
        sizes = tuple(int(v) for v in self.sizes)
        reps = tuple(int(v) for v in self.replicates)
        if len(sizes) != len(reps):
            raise ValidationError("one replicate count per tick size")
        if any(v < 1 for v in sizes) or any(v < 1 for v in reps):
            raise ValidationError("tick sizes and replicate counts must be positive")
        if list(sizes) != sorted(sizes):
            raise ValidationError("tick sizes must be ascending")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "replicates", reps)


def default_sweep_config(pool_size, master_seed, threads=1) -> SweepConfig:
    sizes = log2_ticks(pool_size)
    reps = DEFAULT_REPLICATES[-len(sizes):]
    return SweepConfig(sizes, reps, master_seed, threads)


@dataclass(frozen=True)
class ReportRow:
    estimator: str
    map: str
    n: int
    mean: float
    se: float
    replicates: int


@dataclass(frozen=True)
class RelativeBiasRow:
    estimator: str
    map: str
    n: int
    ratio: float | None
    se_ratio: float | None
    replicates: int
    defined: bool = True


@dataclass(frozen=True, eq=False)
class Report:
    rows: tuple
    metadata: dict = field(default_factory=dict)


def _replicate_rng(master_seed, tick_index, replicate_index):
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), int(tick_index), int(replicate_index)])
    )


def _mean_se(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    mean = float(np.mean(values))
    if len(values) < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _run_tick(pools, tick_index, size, n_replicates, configs, config):
    """Estimator values for one tick: (map, estimator, replicate) array."""
    pool_size = next(iter(pools.values())).n_items
    out = np.empty((len(pools), len(configs), n_replicates))

    def one(r):
        rng = _replicate_rng(config.master_seed, tick_index, r)
        idx = rng.choice(pool_size, size=size, replace=False)
        for a, pool in enumerate(pools.values()):
            sub = pool.subset(idx)
            for b, cfg in enumerate(configs):
                out[a, b, r] = est.estimate(sub, cfg).value

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(one, range(n_replicates)))
    else:
        for r in range(n_replicates):
            one(r)
    return out


def _resolve_pool(source, pool_size, master_seed):
    if isinstance(source, LabeledPredictions):
        return source
    if isinstance(source, synth.FiniteJointModel):
        if pool_size is None:
            raise ValidationError("sampling a joint needs an explicit pool size")
        return synth.sample(source, pool_size, np.random.SeedSequence([master_seed, 2**31]))
    raise ValidationError("source must be labeled predictions or a finite joint")


def sweep(
    source,
    configs,
    config: SweepConfig,
    maps: dict[str, rc.RecalMap] | None = None,
    pool_size=None,
) -> Report:
    """Size sweep of estimator values, before and after optional maps.

    `maps` are already-fitted recalibration maps; each is applied to the
    whole pool once and every replicate indexes both pools identically,
    so before/after rows at one tick describe the same subsamples.
    """
    pool = _resolve_pool(source, pool_size, config.master_seed)
    if config.sizes[-1] > pool.n_items:
        raise ValidationError("largest tick exceeds the pool size")
    configs = tuple(configs)
    pools = {"none": pool}
    for name, m in (maps or {}).items():
        pools[name] = rc.apply(m, pool)

    rows = []
    for t, (size, reps) in enumerate(zip(config.sizes, config.replicates)):
        values = _run_tick(pools, t, size, reps, configs, config)
        for a, map_name in enumerate(pools):
            for b, cfg in enumerate(configs):
                mean, se = _mean_se(values[a, b])
                rows.append(ReportRow(cfg.label(), map_name, size, mean, se, reps))
    metadata = {
        "master_seed": config.master_seed,
        "pool_fingerprint": pool.fingerprint(),
        "pool_size": pool.n_items,
    }
    return Report(tuple(rows), metadata)


def relative_bias(report: Report) -> Report:
    """Divide each series by its value at the largest tick.

    A zero reference marks the series undefined instead of dividing;
    consumers check the flag rather than meeting NaNs.
    """
    by_series: dict[tuple[str, str], list[ReportRow]] = {}
    for row in report.rows:
        by_series.setdefault((row.estimator, row.map), []).append(row)
    rows = []
    for series in by_series.values():
        reference = max(series, key=lambda r: r.n)
        for row in sorted(series, key=lambda r: r.n):
            if reference.mean == 0.0:
                rows.append(
                    RelativeBiasRow(row.estimator, row.map, row.n, None, None,
                                    row.replicates, defined=False)
                )
            else:
                rows.append(
                    RelativeBiasRow(
                        row.estimator,
                        row.map,
                        row.n,
                        row.mean / reference.mean,
                        row.se / abs(reference.mean),
                        row.replicates,
                    )
                )
    return Report(tuple(rows), dict(report.metadata))


def improvement_sweep(
    split: Split,
    maps: dict[str, rc.RecalMap],
    configs,
    config: SweepConfig,
) -> Report:
    """Before-minus-after sweep on the test pool of a fitted split.

    Maps must have been fitted on `split.validation`; the test pool is
    disjoint by construction of `Split`, and its fingerprint plus the
    validation fingerprint land in the report metadata.  Every map and
    tick yields a plain row and a squared-space row (suffix `_sq`).
    """
    pool = split.test
    if config.sizes[-1] > pool.n_items:
        raise ValidationError("largest tick exceeds the test pool size")
    configs = tuple(configs)
    if not maps:
        raise ValidationError("need at least one fitted map")
    pools = {"none": pool}
    for name, m in maps.items():
        pools[name] = rc.apply(m, pool)

    rows = []
    for t, (size, reps) in enumerate(zip(config.sizes, config.replicates)):
        values = _run_tick(pools, t, size, reps, configs, config)
        base = values[0]
        for a, map_name in enumerate(pools):
            if map_name == "none":
                continue
            for b, cfg in enumerate(configs):
                plain = base[b] - values[a, b]
                squared = base[b] ** 2 - values[a, b] ** 2
                mean, se = _mean_se(plain)
                rows.append(ReportRow(cfg.label(), map_name, size, mean, se, reps))
                mean, se = _mean_se(squared)
                rows.append(
                    ReportRow(cfg.label() + "_sq", map_name, size, mean, se, reps)
                )
    metadata = {
        "master_seed": config.master_seed,
        "validation_fingerprint": split.validation.fingerprint(),
        "pool_fingerprint": pool.fingerprint(),
        "pool_size": pool.n_items,
    }
    return Report(tuple(rows), metadata)


def report_to_csv(report: Report) -> str:
    lines = ["estimator,map,n,mean,se,replicates"]
    for row in report.rows:
        if isinstance(row, RelativeBiasRow):
            mean = "" if not row.defined else repr(row.ratio)
            se = "" if not row.defined else repr(row.se_ratio)
        else:
            mean, se = repr(row.mean), repr(row.se)
        lines.append(f"{row.estimator},{row.map},{row.n},{mean},{se},{row.replicates}")
    return "\n".join(lines) + "\n"


def report_to_json(report: Report) -> str:
    rows = []
    for row in report.rows:
        if isinstance(row, RelativeBiasRow):
            rows.append(
                {
                    "estimator": row.estimator,
                    "map": row.map,
                    "n": row.n,
                    "mean": row.ratio,
                    "se": row.se_ratio,
                    "replicates": row.replicates,
                    "defined": row.defined,
                }
            )
        else:
            rows.append(
                {
                    "estimator": row.estimator,
                    "map": row.map,
                    "n": row.n,
                    "mean": row.mean,
                    "se": row.se,
                    "replicates": row.replicates,
                }
            )
    return json.dumps(
        {"schema_version": 1, "rows": rows, "metadata": report.metadata}, indent=2
    )
