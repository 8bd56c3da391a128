import csv
import io
import json

import numpy as np
import pytest

from calibra import estimators as est
from calibra import harness, recal, synth
from calibra.core import ValidationError, split_pool


def calibrated_pool(seed, n_items, n_classes=3):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_classes), n_items)
    return synth.calibrated_labels(probs, seed=seed + 1)


# ---------------------------------------------------------------- ticks


def test_log2_ticks_default_grid():
    assert harness.log2_ticks(10000) == (
        100, 167, 278, 464, 774, 1292, 2154, 3594, 5995, 10000,
    )


def test_log2_ticks_short_range():
    assert harness.log2_ticks(500) == (
        100, 120, 143, 171, 204, 245, 292, 350, 418, 500,
    )


def test_log2_ticks_endpoints_and_order():
    ticks = harness.log2_ticks(3000, min_size=50, count=7)
    assert ticks[0] == 50 and ticks[-1] == 3000
    assert list(ticks) == sorted(ticks)
    assert len(set(ticks)) == len(ticks)


def test_log2_ticks_max_below_min():
    with pytest.raises(ValidationError):
        harness.log2_ticks(50)


def test_log2_ticks_single_count():
    assert harness.log2_ticks(800, count=1) == (800,)


# ---------------------------------------------------------------- config


def test_sweep_config_length_mismatch():
    with pytest.raises(ValidationError, match="one replicate count per tick"):
        harness.SweepConfig(sizes=(100, 200), replicates=(5,), master_seed=0)


def test_sweep_config_positive():
    with pytest.raises(ValidationError):
        harness.SweepConfig(sizes=(0, 200), replicates=(5, 5), master_seed=0)
    with pytest.raises(ValidationError):
        harness.SweepConfig(sizes=(100, 200), replicates=(5, 0), master_seed=0)


def test_sweep_config_ascending():
    with pytest.raises(ValidationError, match="ascending"):
        harness.SweepConfig(sizes=(200, 100), replicates=(5, 5), master_seed=0)


def test_default_sweep_config_pairs_replicates_to_ticks():
    cfg = harness.default_sweep_config(10000, master_seed=3)
    assert cfg.sizes == harness.log2_ticks(10000)
    assert cfg.replicates == harness.DEFAULT_REPLICATES
    assert cfg.replicates[-1] == 2
    # shorter grids keep the tail of the schedule, one count per tick
    small = harness.default_sweep_config(300, master_seed=3)
    assert len(small.sizes) == len(small.replicates)
    assert small.replicates == harness.DEFAULT_REPLICATES[-len(small.sizes):]


# ---------------------------------------------------------------- sweep


def test_sweep_full_tick_matches_direct_estimate():
    pool = calibrated_pool(70, 300)
    cfg = harness.SweepConfig(sizes=(300,), replicates=(1,), master_seed=11)
    config = est.EstimatorConfig("ece")
    report = harness.sweep(pool, [config], cfg)
    assert len(report.rows) == 1
    row = report.rows[0]
    # one replicate draws a permutation of the whole pool
    assert row.mean == pytest.approx(est.estimate(pool, config).value, rel=1e-12)
    assert row.se == 0.0
    assert row.replicates == 1
    assert row.map == "none"
    assert row.estimator == config.label()


def test_sweep_metadata_and_row_grid():
    pool = calibrated_pool(71, 400)
    cfg = harness.SweepConfig(sizes=(100, 400), replicates=(4, 2), master_seed=12)
    configs = [est.EstimatorConfig("ece"), est.EstimatorConfig("rbs")]
    report = harness.sweep(pool, configs, cfg)
    assert report.metadata["master_seed"] == 12
    assert report.metadata["pool_size"] == 400
    assert report.metadata["pool_fingerprint"] == pool.fingerprint()
    assert len(report.rows) == 4
    assert [(r.estimator, r.n) for r in report.rows] == [
        ("ece", 100), ("rbs", 100), ("ece", 400), ("rbs", 400),
    ]


def test_sweep_rejects_tick_beyond_pool():
    pool = calibrated_pool(72, 150)
    cfg = harness.SweepConfig(sizes=(100, 200), replicates=(2, 2), master_seed=0)
    with pytest.raises(ValidationError, match="exceeds the pool"):
        harness.sweep(pool, [est.EstimatorConfig("ece")], cfg)


def test_sweep_from_joint_needs_pool_size():
    joint = synth.random_joint(2, 5, seed=4)
    cfg = harness.SweepConfig(sizes=(100,), replicates=(2,), master_seed=0)
    with pytest.raises(ValidationError, match="pool size"):
        harness.sweep(joint, [est.EstimatorConfig("ece")], cfg)
    report = harness.sweep(joint, [est.EstimatorConfig("ece")], cfg, pool_size=200)
    assert report.metadata["pool_size"] == 200


def test_sweep_rejects_other_sources():
    cfg = harness.SweepConfig(sizes=(10,), replicates=(2,), master_seed=0)
    with pytest.raises(ValidationError, match="source"):
        harness.sweep(np.ones((5, 2)), [est.EstimatorConfig("ece")], cfg)


def test_sweep_deterministic_and_thread_invariant():
    pool = calibrated_pool(73, 500)
    configs = [est.EstimatorConfig("ece"), est.EstimatorConfig("rbs")]
    serial = harness.SweepConfig(sizes=(80, 250), replicates=(6, 3), master_seed=21)
    threaded = harness.SweepConfig(
        sizes=(80, 250), replicates=(6, 3), master_seed=21, threads=4
    )
    first = harness.sweep(pool, configs, serial)
    again = harness.sweep(pool, configs, serial)
    parallel = harness.sweep(pool, configs, threaded)
    assert first.rows == again.rows
    assert first.rows == parallel.rows


def test_sweep_seed_changes_rows():
    pool = calibrated_pool(74, 300)
    configs = [est.EstimatorConfig("ece")]
    a = harness.sweep(
        pool, configs,
        harness.SweepConfig(sizes=(60,), replicates=(4,), master_seed=1),
    )
    b = harness.sweep(
        pool, configs,
        harness.SweepConfig(sizes=(60,), replicates=(4,), master_seed=2),
    )
    assert a.rows[0].mean != b.rows[0].mean


def test_sweep_with_map_shares_subsamples():
    # identity map: before and after rows must agree bit for bit
    pool = calibrated_pool(75, 300)
    cfg = harness.SweepConfig(sizes=(60, 120), replicates=(4, 4), master_seed=5)
    report = harness.sweep(
        pool, [est.EstimatorConfig("ece")], cfg, maps={"id": recal.identity_map()}
    )
    by_map = {}
    for row in report.rows:
        by_map.setdefault(row.map, []).append((row.n, row.mean, row.se))
    assert by_map["none"] == by_map["id"]


# ---------------------------------------------------------------- bias


def test_relative_bias_reference_is_largest_tick():
    pool = calibrated_pool(60, 2000)
    cfg = harness.SweepConfig(
        sizes=(100, 400, 2000), replicates=(300, 100, 3), master_seed=7
    )
    report = harness.sweep(pool, [est.EstimatorConfig("ece")], cfg)
    rb = harness.relative_bias(report)
    ratios = {row.n: row.ratio for row in rb.rows}
    assert ratios[2000] == pytest.approx(1.0, abs=1e-12)
    # plug-in ece on a calibrated pool is biased upward at small n
    assert ratios[100] > 2.0
    assert ratios[100] > ratios[400] > ratios[2000] * 0.999
    assert all(row.defined for row in rb.rows)


def test_relative_bias_zero_reference_marks_undefined():
    rows = (
        harness.ReportRow("ece", "none", 100, 0.3, 0.01, 5),
        harness.ReportRow("ece", "none", 400, 0.0, 0.0, 5),
    )
    rb = harness.relative_bias(harness.Report(rows, {"master_seed": 0}))
    assert all(not row.defined for row in rb.rows)
    assert all(row.ratio is None and row.se_ratio is None for row in rb.rows)


def test_relative_bias_groups_series_independently():
    rows = (
        harness.ReportRow("ece", "none", 10, 0.4, 0.0, 1),
        harness.ReportRow("ece", "none", 20, 0.2, 0.0, 1),
        harness.ReportRow("brier", "none", 10, 0.5, 0.0, 1),
        harness.ReportRow("brier", "none", 20, 0.5, 0.0, 1),
    )
    rb = harness.relative_bias(harness.Report(rows, {}))
    got = {(r.estimator, r.n): r.ratio for r in rb.rows}
    assert got[("ece", 10)] == pytest.approx(2.0)
    assert got[("ece", 20)] == pytest.approx(1.0)
    assert got[("brier", 10)] == pytest.approx(1.0)


# ---------------------------------------------------------------- improvement


def test_improvement_sweep_identity_map_is_exactly_zero():
    pool = calibrated_pool(62, 400)
    split = split_pool(pool, 200, seed=9)
    cfg = harness.SweepConfig(sizes=(50, 100), replicates=(3, 3), master_seed=13)
    report = harness.improvement_sweep(
        split, {"id": recal.identity_map()}, [est.EstimatorConfig("ece")], cfg
    )
    names = {row.estimator for row in report.rows}
    assert names == {"ece", "ece_sq"}
    for row in report.rows:
        assert row.mean == 0.0 and row.se == 0.0
        assert row.map == "id"
    assert report.metadata["validation_fingerprint"] == split.validation.fingerprint()
    assert report.metadata["pool_fingerprint"] == split.test.fingerprint()


def test_improvement_sweep_fitted_temperature_helps():
    # validation-fitted map against a tempered pool: improvement > 0
    rng = np.random.default_rng(63)
    probs = rng.dirichlet(np.ones(3), 3000)
    pool = synth.calibrated_labels(probs, seed=64)
    blurred = synth.temper(pool.predictions, 1.0 / 0.45)
    pool = pool.__class__(blurred, pool.labels)
    split = split_pool(pool, 1500, seed=10)
    fitted = recal.fit_temperature(split.validation)
    cfg = harness.SweepConfig(sizes=(1500,), replicates=(1,), master_seed=14)
    report = harness.improvement_sweep(
        split, {"ts": fitted}, [est.EstimatorConfig("ece")], cfg
    )
    plain = {row.estimator: row.mean for row in report.rows}
    assert plain["ece"] > 0.02
    assert plain["ece_sq"] > 0.0


def test_improvement_sweep_needs_maps():
    pool = calibrated_pool(65, 200)
    split = split_pool(pool, 100, seed=0)
    cfg = harness.SweepConfig(sizes=(50,), replicates=(2,), master_seed=0)
    with pytest.raises(ValidationError, match="fitted map"):
        harness.improvement_sweep(split, {}, [est.EstimatorConfig("ece")], cfg)


def test_improvement_sweep_tick_beyond_test_pool():
    pool = calibrated_pool(66, 200)
    split = split_pool(pool, 150, seed=0)  # test pool has 50 items
    cfg = harness.SweepConfig(sizes=(80,), replicates=(2,), master_seed=0)
    with pytest.raises(ValidationError, match="test pool"):
        harness.improvement_sweep(
            split, {"id": recal.identity_map()}, [est.EstimatorConfig("ece")], cfg
        )


# ---------------------------------------------------------------- reports


def test_report_to_csv_round_trip():
    pool = calibrated_pool(67, 200)
    cfg = harness.SweepConfig(sizes=(50, 200), replicates=(3, 1), master_seed=8)
    report = harness.sweep(pool, [est.EstimatorConfig("ece")], cfg)
    text = harness.report_to_csv(report)
    lines = text.strip().split("\n")
    assert lines[0] == "estimator,map,n,mean,se,replicates"
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == len(report.rows)
    for rec, row in zip(parsed, report.rows):
        # repr floats reparse exactly
        assert float(rec["mean"]) == row.mean
        assert float(rec["se"]) == row.se
        assert int(rec["n"]) == row.n
        assert int(rec["replicates"]) == row.replicates


def test_report_to_csv_undefined_bias_rows_blank():
    rows = (
        harness.ReportRow("ece", "none", 100, 0.0, 0.0, 5),
        harness.ReportRow("ece", "none", 400, 0.0, 0.0, 5),
    )
    rb = harness.relative_bias(harness.Report(rows, {}))
    text = harness.report_to_csv(rb)
    for line in text.strip().split("\n")[1:]:
        fields = line.split(",")
        assert fields[3] == "" and fields[4] == ""


def test_report_to_json_round_trip():
    pool = calibrated_pool(68, 200)
    cfg = harness.SweepConfig(sizes=(50,), replicates=(3,), master_seed=8)
    report = harness.sweep(pool, [est.EstimatorConfig("ece")], cfg)
    doc = json.loads(harness.report_to_json(report))
    assert doc["schema_version"] == 1
    assert doc["metadata"]["pool_fingerprint"] == pool.fingerprint()
    assert doc["rows"][0]["estimator"] == "ece"
    assert doc["rows"][0]["mean"] == report.rows[0].mean

    rb = harness.relative_bias(report)
    bias_doc = json.loads(harness.report_to_json(rb))
    assert all("defined" in row for row in bias_doc["rows"])
