from __future__ import annotations

import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shieldsim.campaign import (CampaignConfig, FaultSpec, Protection, WorkloadSpec, bit_classes,
                                build_plan, pass_schedule, prepare_workload, replay, run_campaign,
                                run_trial, sensitivity_sweep)
from shieldsim.errors import ConfigurationError
from shieldsim.faults import EMPTY_PLAN, FaultPlan, Site, StuckAt, TransientFlip
from shieldsim.mlp import gemm_chain, requantise, tiny_mlp
from shieldsim.numerics import DType

SMALL = WorkloadSpec(samples=32)


def small(**kw) -> CampaignConfig:
    kw.setdefault("workload", SMALL)
    kw.setdefault("trials", 2)
    return CampaignConfig(**kw)


@pytest.fixture(scope="module")
def clean_int8():
    return run_trial(small(), EMPTY_PLAN, Protection.off())


# --------------------------------------------------------------------------- workload

def test_tiny_mlp_lowering_keeps_accuracy():
    model, data = tiny_mlp(DType.INT8)
    acc = (model.predict(model.quantise_input(data.x_test)) == data.y_test).mean()
    assert model.meta["float_accuracy"] > 0.9
    assert acc >= model.meta["float_accuracy"] - 0.03


def test_requantise_rounds_half_up_and_clips():
    assert requantise(np.array([3, 5, -3, 10_000, -10_000]), 1, DType.INT8).tolist() == [2, 3, -1, 127, -128]


def test_gemm_chain_shapes():
    model, x = gemm_chain(16, 3, rows=40)
    assert len(model.layers) == 3 and x.shape == (40, 16)
    assert model.reference(x).shape == (40, 16)


def test_pass_schedule_covers_every_tile():
    work = prepare_workload(SMALL, DType.INT8, 16)
    passes = pass_schedule(work.model, 32, 16)
    # layers 64->32 and 32->10 on a 16-wide array over two row blocks
    assert len(passes) == 2 * (4 * 2 + 2 * 1)


# --------------------------------------------------------------------------- decoupling

@pytest.mark.parametrize("dtype", ["int8", "fp32", "bf16"])
@pytest.mark.parametrize("mode", ["ws", "os"])
def test_fault_free_protected_run_is_bit_identical(dtype, mode):
    cfg = small(dtype=dtype, mode=mode)
    on = run_trial(cfg, EMPTY_PLAN)
    off = run_trial(cfg, EMPTY_PLAN, Protection.off())
    assert on.outputs.tobytes() == off.outputs.tobytes()
    assert on.events == [] and on.error_log == [] and on.tile_faults == 0


def test_fault_free_matches_reference_model(clean_int8):
    work = prepare_workload(SMALL, DType.INT8, 16)
    ref = work.model.reference(work.inputs)
    np.testing.assert_array_equal(clean_int8.outputs[:, :ref.shape[1]], ref)


# --------------------------------------------------------------------------- targeted events

def test_memory_flip_is_corrected_to_oracle(clean_int8):
    cfg = small()
    plan = FaultPlan(0, 0.0, (TransientFlip(Site.MEMORY_RESIDENCY, "A", 0, (3, 5), 6),))
    on = run_trial(cfg, plan)
    off = run_trial(cfg, plan, Protection.off())
    (event,) = on.events
    assert event.outcome == "corrected" and event.status == "corrected"
    np.testing.assert_array_equal(on.outputs, clean_int8.outputs)
    assert not np.array_equal(off.outputs, clean_int8.outputs)


def test_array_partial_sum_flip_is_corrected(clean_int8):
    plan = FaultPlan(0, 0.0, (TransientFlip(Site.PE_PARTIAL_SUM, "array", 1, (2, 7, 4), 12),))
    on = run_trial(small(), plan)
    (event,) = on.events
    assert event.corrected
    np.testing.assert_array_equal(on.outputs, clean_int8.outputs)


def test_stuck_pe_in_ws_raises_tile_faults_that_accumulate():
    cfg = small()
    stuck = StuckAt(Site.ARRAY_INPUT, "array", (3, 9), 6, 1)
    result = run_trial(cfg, FaultPlan(0, 0.0, (), (stuck,)))
    assert result.tile_faults > 1
    (entry,) = [e for e in result.error_log if e["col_or_tile"].startswith("tile")]
    assert entry["col_or_tile"] == "tile-9"
    assert entry["count"] == result.tile_faults


def test_register_double_flip_aborts_the_pass():
    flips = tuple(TransientFlip(Site.REGISTER_BIT, "scale_shift", 0, (), b) for b in (1, 2))
    result = run_trial(small(), FaultPlan(0, 0.0, flips))
    assert result.register_aborts == 1
    assert all(e.detected and not e.corrected for e in result.events)


def test_replay_pairs_protected_and_unprotected_on_one_plan():
    cfg = small()
    plan = build_plan(cfg, 1e-3, trial=0)
    plan = FaultPlan.from_json(plan.to_json())
    on, off = replay(cfg, plan)
    key = lambda e: (e.pass_index, e.site, e.target, e.index, e.bit)
    assert sorted(map(key, on.events)) == sorted(map(key, off.events))
    assert len(on.events) == len(plan)


# --------------------------------------------------------------------------- accounting

@settings(max_examples=8, deadline=None)
@given(trial=st.integers(0, 10_000), rate=st.sampled_from([1e-4, 1e-3, 3e-3]),
       mode=st.sampled_from(["ws", "os"]))
def test_every_event_classified_once(trial, rate, mode):
    cfg = small(mode=mode)
    result = run_trial(cfg, build_plan(cfg, rate, trial), trial=trial)
    for e in result.events:
        assert e.outcome in ("unexposed", "corrected", "detected", "missed")
        assert not e.corrected or e.detected
        if e.detected:
            assert e.latency_cycles > 0


def test_rate_zero_gives_null_coverage_and_baseline_accuracy():
    report = run_campaign(small(faults=FaultSpec(rates=[0.0])))
    (row,) = report.rates
    assert row["injected"] == 0
    assert row["detection_coverage"] is None and row["correction_coverage"] is None
    assert row["accuracy_protected"] == report.baseline["accuracy"] == row["accuracy_unprotected"]
    assert report.baseline["protected_fault_free_identical"]


def test_report_counts_are_nested():
    report = run_campaign(small(faults=FaultSpec(rates=[1e-3, 1e-2])))
    for row in report.rates:
        assert row["corrected"] <= row["detected"] <= row["consequential"] <= row["injected"]
        assert row["detected"] + row["missed"] == row["consequential"]
        for cov in (row["detection_coverage"], row["correction_coverage"]):
            assert cov is None or 0.0 <= cov <= 1.0
        assert sum(s["injected"] for s in row["per_site"].values()) == row["injected"]


def test_campaign_report_is_byte_identical_across_runs_and_workers(tmp_path):
    cfg = small(faults=FaultSpec(rates=[1e-4, 1e-3]), seed=11)
    first = run_campaign(cfg)
    first.write(tmp_path / "a")
    run_campaign(cfg).write(tmp_path / "b")
    cfg.workers = 2
    run_campaign(cfg).write(tmp_path / "c")
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "c" / "report.json").read_bytes().replace(b'"workers": 2', b'"workers": 1') == a
    with open(tmp_path / "a" / "events.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "rate" and len(rows) - 1 == sum(r["injected"] for r in first.rates)


def test_seed_changes_the_plan():
    cfg = small()
    assert build_plan(cfg, 1e-3, 0).to_json() != build_plan(cfg, 1e-3, 1).to_json()
    cfg2 = small(seed=1)
    assert build_plan(cfg, 1e-3, 0).to_json() != build_plan(cfg2, 1e-3, 0).to_json()


# --------------------------------------------------------------------------- config

def test_config_round_trip():
    cfg = small(mode="os", dtype="bf16", faults=FaultSpec(rates=[0.0, 1e-5]))
    again = CampaignConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg


@pytest.mark.parametrize("bad", [
    {"tiles": 0},
    {"pes_per_tile": 0},
    {"dtype": "int4"},
    {"mode": "rs"},
    {"trials": 0},
    {"bogus": 1},
    {"faults": {"rates": [2.0]}},
    {"faults": {"sites": ["Nowhere"]}},
    {"workload": {"kind": "resnet"}},
    {"protection": {"nonlinear_copies": 5}},
    {"protection": {"shields": True}},
])
def test_bad_configs_raise_configuration_error(bad):
    with pytest.raises(ConfigurationError):
        CampaignConfig.from_dict(bad)


def test_load_reports_malformed_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigurationError):
        CampaignConfig.load(path)


# --------------------------------------------------------------------------- sensitivity

def test_bit_classes_partition_float_words():
    for dtype in (DType.FP32, DType.BF16):
        c = bit_classes(dtype)
        assert sorted(c["sign"] + c["exponent"] + c["mantissa"]) == list(range(dtype.width))
        assert sorted(c["sign_exponent"]) == sorted(c["sign"] + c["exponent"])


def test_sensitivity_rate_zero_is_baseline():
    table = sensitivity_sweep(DType.FP32, ["mantissa"], [0.0, 1e-5], runs=2, samples=128)
    assert table.accuracy("mantissa", 0.0) == table.baseline_accuracy


def test_sensitivity_rejects_unknown_class():
    with pytest.raises(ConfigurationError):
        sensitivity_sweep(DType.FP32, ["fraction"], [0.0], runs=1)
