"""
Integration tests for end-to-end training runs.
"""

import math

import numpy as np
import pytest

from models.config import with_overrides
from models.records import AdcOp
from services.training_service import TrainingRun, calibrate_tau0, run_experiment
from tests.helpers.fixtures import tiny_config

pytestmark = pytest.mark.integration


def test_zero_iteration_run_reports_the_untrained_cloud(tiny_scene):
    """Test a no-op run: initial K, finite PSNR, no audit events."""
    result = run_experiment(tiny_config(iterations=0), tiny_scene)
    record = result.record

    assert record.final_k == record.initial_k == 8
    assert record.k_trajectory == [(0, 8)]
    assert math.isfinite(record.train_psnr) and math.isfinite(record.test_psnr)
    assert record.gap == pytest.approx(record.train_psnr - record.test_psnr)
    assert len(result.audit) == 0
    assert not record.diverged


def test_baseline_run_is_consistent(baseline_result):
    """Test trajectory, audit reconciliation and evaluated metrics of a baseline run."""
    record = baseline_result.record

    assert not record.diverged
    assert record.k_trajectory[-1] == (400, record.final_k)
    assert baseline_result.audit.reconciles(record.initial_k, record.final_k)
    assert baseline_result.checkpoint.cloud.count == record.final_k
    assert math.isfinite(record.mean_strain)
    assert record.tau0 is not None and record.tau0 > 0
    assert baseline_result.checkpoint.config.adc.tau0 == record.tau0
    assert record.wall_ms == 0.0
    if record.front_loading is not None:
        assert 0.0 <= record.front_loading <= 1.0


def test_runs_are_deterministic(tiny_scene, baseline_result):
    """Test that a re-run reproduces the record, audit log and checkpoint bit-exactly."""
    again = run_experiment(tiny_config("baseline"), tiny_scene)

    assert again.record.csv_row() == baseline_result.record.csv_row()
    assert again.audit.to_csv() == baseline_result.audit.to_csv()
    assert again.checkpoint.same_as(baseline_result.checkpoint)


def test_disabled_adc_keeps_the_initial_cloud(tiny_scene):
    """Test that A1 never changes the Gaussian count."""
    result = run_experiment(tiny_config("A1"), tiny_scene)

    assert result.record.final_k == result.record.initial_k
    assert len(result.audit) == 0


def test_split_ablation_never_splits(tiny_scene):
    """Test that A2 records no split events."""
    result = run_experiment(tiny_config("A2"), tiny_scene)

    assert all(event.op != AdcOp.SPLIT for event in result.audit.events)
    assert result.audit.reconciles(result.record.initial_k, result.record.final_k)


@pytest.mark.parametrize("preset", ["eer", "eer_on_embed", "eer_arap", "eer_no_norm", "ptdrop", "gad", "growthcap", "full"])
def test_regularized_presets_train(tiny_scene, preset):
    """Test that every regularizer preset completes with finite metrics."""
    result = run_experiment(tiny_config(preset), tiny_scene)
    record = result.record

    assert not record.diverged, record.error
    assert math.isfinite(record.test_psnr)
    assert math.isfinite(record.mean_strain)
    assert result.audit.reconciles(record.initial_k, record.final_k)


@pytest.mark.parametrize("kind", ["articulated-two-part", "bouncing"])
def test_other_scene_kinds_train(kind):
    """Test baseline training on the articulated and bouncing generators."""
    result = run_experiment(tiny_config(kind=kind, iterations=200))

    assert not result.record.diverged
    assert result.record.scene == kind


def test_calibration_is_preset_independent(tiny_scene):
    """Test that the calibrated threshold ignores regularizer and ADC ablations."""
    base = calibrate_tau0(tiny_config("baseline"), tiny_scene)

    assert base is not None and base > 0
    assert calibrate_tau0(tiny_config("eer"), tiny_scene) == base
    assert calibrate_tau0(tiny_config("A2"), tiny_scene) == base


def test_non_finite_loss_flags_divergence(tiny_scene, mocker):
    """Test that a NaN loss is recorded as a diverged run, not raised."""
    cfg = with_overrides(tiny_config(), {"adc": {"calibrate_tau0": False}})
    mocker.patch("services.training_service._l1", return_value=(float("nan"), np.zeros(24)))

    record = run_experiment(cfg, tiny_scene).record

    assert record.diverged
    assert "diverged" in record.error
    assert math.isnan(record.test_psnr)
    assert record.csv_row()[-1] == "1"


def test_runaway_growth_flags_divergence(tiny_scene):
    """Test that a cloud outgrowing max_gaussians stops the run and flags it."""
    cfg = with_overrides(tiny_config(), {"adc": {"calibrate_tau0": False, "tau0": 1e-12, "max_gaussians": 9}})

    record = run_experiment(cfg, tiny_scene).record

    assert record.diverged
    assert "limit 9" in record.error
    assert record.final_k > 9
    assert record.k_trajectory[-1][1] == record.final_k
    assert record.iterations > record.k_trajectory[-1][0]
    assert math.isnan(record.test_psnr)


def test_psnr_below_the_untrained_cloud_flags_collapse(tiny_scene, mocker):
    """Test that a run ending below its initial train PSNR is reported as diverged."""
    mocker.patch.object(TrainingRun, "mean_psnr", side_effect=[30.0, 20.0, 18.0])

    record = run_experiment(tiny_config("A1", iterations=20), tiny_scene).record

    assert record.diverged
    assert "below its initial" in record.error
    assert (record.train_psnr, record.test_psnr) == (20.0, 18.0)


def test_wall_time_is_opt_in(tiny_scene, lab_settings):
    """Test that wall time is recorded only when the settings ask for it."""
    timed = lab_settings.model_copy(update={"record_wall_time": True})

    record = run_experiment(tiny_config(iterations=20), tiny_scene, settings=timed).record

    assert record.wall_ms > 0.0
