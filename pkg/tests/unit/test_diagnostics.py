"""
Unit tests for post-hoc strain diagnostics.
"""

import numpy as np
import pytest

from core.errors import ContractError
from models.records import StrainReport
from services.deformation import DeformationField, FieldArchitecture
from services.diagnostics import (
    DEFAULT_TIMESTEPS,
    aggregate_strain,
    heldout_timesteps,
    measure_strain,
    strain_compare,
    strain_per_gaussian,
    strain_reports_csv,
)
from services.regularizers import build_neighbor_graph
from services.scenes import view_protocol
from tests.helpers.fixtures import make_checkpoint, random_field, random_render_cloud


def _report(values) -> StrainReport:
    return StrainReport(per_gaussian=np.asarray(values, dtype=np.float64), timesteps=DEFAULT_TIMESTEPS)


def _with_percentiles(p1: float, median: float, p99: float, mean: float = 1.0) -> StrainReport:
    report = _report([mean])
    report.p1, report.median, report.p99, report.mean = p1, median, p99, mean
    return report


def test_zero_field_has_zero_strain(rng):
    """Test that an untrained (zero) field reports zero strain everywhere."""
    cloud = random_render_cloud(rng, 20)
    ckpt = make_checkpoint(cloud, DeformationField.zeros(FieldArchitecture(dim=2)))

    report = measure_strain(ckpt)

    assert np.all(report.per_gaussian == 0.0)
    assert report.timesteps == DEFAULT_TIMESTEPS
    assert report.k == 8


def test_two_gaussian_example():
    """Test strain 0.25 for both Gaussians 2 apart with one displaced by 1."""
    graph = build_neighbor_graph(np.array([[0.0], [2.0]]), 1)

    values = strain_per_gaussian(graph, [np.array([[0.0], [1.0]])])

    np.testing.assert_allclose(values, [0.25, 0.25])


def test_rigid_translation_has_zero_strain(rng):
    """Test a field whose only nonzero parameter is the head bias."""
    arch = FieldArchitecture(dim=2, hidden_widths=(6,), fourier_bands=2)
    field = DeformationField.zeros(arch)
    field.layers()[-1][1][...] = [0.3, -0.2]
    ckpt = make_checkpoint(random_render_cloud(rng, 15), field)

    report = measure_strain(ckpt)

    assert report.max == 0.0


def test_strain_is_permutation_equivariant(rng):
    """Test that reordering the cloud reorders the per-Gaussian strain."""
    cloud = random_render_cloud(rng, 25)
    field = random_field(rng)
    perm = rng.permutation(25)

    a = measure_strain(make_checkpoint(cloud, field)).per_gaussian
    b = measure_strain(make_checkpoint(cloud.take(perm), field)).per_gaussian

    np.testing.assert_allclose(b, a[perm], rtol=1e-12)


def test_time_invariant_field_reports_equal_fixed_and_heldout_strain(rng):
    """Test fixed vs held-out timesteps agree when the field ignores t."""
    arch = FieldArchitecture(dim=2, hidden_widths=(6,), fourier_bands=0)
    field = DeformationField(arch, rng.normal(size=arch.param_count))
    # zero the weights reading the t input
    field.layers()[0][0][2, :] = 0.0
    ckpt = make_checkpoint(random_render_cloud(rng, 20), field)

    fixed = measure_strain(ckpt)
    heldout = measure_strain(ckpt, heldout_timesteps(ckpt))

    np.testing.assert_allclose(heldout.per_gaussian, fixed.per_gaussian, rtol=1e-12)


def test_heldout_timesteps_are_the_test_views(rng):
    """Test that held-out timesteps come from the scene's test protocol."""
    ckpt = make_checkpoint(random_render_cloud(rng, 4), DeformationField.zeros(FieldArchitecture(dim=2)))

    _, test = view_protocol(ckpt.config.scene)

    assert heldout_timesteps(ckpt) == tuple(t for _, t in test)


def test_exhaustive_mode_uses_all_other_gaussians(rng):
    """Test exhaustive neighbourhoods and k shrinking on tiny clouds."""
    field = random_field(rng)

    exhaustive = measure_strain(make_checkpoint(random_render_cloud(rng, 12), field), mode="exhaustive")
    tiny = measure_strain(make_checkpoint(random_render_cloud(rng, 3), field))

    assert exhaustive.k == 11 and exhaustive.mode == "exhaustive"
    assert tiny.k == 2


def test_measure_strain_rejects_bad_requests(rng):
    """Test empty and out-of-range timesteps and an unknown mode."""
    ckpt = make_checkpoint(random_render_cloud(rng, 5), random_field(rng))

    with pytest.raises(ContractError):
        measure_strain(ckpt, [])
    with pytest.raises(ContractError):
        measure_strain(ckpt, [0.5, 1.2])
    with pytest.raises(ContractError):
        measure_strain(ckpt, mode="radius")


def test_compare_identical_reports():
    """Test 0% reduction and no percentile claims for identical reports."""
    report = _report([0.1, 0.2, 0.3, 0.4])

    result = strain_compare(report, report)

    assert result.mean_reduction_pct == 0.0
    assert not result.reg_median_below_base_p1
    assert not result.reg_p99_below_base_median


def test_compare_mean_reduction_example():
    """Test 3.54 -> 0.00922 as a 99.74% reduction."""
    result = strain_compare(_report([3.54] * 5), _report([0.00922] * 5))

    assert result.mean_reduction_pct == pytest.approx(99.74, abs=0.01)


def test_compare_percentile_claims():
    """Test both percentile claims and the median/p99 ratio."""
    base = _with_percentiles(p1=1.0, median=2.0, p99=10.0)
    reg = _with_percentiles(p1=0.01, median=0.5, p99=0.4)

    result = strain_compare(base, reg)

    assert result.reg_median_below_base_p1
    assert result.reg_p99_below_base_median
    assert result.base_median_over_reg_p99 == pytest.approx(5.0)


def test_compare_undefined_for_zero_baseline():
    """Test that a zero-strain baseline makes reductions undefined."""
    result = strain_compare(_report([0.0, 0.0]), _report([0.1, 0.2]))

    assert result.undefined
    assert result.mean_reduction_pct is None


def test_compare_sign_flips_when_swapped():
    """Test that swapping baseline and regularized flips the sign of the reduction."""
    a, b = _report([1.0, 2.0, 3.0]), _report([0.5, 0.7, 0.9])

    forward = strain_compare(a, b).mean_reduction_pct
    backward = strain_compare(b, a).mean_reduction_pct

    assert forward > 0 > backward


def test_aggregate_both_ways():
    """Test mean-of-reductions vs reduction-of-means on unequal scenes."""
    pairs = [(_report([10.0]), _report([1.0])), (_report([1.0]), _report([0.5]))]

    agg = aggregate_strain(pairs)

    assert agg.scenes == 2
    assert agg.mean_of_reductions_pct == pytest.approx((90.0 + 50.0) / 2)
    assert agg.reduction_of_means_pct == pytest.approx((1 - 0.75 / 5.5) * 100)


def test_strain_csv_has_one_row_per_report():
    """Test strain CSV header and rows."""
    text = strain_reports_csv([("orbit", "eer", 0, "fixed", _report([0.25, 0.25]))])
    lines = text.splitlines()

    assert lines[0].startswith("scene,preset,seed,timesteps,mode,k,mean")
    assert lines[1].startswith("orbit,eer,0,fixed,knn,0,0.25")
