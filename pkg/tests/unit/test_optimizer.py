"""
Unit tests for the grouped Adam optimizer.
"""

import numpy as np
import pytest

from models.config import OptimizerConfig
from services.optimizer import CLOUD_GROUPS, GroupedAdam, expon_lr
from tests.helpers.fixtures import make_cloud, random_field


def _grads(cloud, value: float = 1.0) -> dict[str, np.ndarray]:
    return {name: np.full_like(getattr(cloud, name), value) for name in CLOUD_GROUPS}


def test_first_step_moves_by_step_size(rng):
    """Test that bias-corrected Adam moves each parameter by lr against the gradient sign."""
    cloud = make_cloud([[0.0, 0.0], [0.5, 0.5]], colors=[0.5, 0.5])
    field = random_field(rng)
    before = field.params.copy()
    config = OptimizerConfig()
    adam = GroupedAdam(config, cloud, field)

    adam.step(cloud, _grads(cloud), field, np.full_like(field.params, -2.0))

    np.testing.assert_allclose(cloud.positions, [[-4e-3, -4e-3], [0.5 - 4e-3, 0.5 - 4e-3]])
    np.testing.assert_allclose(cloud.colors, 0.5 - 2e-2)
    np.testing.assert_allclose(field.params, before + 2e-3)


def test_field_stays_frozen_without_gradient(rng):
    """Test that the coarse stage leaves the field untouched."""
    cloud = make_cloud([[0.0, 0.0]])
    field = random_field(rng)
    before = field.params.copy()
    adam = GroupedAdam(OptimizerConfig(), cloud, field)

    adam.step(cloud, _grads(cloud), field, None)

    np.testing.assert_array_equal(field.params, before)


def test_colors_are_clipped():
    """Test that colors stay inside [0, 1]."""
    cloud = make_cloud([[0.0, 0.0]], colors=[0.995])
    adam = GroupedAdam(OptimizerConfig(lr_colors=0.5), cloud)

    adam.step(cloud, _grads(cloud, -1.0))

    assert cloud.colors[0] == 1.0


def test_remap_keeps_survivor_moments_and_zeroes_new_rows():
    """Test moment surgery after densification."""
    cloud = make_cloud([[0.0, 0.0], [1.0, 0.0]])
    adam = GroupedAdam(OptimizerConfig(), cloud)
    adam.step(cloud, _grads(cloud))
    survivor = adam.moments["positions"].m[1].copy()

    adam.remap(np.array([1, 1]), np.array([False, True]))

    m = adam.moments["positions"].m
    assert m.shape == (2, 2)
    np.testing.assert_array_equal(m[0], survivor)
    assert np.all(m[1] == 0.0)
    assert adam.moments["colors"].v.shape == (2,)
    assert adam.steps == 1


def test_bias_correction_uses_shared_step_count():
    """Test that a constant gradient keeps the update at lr per step."""
    cloud = make_cloud([[0.0, 0.0]])
    adam = GroupedAdam(OptimizerConfig(), cloud)

    for _ in range(3):
        adam.step(cloud, _grads(cloud))

    assert cloud.positions[0, 0] == pytest.approx(-3 * 4e-3, rel=1e-9)


def test_expon_lr_endpoints_and_midpoint():
    """Test log-linear decay: initial rate, geometric mean halfway, final rate and beyond."""
    assert expon_lr(0, 4e-3, 4e-5, 1000) == pytest.approx(4e-3)
    assert expon_lr(500, 4e-3, 4e-5, 1000) == pytest.approx(4e-4)
    assert expon_lr(1000, 4e-3, 4e-5, 1000) == pytest.approx(4e-5)
    assert expon_lr(5000, 4e-3, 4e-5, 1000) == pytest.approx(4e-5)
    assert expon_lr(10, 1e-2, 1e-2, 1000) == 1e-2


def test_position_step_size_decays_over_the_run():
    """Test that the last of max_steps updates moves positions by the final rate."""
    cloud = make_cloud([[0.0, 0.0]])
    config = OptimizerConfig(lr_positions=1e-2, lr_positions_final=1e-4)
    adam = GroupedAdam(config, cloud, max_steps=10)

    for _ in range(10):
        before = cloud.positions.copy()
        adam.step(cloud, _grads(cloud))

    assert adam.lrs["positions"] == pytest.approx(expon_lr(9, 1e-2, 1e-4, 10))
    np.testing.assert_allclose(before - cloud.positions, adam.lrs["positions"], rtol=1e-9)
    assert adam.lrs["log_scales"] == config.lr_log_scales


def test_position_step_size_is_constant_without_max_steps():
    """Test that the decay is opt-in."""
    cloud = make_cloud([[0.0, 0.0]])
    adam = GroupedAdam(OptimizerConfig(), cloud)

    for _ in range(5):
        adam.step(cloud, _grads(cloud))

    assert adam.lrs["positions"] == OptimizerConfig().lr_positions
