"""
Unit tests for the neighbour graph, smoothness prior variants, Kabsch
rotations, jitter estimation and PTDrop masks.
"""

import numpy as np
import pytest

from core.errors import ContractError
from models.config import RegConfig, SmoothnessVariant
from services.regularizers import (
    JitterEstimate,
    NeighborGraph,
    build_neighbor_graph,
    kabsch_rotation,
    ptdrop_mask,
    smoothness_loss,
    update_jitter,
    warmup_weight,
)
from tests.helpers.fixtures import rotation_2d
from tests.helpers.oracles import best_grid_rotation_residual, brute_force_knn, central_difference

GRADIENT_VARIANTS = ["strain", "on_embed", "arap", "no_norm"]


def _uniform_graph(count: int, k: int) -> NeighborGraph:
    """Ring graph with unit squared distances."""
    indices = (np.arange(count)[:, None] + np.arange(1, k + 1)[None, :]) % count
    return NeighborGraph(indices=indices, dist2=np.ones((count, k)), k=k)


def test_graph_matches_brute_force(rng):
    """Test exact k-NN against all-pairs search on random clouds."""
    for _ in range(100):
        count = int(rng.integers(2, 201))
        k = int(rng.integers(1, 9))
        positions = rng.uniform(-1, 1, size=(count, int(rng.integers(2, 4))))

        graph = build_neighbor_graph(positions, k)

        expected = brute_force_knn(positions, min(k, count - 1))
        np.testing.assert_array_equal(graph.indices, expected)
        assert not np.any(graph.indices == np.arange(count)[:, None])


def test_graph_ties_break_by_lower_index():
    """Test that equidistant neighbours resolve to the lower index."""
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])

    graph = build_neighbor_graph(positions, 2)

    assert list(graph.indices[0]) == [1, 2]


def test_graph_shrinks_k_for_small_clouds():
    """Test k -> K-1 on tiny clouds and an empty graph for a single Gaussian."""
    assert build_neighbor_graph(np.zeros((3, 2)) + np.arange(3)[:, None], 8).k == 2
    single = build_neighbor_graph(np.zeros((1, 2)), 8)
    assert single.k == 0 and single.indices.shape == (1, 0)


def test_graph_floors_coincident_distances():
    """Test that coincident Gaussians get a positive squared distance."""
    graph = build_neighbor_graph(np.array([[0.5, 0.5], [0.5, 0.5], [2.0, 0.0]]), 1)

    assert graph.dist2[0, 0] == pytest.approx(1e-8)
    assert graph.indices[0, 0] == 1


def test_graph_staleness():
    """Test rebuild scheduling by iteration and by flag."""
    graph = build_neighbor_graph(np.eye(3), 1, iteration=100, rebuild_interval=75)

    assert not graph.is_stale(174)
    assert graph.is_stale(175)


def test_graph_remap_follows_parents():
    """Test that children inherit rows and removed neighbours fall back."""
    positions = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0], [6.0, 0.0]])
    graph = build_neighbor_graph(positions, 2)
    # row 1 pruned; row 2 cloned (new row 3 copies row 2)
    source = np.array([0, 2, 3, 2])
    index_map = np.array([0, -1, 1, 2])

    remapped = graph.remap(source, index_map)

    assert remapped.count == 4
    assert not np.any(remapped.indices < 0)
    assert not np.any(remapped.indices == np.arange(4)[:, None])
    # the clone shares its parent's row
    np.testing.assert_array_equal(remapped.indices[3], remapped.indices[1])
    np.testing.assert_array_equal(remapped.dist2[3], remapped.dist2[1])


def test_warmup_ramp():
    """Test the half-cosine warmup endpoints and midpoint."""
    assert warmup_weight(450, (450, 1500), 0.05) == 0.0
    assert warmup_weight(975, (450, 1500), 0.05) == pytest.approx(0.025)
    assert warmup_weight(1500, (450, 1500), 0.05) == 0.05
    with pytest.raises(ContractError):
        warmup_weight(0, (10, 10), 1.0)


def test_strain_example_one_dimensional():
    """Test two Gaussians 2 apart, one displaced by 1: strain 0.25, unnormalized 1."""
    positions = np.array([[0.0], [2.0]])
    u = np.array([[0.0], [1.0]])
    graph = build_neighbor_graph(positions, 1)

    strain = smoothness_loss("strain", positions, u, None, graph, np.arange(2), 1.0)
    raw = smoothness_loss("no_norm", positions, u, None, graph, np.arange(2), 1.0)

    assert strain.loss == pytest.approx(0.25)
    assert raw.loss == pytest.approx(1.0)


def test_uniform_displacement_costs_nothing(rng):
    """Test that a rigid translation has zero strain."""
    positions = rng.uniform(-1, 1, size=(30, 2))
    u = np.tile([0.3, -0.1], (30, 1))
    graph = build_neighbor_graph(positions, 8)

    result = smoothness_loss("strain", positions, u, None, graph, np.arange(30), 1.0)

    assert result.loss == pytest.approx(0.0, abs=1e-20)


def test_off_variant_has_no_gradient(rng):
    """Test that the off variant contributes nothing."""
    positions = rng.uniform(size=(5, 2))
    result = smoothness_loss(SmoothnessVariant.OFF, positions, positions, None, build_neighbor_graph(positions, 2), np.arange(5), 1.0)

    assert result.loss == 0.0 and result.grad_u is None and result.grad_h is None


def test_on_embed_requires_embedding(rng):
    """Test that the embedding variant needs h."""
    positions = rng.uniform(size=(5, 2))

    with pytest.raises(ContractError):
        smoothness_loss("on_embed", positions, positions, None, build_neighbor_graph(positions, 2), np.arange(5), 1.0)


def test_strain_is_translation_invariant_and_quadratic(rng):
    """Test invariance to shifting canonical positions and u -> 4x loss when u doubles."""
    positions = rng.uniform(-1, 1, size=(25, 2))
    u = rng.normal(scale=0.1, size=(25, 2))
    graph = build_neighbor_graph(positions, 6)
    sample = np.arange(25)

    base = smoothness_loss("strain", positions, u, None, graph, sample, 1.0).loss
    shifted_graph = build_neighbor_graph(positions + [5.0, -3.0], 6)
    shifted = smoothness_loss("strain", positions + [5.0, -3.0], u, None, shifted_graph, sample, 1.0).loss
    doubled = smoothness_loss("strain", positions, 2 * u, None, graph, sample, 1.0).loss

    assert shifted == pytest.approx(base, rel=1e-9)
    assert doubled == pytest.approx(4 * base, rel=1e-12)


def test_unit_distances_make_normalization_a_no_op(rng):
    """Test strain == no_norm when every neighbour distance is 1 and eps is 0."""
    graph = _uniform_graph(10, 3)
    u = rng.normal(size=(10, 2))
    positions = np.zeros((10, 2))

    strain = smoothness_loss("strain", positions, u, None, graph, np.arange(10), 0.7, eps=0.0)
    raw = smoothness_loss("no_norm", positions, u, None, graph, np.arange(10), 0.7, eps=0.0)

    assert strain.loss == pytest.approx(raw.loss, rel=1e-12)
    np.testing.assert_allclose(strain.grad_u, raw.grad_u, rtol=1e-12)


def test_sampled_loss_is_unbiased(rng):
    """Test that uniform sampling averages to the exhaustive loss."""
    grid = np.stack(np.meshgrid(np.arange(5.0), np.arange(4.0)), axis=-1).reshape(-1, 2)
    u = rng.normal(size=(20, 2))
    graph = build_neighbor_graph(grid, 4)
    exhaustive = smoothness_loss("strain", grid, u, None, graph, np.arange(20), 1.0).loss

    draws = [
        smoothness_loss("strain", grid, u, None, graph, rng.choice(20, size=10, replace=False), 1.0).loss
        for _ in range(4000)
    ]

    assert np.mean(draws) == pytest.approx(exhaustive, rel=0.01)


def test_arap_ignores_rigid_motion(rng):
    """Test zero ARAP loss under a global rotation plus translation, where strain is positive."""
    positions = rng.uniform(-1, 1, size=(30, 2))
    rotation = rotation_2d(25.0)
    u = positions @ rotation.T - positions + [0.2, -0.4]
    graph = build_neighbor_graph(positions, 6)
    sample = np.arange(30)

    arap = smoothness_loss("arap", positions, u, None, graph, sample, 1.0)
    strain = smoothness_loss("strain", positions, u, None, graph, sample, 1.0)

    assert arap.loss <= 1e-10
    assert strain.loss > 0.0


@pytest.mark.parametrize("dim", [2, 3])
def test_arap_rotation_is_the_unweighted_neighbourhood_fit(dim):
    """Test the ARAP loss against a per-row unweighted Kabsch fit with distance-normalized residuals."""
    rng = np.random.default_rng(7)
    positions = rng.normal(size=(40, dim))
    u = 0.3 * rng.normal(size=(40, dim))
    graph = build_neighbor_graph(positions, 8)
    sample = np.arange(40)

    expected = 0.0
    for i in sample:
        a = positions[graph.indices[i]] - positions[i]
        b = a + u[graph.indices[i]] - u[i]
        rotation, _ = kabsch_rotation(a, b)
        expected += float((((a @ rotation.T - b) ** 2).sum(axis=1) / (graph.dist2[i] + 1e-8)).sum())
    expected /= 40 * 8

    result = smoothness_loss("arap", positions, u, None, graph, sample, 1.0)

    assert result.loss == pytest.approx(expected, rel=1e-12)
    numeric = central_difference(lambda v: smoothness_loss("arap", positions, v, None, graph, sample, 1.0).loss, u)
    np.testing.assert_allclose(result.grad_u, numeric, rtol=1e-4, atol=1e-7)


@pytest.mark.parametrize("variant", GRADIENT_VARIANTS)
def test_smoothness_gradients_match_finite_differences(variant):
    """Test grad_u / grad_h against central differences on random instances."""
    for seed in range(50):
        rng = np.random.default_rng(seed)
        count = int(rng.integers(3, 31))
        dim = int(rng.integers(2, 4))
        positions = rng.uniform(-1, 1, size=(count, dim))
        u = rng.normal(scale=0.2, size=(count, dim))
        h = rng.normal(size=(count, 4))
        graph = build_neighbor_graph(positions, int(rng.integers(1, 6)))
        sample = rng.choice(count, size=int(rng.integers(1, count + 1)), replace=False)
        weight = float(rng.uniform(0.1, 2.0))

        result = smoothness_loss(variant, positions, u, h, graph, sample, weight)

        if variant == "on_embed":
            numeric = central_difference(lambda v: smoothness_loss(variant, positions, u, v, graph, sample, weight).loss, h)
            np.testing.assert_allclose(result.grad_h, numeric, rtol=1e-4, atol=1e-7)
            assert np.all(result.grad_u == 0.0)
        else:
            numeric = central_difference(lambda v: smoothness_loss(variant, positions, v, h, graph, sample, weight).loss, u)
            np.testing.assert_allclose(result.grad_u, numeric, rtol=1e-4, atol=1e-7)


def test_kabsch_identity_and_known_rotation(rng):
    """Test recovery of the identity and of a 30 degree rotation."""
    a = rng.normal(size=(8, 2))

    identity, degenerate = kabsch_rotation(a, a)
    rotated, _ = kabsch_rotation(a, a @ rotation_2d(30.0).T)

    np.testing.assert_allclose(identity, np.eye(2), atol=1e-12)
    assert not degenerate
    np.testing.assert_allclose(rotated, rotation_2d(30.0), atol=1e-12)


def test_kabsch_beats_grid_search(rng):
    """Test that the closed form is at least as good as a one-degree angle grid."""
    for _ in range(50):
        a = rng.normal(size=(6, 2))
        b = a @ rotation_2d(float(rng.uniform(0, 360))).T + rng.normal(scale=0.2, size=(6, 2))

        r, _ = kabsch_rotation(a, b)

        assert np.sum((a @ r.T - b) ** 2) <= best_grid_rotation_residual(a, b) + 1e-12
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_kabsch_three_dimensional_is_proper(rng):
    """Test a recovered 3D rotation and det +1 under a reflection-like target."""
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.linalg.det(q))
    a = rng.normal(size=(10, 3))

    r, _ = kabsch_rotation(a, a @ q.T)
    mirrored, _ = kabsch_rotation(a, a * [1.0, 1.0, -1.0])

    np.testing.assert_allclose(r, q, atol=1e-10)
    assert np.linalg.det(mirrored) == pytest.approx(1.0)


def test_kabsch_degenerate_input():
    """Test that all-zero offsets give the identity flagged degenerate."""
    r, degenerate = kabsch_rotation(np.zeros((3, 2)), np.zeros((3, 2)))

    np.testing.assert_array_equal(r, np.eye(2))
    assert degenerate


def test_jitter_matches_population_variance(rng):
    """Test streaming variance against numpy over a displacement history."""
    history = rng.normal(size=(12, 5, 2))
    est = JitterEstimate.empty(5, 2)
    for u in history:
        est = update_jitter(est, u)

    np.testing.assert_allclose(est.variance, history.var(axis=0).sum(axis=1), rtol=1e-10)
    np.testing.assert_allclose(est.take(np.array([4, 4])).mean, history.mean(axis=0)[[4, 4]])


def test_ptdrop_before_window_keeps_everything(rng):
    """Test that the base rate is zero before the window opens."""
    sample = ptdrop_mask(10, 50, JitterEstimate.empty(50, 2), RegConfig(ptdrop_start=100, ptdrop_end=200), rng)

    assert sample.keep.all()
    np.testing.assert_array_equal(sample.opacity_scale, 1.0)


def test_ptdrop_after_window_drops_at_max_rate(rng):
    """Test the uniform drop fraction once the ramp has finished."""
    config = RegConfig(ptdrop_start=100, ptdrop_end=200, ptdrop_max=0.3)

    sample = ptdrop_mask(500, 10_000, JitterEstimate.empty(10_000, 2), config, rng)

    assert 1.0 - sample.keep.mean() == pytest.approx(0.3, abs=0.01)
    np.testing.assert_allclose(sample.opacity_scale, 1.0 / 0.7)


def test_ptdrop_rates_follow_jitter():
    """Test 4:1 jitter variance -> 4:1 drop probability."""
    est = JitterEstimate(mean=np.zeros((2, 1)), m2=np.array([[4.0], [1.0]]), counts=np.array([1, 1]))
    config = RegConfig(ptdrop_start=0, ptdrop_end=10, ptdrop_max=0.3)

    sample = ptdrop_mask(20, 2, est, config, np.random.default_rng(0))

    assert sample.probability[0] / sample.probability[1] == pytest.approx(4.0)


def test_ptdrop_clamps_probability():
    """Test the 0.95 ceiling on a dominant jitter outlier."""
    m2 = np.zeros((10, 1))
    m2[0] = 100.0
    est = JitterEstimate(mean=np.zeros((10, 1)), m2=m2, counts=np.ones(10, dtype=np.int64))
    config = RegConfig(ptdrop_start=0, ptdrop_end=10, ptdrop_max=0.3)

    sample = ptdrop_mask(20, 10, est, config, np.random.default_rng(0))

    assert sample.probability[0] == 0.95
    assert np.all(sample.probability[1:] == 0.0)


def test_ptdrop_rejects_mismatched_jitter(rng):
    """Test the jitter size contract."""
    with pytest.raises(ContractError):
        ptdrop_mask(0, 5, JitterEstimate.empty(4, 2), RegConfig(), rng)
