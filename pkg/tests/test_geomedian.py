"""Weighted geometric median: exact cases, oracle comparisons, invariances."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustfuse.exceptions import (
    IdentificationFailureError,
    InvalidProblemError,
    NotConvergedError,
)
from robustfuse.geomedian import (
    GeoMedianConfig,
    consistency_bound_check,
    delta_margin,
    median_objective,
    solve_initial,
    weighted_geometric_median,
)
from robustfuse.model import FusionProblem, GroundTruth, SourceSummary

RNG = np.random.default_rng(20240811)


def _median(points, weights, **kw):
    cfg = GeoMedianConfig(**kw) if kw else GeoMedianConfig()
    return weighted_geometric_median(np.asarray(points, float), np.asarray(weights, float), cfg)


# ---------------------------------------------------------------------------
# Exact small cases


def test_coincident_points_return_the_point():
    est = _median([[2.0, -1.0]] * 4, [0.25] * 4)
    np.testing.assert_allclose(est.theta, [2.0, -1.0])
    assert est.diagnostics.converged


def test_single_point_is_its_own_median():
    est = _median([[3.0, 4.0]], [1.0])
    np.testing.assert_allclose(est.theta, [3.0, 4.0])
    assert est.diagnostics.anchored


def test_univariate_median_of_three():
    est = _median([[1.0], [2.0], [3.0]], [1 / 3, 1 / 3, 1 / 3])
    assert est.theta[0] == 2.0
    assert est.diagnostics.anchored


def test_equilateral_triangle_median_is_centroid():
    pts = [[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]]
    est = _median(pts, [1 / 3] * 3)
    np.testing.assert_allclose(est.theta, [0.5, math.sqrt(3) / 6], atol=1e-6)


def test_dominant_weight_pins_the_median():
    est = _median([[0.0], [10.0]], [0.8, 0.2])
    assert est.theta[0] == 0.0
    assert est.diagnostics.anchored
    # Brute-force confirmation on a fine 1-D grid.
    grid = np.arange(-1.0, 11.0, 1e-4)
    objs = 0.8 * np.abs(grid - 0.0) + 0.2 * np.abs(grid - 10.0)
    assert abs(grid[np.argmin(objs)] - est.theta[0]) <= 2e-4


def test_wide_angle_vertex_is_the_median():
    # The pulls of the two far points cancel below the vertex weight, so the
    # solver must stop exactly on the vertex.
    pts = [[0.0, 0.0], [2.0, 0.0], [-2.0, 0.5]]
    est = _median(pts, [1 / 3] * 3)
    np.testing.assert_allclose(est.theta, [0.0, 0.0])
    assert est.diagnostics.anchored


def test_midpoint_of_equal_pair():
    est = _median([[-1.0, 0.0], [1.0, 0.0]], [0.5, 0.5])
    np.testing.assert_allclose(est.theta, [0.0, 0.0], atol=1e-12)


def test_asymmetric_univariate_anchor():
    est = _median([[0.0], [1.0], [10.0]], [0.3, 0.4, 0.3])
    assert est.theta[0] == 1.0
    assert est.diagnostics.anchored


# ---------------------------------------------------------------------------
# Oracle comparison: planar grid search

_GRID_CASES = []
for _ in range(8):
    K = int(RNG.integers(3, 7))
    pts = RNG.uniform(-1.0, 1.0, size=(K, 2))
    w = RNG.random(K) + 0.1
    _GRID_CASES.append((pts, w / w.sum()))


@pytest.mark.parametrize("pts,w", _GRID_CASES, ids=range(len(_GRID_CASES)))
def test_matches_planar_grid_search(pts, w):
    est = _median(pts, w)
    lo = pts.min(axis=0) - 0.05
    hi = pts.max(axis=0) + 0.05
    n_grid = 201
    xs = np.linspace(lo[0], hi[0], n_grid)
    ys = np.linspace(lo[1], hi[1], n_grid)
    spacing = max((hi - lo) / (n_grid - 1))
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    dists = np.linalg.norm(grid[:, None, :] - pts[None, :, :], axis=2)
    best = grid[np.argmin(dists @ w)]
    assert np.linalg.norm(est.theta - best) <= 2 * spacing


def test_objective_beats_all_candidate_points():
    for _ in range(20):
        K = int(RNG.integers(2, 9))
        d = int(RNG.integers(1, 5))
        pts = RNG.normal(size=(K, d))
        w = RNG.random(K) + 0.05
        w /= w.sum()
        est = _median(pts, w)
        g_hat = median_objective(pts, w, est.theta)
        candidates = [w @ pts] + list(pts)
        for cand in candidates:
            assert g_hat <= median_objective(pts, w, np.asarray(cand)) + 1e-9


# ---------------------------------------------------------------------------
# Invariances


@settings(max_examples=25, deadline=None)
@given(
    shift=st.tuples(
        st.floats(-50.0, 50.0, allow_nan=False),
        st.floats(-50.0, 50.0, allow_nan=False),
    )
)
def test_translation_equivariance(shift):
    pts = np.array([[0.0, 0.0], [1.0, 0.2], [0.3, 1.4], [-0.8, 0.6]])
    w = np.array([0.4, 0.3, 0.2, 0.1])
    base = _median(pts, w).theta
    moved = _median(pts + np.asarray(shift), w).theta
    np.testing.assert_allclose(moved, base + np.asarray(shift), atol=1e-7)


@pytest.mark.parametrize("angle", [0.3, 1.2, 2.5, 4.0])
def test_rotation_equivariance(angle):
    pts = np.array([[0.0, 0.1], [1.1, 0.2], [0.3, 1.4], [-0.8, 0.6], [0.5, -0.9]])
    w = np.array([0.25, 0.25, 0.2, 0.15, 0.15])
    rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    base = _median(pts, w).theta
    rotated = _median(pts @ rot.T, w).theta
    np.testing.assert_allclose(rotated, rot @ base, atol=1e-7)


@pytest.mark.parametrize("scale", [0.01, 3.0, 250.0])
def test_scale_equivariance(scale):
    pts = np.array([[0.2, 0.0], [1.0, 0.4], [0.1, 1.2]])
    w = np.array([0.5, 0.3, 0.2])
    base = _median(pts, w).theta
    scaled = _median(scale * pts, w).theta
    np.testing.assert_allclose(scaled, scale * base, atol=1e-7 * max(1.0, scale))


# ---------------------------------------------------------------------------
# Configuration, validation, failure modes


def test_validation_rejects_bad_weights_and_points():
    pts = [[0.0], [1.0]]
    with pytest.raises(InvalidProblemError):
        _median(pts, [0.5, 0.6])  # does not sum to one
    with pytest.raises(InvalidProblemError):
        _median(pts, [1.5, -0.5])  # nonpositive entry
    with pytest.raises(InvalidProblemError):
        _median(pts, [1.0])  # shape mismatch
    with pytest.raises(InvalidProblemError):
        _median([[np.nan], [1.0]], [0.5, 0.5])


def test_config_rejects_bad_tolerances():
    with pytest.raises(InvalidProblemError):
        GeoMedianConfig(tol=0.0)
    with pytest.raises(InvalidProblemError):
        GeoMedianConfig(max_iter=0)
    with pytest.raises(InvalidProblemError):
        GeoMedianConfig(anchor_epsilon=-1.0)


def test_iteration_exhaustion_carries_best_iterate():
    with pytest.raises(NotConvergedError) as info:
        _median([[0.0], [1.0]], [0.7, 0.3], max_iter=1)
    result = info.value.result
    assert result is not None
    assert not result.diagnostics.converged
    assert np.all(np.isfinite(result.theta))


def test_solve_initial_uses_sample_size_weights():
    # One source with 8x the data pulls the pooled centre onto itself.
    sources = tuple(
        SourceSummary(f"s{k}", n, np.array([t]))
        for k, (n, t) in enumerate([(800, 0.0), (100, 5.0), (100, 7.0)])
    )
    est = solve_initial(FusionProblem(sources))
    assert est.theta[0] == 0.0


# ---------------------------------------------------------------------------
# Identification margin and the pooling error bound

# Six equally weighted sources, two unbiased; the four bias directions
# partially cancel, leaving a positive margin of 1/3 - sqrt(2)/6.
_TOY_BIASES = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.0],
        [-2.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)
_TOY_TRUTH = GroundTruth(np.zeros(3), _TOY_BIASES, frozenset({0, 1}))
_TOY_WEIGHTS = np.full(6, 1 / 6)


def test_delta_margin_partial_cancellation():
    assert delta_margin(_TOY_WEIGHTS, _TOY_TRUTH) == pytest.approx(
        1 / 3 - math.sqrt(2) / 6, rel=1e-12
    )


def test_delta_margin_all_unbiased_is_one():
    truth = GroundTruth(np.zeros(2), np.zeros((3, 2)), frozenset({0, 1, 2}))
    assert delta_margin(np.full(3, 1 / 3), truth) == pytest.approx(1.0)


def test_delta_margin_aligned_biases_go_negative():
    biases = np.array([[0.0], [0.0], [1.0], [2.0], [0.5]])
    truth = GroundTruth(np.zeros(1), biases, frozenset({0, 1}))
    weights = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
    assert delta_margin(weights, truth) == pytest.approx(0.4 - 0.6, rel=1e-12)


def test_delta_margin_rejects_weight_shape_mismatch():
    with pytest.raises(InvalidProblemError):
        delta_margin(np.full(5, 0.2), _TOY_TRUTH)


def test_bound_trivially_true_at_truth():
    assert consistency_bound_check(np.zeros(3), _TOY_TRUTH, _TOY_WEIGHTS, np.zeros(6))


def test_bound_detects_fabricated_violation():
    errs = np.full(6, 1e-3)
    far = np.array([10.0, 0.0, 0.0])
    assert not consistency_bound_check(far, _TOY_TRUTH, _TOY_WEIGHTS, errs)


def test_bound_requires_positive_margin():
    biases = np.array([[0.0], [1.0], [1.5]])
    truth = GroundTruth(np.zeros(1), biases, frozenset({0}))
    with pytest.raises(IdentificationFailureError):
        consistency_bound_check(np.zeros(1), truth, np.full(3, 1 / 3), np.zeros(3))


def test_bound_holds_across_noisy_replicates():
    # Monte-Carlo check of the deterministic pooling bound on the toy
    # geometry: it must hold in every single replicate.
    rng = np.random.default_rng(3)
    targets = _TOY_TRUTH.per_source_targets()
    for _ in range(1000):
        pts = targets + 0.05 * rng.standard_normal(targets.shape)
        est = weighted_geometric_median(pts, _TOY_WEIGHTS)
        errs = np.linalg.norm(pts - targets, axis=1)
        assert consistency_bound_check(est.theta, _TOY_TRUTH, _TOY_WEIGHTS, errs)
