"""Weighted geometric median: the pooling stage that tolerates biased sources.

Minimises G(m) = sum_k pi_k ||theta_k - m|| over m. The solver is Weiszfeld's
fixed-point iteration with the Vardi-Zhang modification so iterates that land
on (or start at) a data point are handled exactly instead of dividing by zero:
at an anchor point x_j the weighted unit-vector sum over the other points is
compared against pi_j, which is the exact first-order optimality condition for
a kink of G.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import IdentificationFailureError, InvalidProblemError, NotConvergedError
from .model import Diagnostics, FusionEstimate, FusionProblem, GroundTruth

__all__ = [
    "GeoMedianConfig",
    "weighted_geometric_median",
    "solve_initial",
    "median_objective",
    "delta_margin",
    "consistency_bound_check",
]


@dataclass(frozen=True)
class GeoMedianConfig:
    """Knobs for the Weiszfeld/Vardi-Zhang solver.

    ``tol`` bounds the norm of the (sub)gradient at the returned point;
    ``anchor_epsilon`` is the absolute distance under which an iterate is
    snapped onto a data point (scaled by the data magnitude at solve time).
    """

    tol: float = 1e-10
    max_iter: int = 10_000
    anchor_epsilon: float = 1e-12

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1 or self.anchor_epsilon <= 0:
            raise InvalidProblemError("tolerances must be positive and max_iter >= 1")


def median_objective(points: np.ndarray, weights: np.ndarray, m: np.ndarray) -> float:
    """G(m) = sum_k pi_k ||x_k - m||."""
    return float(weights @ np.linalg.norm(points - m[None, :], axis=1))


def _validated(points, weights):
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.asarray(weights, dtype=float)
    if points.ndim != 2 or weights.shape != (points.shape[0],):
        raise InvalidProblemError("points must be (K, d) with one weight per row")
    if np.any(weights <= 0) or abs(weights.sum() - 1.0) > 1e-8:
        raise InvalidProblemError("weights must be positive and sum to one")
    if not np.all(np.isfinite(points)):
        raise InvalidProblemError("points contain non-finite entries")
    return points, weights


def weighted_geometric_median(
    points: np.ndarray,
    weights: np.ndarray,
    config: GeoMedianConfig = GeoMedianConfig(),
) -> FusionEstimate:
    """Minimise sum_k pi_k ||x_k - m|| by damped Weiszfeld iteration.

    Starts from the weighted mean. Off the data points the update is the
    classical reweighting m <- sum(pi_k x_k / r_k) / sum(pi_k / r_k) with
    r_k = max(||m - x_k||, eps); on a data point x_j the Vardi-Zhang step
    either certifies optimality (||R_j|| <= pi_j, R_j the pull of the other
    points) or moves off the anchor along R_j. The objective never increases.

    Raises :class:`NotConvergedError` (with the best iterate attached) if the
    optimality gap is still above ``config.tol`` after ``config.max_iter``
    iterations.
    """
    points, weights = _validated(points, weights)
    K, d = points.shape

    scale = 1.0 + float(np.linalg.norm(points, axis=1).max())
    eps = config.anchor_epsilon * scale

    if K == 1:
        diag = Diagnostics(0, 0.0, 0.0, converged=True, anchored=True)
        return FusionEstimate(points[0].copy(), diag)

    m = weights @ points  # weighted mean start
    best = m
    best_gap = np.inf
    anchored = False
    boundary = False

    for it in range(1, config.max_iter + 1):
        diff = points - m[None, :]
        dist = np.linalg.norm(diff, axis=1)
        j = int(np.argmin(dist))
        if dist[j] <= eps:
            # Anchored at data point j: exact subgradient test at the kink.
            m = points[j].copy()
            others = np.arange(K) != j
            diff_o = points[others] - m[None, :]
            dist_o = np.maximum(np.linalg.norm(diff_o, axis=1), eps)
            pull = (weights[others] / dist_o) @ diff_o
            pull_norm = float(np.linalg.norm(pull))
            gap = max(0.0, pull_norm - weights[j])
            if gap <= config.tol:
                anchored = True
                boundary = abs(pull_norm - weights[j]) <= config.tol
                best, best_gap = m, gap
                break
            # Vardi-Zhang: convex combination of the Weiszfeld target over the
            # other points and the anchor itself.
            inv = weights[others] / dist_o
            target = (inv @ points[others]) / inv.sum()
            lam = weights[j] / pull_norm
            m = (1.0 - lam) * target + lam * m
            continue

        grad = -(weights / dist) @ diff  # gradient of G at a smooth point
        gap = float(np.linalg.norm(grad))
        if gap < best_gap:
            best, best_gap = m, gap
        if gap <= config.tol:
            break
        inv = weights / np.maximum(dist, eps)
        # Weiszfeld's reweighting is globally reliable but crawls when the
        # optimum hugs a data point; try a guarded Newton step first and fall
        # back whenever it fails to strictly decrease the objective. (In d=1
        # the Hessian vanishes and the fallback always runs.)
        stepped = False
        if d > 1:
            unit = diff / dist[:, None]
            hess = np.einsum("k,ij->ij", inv, np.eye(d)) - np.einsum(
                "k,ki,kj->ij", inv, unit, unit
            )
            try:
                direction = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError:
                direction = None
            if direction is not None and np.all(np.isfinite(direction)):
                g_here = weights @ dist
                step = 1.0
                for _ in range(20):
                    cand = m + step * direction
                    if median_objective(points, weights, cand) < g_here:
                        m = cand
                        stepped = True
                        break
                    step *= 0.5
        if not stepped:
            m = (inv @ points) / inv.sum()
    else:
        diag = Diagnostics(config.max_iter, best_gap, median_objective(points, weights, best), False)
        raise NotConvergedError(
            f"geometric median: optimality gap {best_gap:.3e} > tol {config.tol:.1e} "
            f"after {config.max_iter} iterations",
            result=FusionEstimate(best, diag),
        )

    diag = Diagnostics(
        it,
        best_gap,
        median_objective(points, weights, best),
        converged=True,
        anchored=anchored,
        boundary_optimality=boundary,
    )
    return FusionEstimate(best.copy(), diag)


def solve_initial(problem: FusionProblem, config: GeoMedianConfig = GeoMedianConfig()) -> FusionEstimate:
    """Pooling stage for a :class:`FusionProblem` (weights n_k / n)."""
    return weighted_geometric_median(problem.thetas(), problem.weights(), config)


def delta_margin(weights: np.ndarray, truth: GroundTruth) -> float:
    """Identification margin of the pooling stage.

    delta = sum of unbiased weights minus the norm of the weighted sum of unit
    bias directions over the biased sources. Positive delta means the biased
    sources cannot pull the population median off the target no matter how the
    magnitudes are arranged.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (truth.K,):
        raise InvalidProblemError("need one weight per source")
    margin = float(weights[sorted(truth.unbiased)].sum()) if truth.unbiased else 0.0
    pull = np.zeros(truth.biases.shape[1])
    for k in range(truth.K):
        if k in truth.unbiased:
            continue
        norm = np.linalg.norm(truth.biases[k])
        # GroundTruth guarantees norm > 0 for biased sources.
        pull += weights[k] * truth.biases[k] / norm
    return margin - float(np.linalg.norm(pull))


def consistency_bound_check(
    estimate: np.ndarray,
    truth: GroundTruth,
    weights: np.ndarray,
    per_source_errors: np.ndarray,
    *,
    slack: float = 1e-8,
) -> bool:
    """Check the deterministic error bound of the pooling stage.

    With delta > 0 the minimiser satisfies
    ||m - theta0|| <= (2 / delta) * sum_k pi_k ||theta_k - (theta0 + bias_k)||.
    ``slack`` absorbs solver tolerance on top of the exact bound. Raises
    :class:`IdentificationFailureError` when delta <= 0 (the bound is vacuous).
    """
    delta = delta_margin(weights, truth)
    if delta <= 0:
        raise IdentificationFailureError(
            f"identification margin is {delta:.4f} <= 0; the bound does not apply"
        )
    weights = np.asarray(weights, dtype=float)
    errs = np.asarray(per_source_errors, dtype=float)
    if errs.shape != weights.shape:
        raise InvalidProblemError("need one per-source error per weight")
    bound = 2.0 / delta * float(weights @ errs)
    gap = float(np.linalg.norm(np.asarray(estimate, dtype=float) - truth.theta0))
    return gap <= bound + slack
