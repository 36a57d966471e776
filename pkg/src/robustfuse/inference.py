"""Wald inference for the penalized estimator, treating the selected set as fixed.

The covariance is the sandwich

    cov = (1/n) V0^{-1} [ sum_{k in S} pi_k V_k S_k V_k ] V0^{-1},
    V0  = sum_{k in S} pi_k V_k,   S_k = n_k * cov_k,

which collapses to the classical precision-weighted form
(sum_{k in S} cov_k^{-1})^{-1} when the weighting matrices are the inverse
per-observation covariances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2, norm

from .exceptions import (
    EmptySelectionError,
    InvalidContrastError,
    InvalidProblemError,
    MissingCovarianceError,
    SingularSystemError,
)
from .model import FusionProblem, resolve_weighting_matrices

__all__ = ["WaldTestResult", "estimate_covariance", "wald_interval", "wald_test"]


@dataclass(frozen=True)
class WaldTestResult:
    statistic: float
    dof: int
    pvalue: float


def estimate_covariance(problem: FusionProblem, selected) -> np.ndarray:
    """Sandwich covariance of the fused estimate over the selected sources."""
    selected = sorted(int(k) for k in selected)
    if not selected:
        raise EmptySelectionError("covariance needs at least one selected source")
    if any(k < 0 or k >= problem.K for k in selected):
        raise InvalidProblemError("selected indices out of range")
    for k in selected:
        if problem.sources[k].cov is None:
            raise MissingCovarianceError(
                f"source {problem.sources[k].source_id!r} has no covariance; "
                "inference needs one for every selected source"
            )
    pi = problem.weights()
    vmats = resolve_weighting_matrices(problem)
    n = problem.n_total
    d = problem.d
    v0 = np.zeros((d, d))
    mid = np.zeros((d, d))
    for k in selected:
        s = problem.sources[k]
        v0 += pi[k] * vmats[k]
        mid += pi[k] * vmats[k] @ (s.n * s.cov) @ vmats[k]
    try:
        chol = cho_factor(v0)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - SPD by construction
        raise SingularSystemError(f"summed weighting matrix is singular: {exc}") from exc
    inv_v0 = cho_solve(chol, np.eye(d))
    cov = inv_v0 @ mid @ inv_v0 / n
    return 0.5 * (cov + cov.T)


def wald_interval(
    theta: np.ndarray, cov: np.ndarray, level: float = 0.95
) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate Wald interval endpoints at the given confidence level."""
    if not 0.0 < level < 1.0:
        raise InvalidProblemError(f"confidence level must be in (0, 1), got {level}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (theta.size, theta.size):
        raise InvalidProblemError("cov shape does not match theta")
    diag = np.diag(cov)
    if np.any(diag < 0) or not np.all(np.isfinite(diag)):
        raise InvalidProblemError("cov has negative or non-finite diagonal entries")
    half = norm.ppf(0.5 * (1.0 + level)) * np.sqrt(diag)
    return theta - half, theta + half


def wald_test(
    theta: np.ndarray, cov: np.ndarray, contrast: np.ndarray, null_value: np.ndarray
) -> WaldTestResult:
    """Chi-square test of H0: contrast @ theta = null_value."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    contrast = np.atleast_2d(np.asarray(contrast, dtype=float))
    null_value = np.atleast_1d(np.asarray(null_value, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    q, d = contrast.shape
    if d != theta.size or null_value.size != q:
        raise InvalidProblemError("contrast / null_value shapes do not match theta")
    sv = np.linalg.svd(contrast, compute_uv=False)
    if q > d or sv[-1] <= 1e-12 * max(1.0, sv[0]):
        raise InvalidContrastError("contrast matrix must have full row rank")
    resid = contrast @ theta - null_value
    sandwich = contrast @ cov @ contrast.T
    try:
        stat = float(resid @ cho_solve(cho_factor(sandwich), resid))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"contrast covariance is singular: {exc}") from exc
    return WaldTestResult(stat, q, float(chi2.sf(stat, q)))
