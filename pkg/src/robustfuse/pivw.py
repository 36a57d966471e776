"""Penalized inverse-variance weighting with per-source bias vectors.

Minimises, over (theta, b_1..b_K),

    F = sum_k pi_k/2 * (theta_k - theta - b_k)' V_k (theta_k - theta - b_k)
        + lam * sum_k w_k ||b_k||

where the group penalty weights w_k come from the pooling stage: sources whose
initial estimate sits far from the pooled centre get small weights (cheap to
assign a bias), sources near the centre get large weights (expensive, so their
bias is driven to exactly zero and they are pooled). The solver is block
coordinate descent with an exact group proximal step per source, certified at
the end against the first-order (KKT) system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq

from .exceptions import (
    EmptySelectionError,
    InvalidProblemError,
    NotConvergedError,
    SingularSystemError,
)
from .model import Diagnostics, FusionEstimate, FusionProblem, resolve_weighting_matrices

__all__ = [
    "PenaltyConfig",
    "SolverConfig",
    "KktReport",
    "oracle_ivw",
    "ivw_combine",
    "adaptive_weights",
    "group_prox",
    "penalized_objective",
    "kkt_residual",
    "solve_penalized_ivw",
]

FORCE_ZERO = "force_zero"
CAP_WEIGHT = "cap"


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty configuration.

    The penalty level is ``lambda_value`` when given, otherwise
    ``lambda_scale / n`` with n the pooled sample size. ``alpha`` is the
    exponent on the inverse initial-bias magnitude. Sources whose initial bias
    is exactly zero have infinite weight; ``zero_weight_policy`` either pins
    their fitted bias to zero (``"force_zero"``) or caps the weight at
    ``weight_cap`` (``"cap"``).
    """

    alpha: float = 2.0
    lambda_scale: float = 1.0
    lambda_value: float | None = None
    zero_weight_policy: str = FORCE_ZERO
    weight_cap: float = 1e12

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidProblemError("alpha must be >= 0")
        if self.lambda_scale < 0:
            raise InvalidProblemError("lambda_scale must be >= 0")
        if self.lambda_value is not None and self.lambda_value < 0:
            raise InvalidProblemError("lambda_value must be >= 0")
        if self.zero_weight_policy not in (FORCE_ZERO, CAP_WEIGHT):
            raise InvalidProblemError(
                f"zero_weight_policy must be {FORCE_ZERO!r} or {CAP_WEIGHT!r}"
            )
        if not (self.weight_cap > 0):
            raise InvalidProblemError("weight_cap must be positive")

    def resolve_lambda(self, n_total: int) -> float:
        if self.lambda_value is not None:
            return float(self.lambda_value)
        return self.lambda_scale / float(n_total)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_sweeps: int = 5000

    def __post_init__(self):
        if self.tol <= 0 or self.max_sweeps < 1:
            raise InvalidProblemError("tol must be positive and max_sweeps >= 1")


@dataclass(frozen=True)
class KktReport:
    """Residuals of the first-order system at a candidate (theta, b).

    ``stationarity_residual`` is the norm of the summed weighted residuals
    (the theta equation); ``per_source_residuals[k]`` is the violation of the
    b_k condition (stationarity mismatch for active blocks, thresholded
    excess for zero blocks). ``worst_zero_margin`` is the smallest slack
    lam*w_k - ||pi_k V_k (theta_k - theta)|| over zero blocks with finite
    weight (+inf when there are none); negative values mean a zero block
    violates its dual bound.
    """

    stationarity_residual: float
    per_source_residuals: np.ndarray
    worst_zero_margin: float
    max_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_residual <= self.tol


def ivw_combine(thetas: np.ndarray, weights: np.ndarray, vmats: np.ndarray, subset) -> np.ndarray:
    """Inverse-variance-weighted combination over a subset of sources."""
    subset = sorted(int(k) for k in subset)
    if not subset:
        raise EmptySelectionError("cannot combine an empty set of sources")
    K = thetas.shape[0]
    if any(k < 0 or k >= K for k in subset):
        raise InvalidProblemError("subset indices out of range")
    A = np.einsum("k,kij->ij", weights[subset], vmats[subset])
    rhs = np.einsum("k,kij,kj->i", weights[subset], vmats[subset], thetas[subset])
    try:
        return cho_solve(cho_factor(A), rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - SPD sums in practice
        raise SingularSystemError(f"weighting matrix sum is singular: {exc}") from exc


def oracle_ivw(problem: FusionProblem, subset) -> FusionEstimate:
    """IVW combination of a known subset (e.g. the true unbiased set)."""
    theta = ivw_combine(
        problem.thetas(), problem.weights(), resolve_weighting_matrices(problem), subset
    )
    diag = Diagnostics(iterations=1, residual=0.0, objective=0.0, converged=True)
    return FusionEstimate(theta, diag, selected=tuple(sorted(int(k) for k in subset)))


def adaptive_weights(
    thetas: np.ndarray,
    pooled: np.ndarray,
    alpha: float = 2.0,
    *,
    zero_weight_policy: str = FORCE_ZERO,
    weight_cap: float = 1e12,
) -> np.ndarray:
    """Penalty weights ||theta_k - pooled||**(-alpha).

    A source exactly on the pooled centre gets weight +inf under
    ``"force_zero"`` (its fitted bias will be pinned to zero) or
    ``weight_cap`` under ``"cap"``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    gaps = np.linalg.norm(thetas - np.asarray(pooled, dtype=float)[None, :], axis=1)
    w = np.empty(gaps.shape)
    zero = gaps == 0.0
    with np.errstate(divide="ignore"):
        w[~zero] = gaps[~zero] ** (-float(alpha))
    w[zero] = np.inf if zero_weight_policy == FORCE_ZERO else weight_cap
    if zero_weight_policy == CAP_WEIGHT:
        w = np.minimum(w, weight_cap)
    return w


def _kappas(lam: float, pen_weights: np.ndarray) -> np.ndarray:
    """Per-source thresholds lam * w_k, with inf weights kept as inf even at
    lam == 0 (the force-zero sentinel is a constraint, not a price)."""
    w = np.asarray(pen_weights, dtype=float)
    out = np.where(np.isinf(w), np.inf, lam * np.where(np.isinf(w), 0.0, w))
    return out


def _prox_eig(c: np.ndarray, eigs: np.ndarray, kappa: float) -> np.ndarray:
    """Group prox in the eigenbasis of A = pi*V.

    ``c`` are the coordinates of r, ``eigs`` the eigenvalues of A. Solves
    t = ||(A + kappa/t I)^{-1} A r|| for t = ||b|| by safeguarded root
    finding on (0, ||r||], then maps back.
    """
    ac = eigs * c
    ac_norm = float(np.linalg.norm(ac))
    if ac_norm <= kappa:
        return np.zeros_like(c)
    if kappa == 0.0:
        return c.copy()

    def gap(t: float) -> float:
        coef = ac * t / (eigs * t + kappa)
        return float(np.linalg.norm(coef)) - t

    hi = float(np.linalg.norm(c))
    lo = (ac_norm - kappa) / float(eigs.max())
    # gap(lo) >= 0 analytically; nudge down if rounding flipped the sign.
    while gap(lo) < 0.0 and lo > 1e-300:
        lo *= 0.5
    t = brentq(gap, lo, hi, xtol=1e-300, rtol=8.9e-16, maxiter=200)
    return ac * t / (eigs * t + kappa)


def group_prox(r: np.ndarray, pi: float, vmat: np.ndarray, kappa: float) -> np.ndarray:
    """argmin_b pi/2 (r-b)' V (r-b) + kappa ||b||.

    Returns exact zeros when ||pi V r|| <= kappa; otherwise solves the scalar
    fixed point for t = ||b|| and returns b = (pi V + kappa/t I)^{-1} pi V r.
    """
    r = np.asarray(r, dtype=float)
    if kappa < 0:
        raise InvalidProblemError("kappa must be >= 0")
    if math.isinf(kappa):
        return np.zeros_like(r)
    if kappa == 0.0:
        return r.copy()
    A = float(pi) * np.asarray(vmat, dtype=float)
    eigs, Q = np.linalg.eigh(A)
    if eigs.min() <= 0:
        raise InvalidProblemError("pi * V must be positive definite in group_prox")
    return Q @ _prox_eig(Q.T @ r, eigs, kappa)


def penalized_objective(
    thetas: np.ndarray,
    weights: np.ndarray,
    vmats: np.ndarray,
    lam: float,
    pen_weights: np.ndarray,
    theta: np.ndarray,
    biases: np.ndarray,
) -> float:
    """Objective value F(theta, b). Forced-zero blocks contribute no penalty."""
    resid = thetas - theta[None, :] - biases
    quad = 0.5 * float(np.einsum("k,ki,kij,kj->", weights, resid, vmats, resid))
    norms = np.linalg.norm(biases, axis=1)
    kappas = _kappas(lam, pen_weights)
    pen = 0.0
    for k, t in enumerate(norms):
        if t > 0.0:
            if math.isinf(kappas[k]):
                return math.inf
            pen += kappas[k] * t
    return quad + pen


def kkt_residual(
    thetas: np.ndarray,
    weights: np.ndarray,
    vmats: np.ndarray,
    lam: float,
    pen_weights: np.ndarray,
    theta: np.ndarray,
    biases: np.ndarray,
    *,
    tol: float = 1e-8,
) -> KktReport:
    """Certify a candidate (theta, b) against the first-order system.

    Active blocks must satisfy pi_k V_k (theta_k - theta - b_k) =
    lam w_k b_k/||b_k||; zero blocks must satisfy the dual bound
    ||pi_k V_k (theta_k - theta)|| <= lam w_k; and the weighted residuals must
    sum to zero.
    """
    K = thetas.shape[0]
    kappas = _kappas(lam, pen_weights)
    grads = np.einsum("k,kij,kj->ki", weights, vmats, thetas - theta[None, :] - biases)
    stationarity = float(np.linalg.norm(grads.sum(axis=0)))
    per_source = np.zeros(K)
    worst_margin = math.inf
    for k in range(K):
        bnorm = float(np.linalg.norm(biases[k]))
        if bnorm > 0.0:
            if math.isinf(kappas[k]):
                per_source[k] = math.inf
                continue
            per_source[k] = float(
                np.linalg.norm(grads[k] - kappas[k] * biases[k] / bnorm)
            )
        else:
            pull = float(np.linalg.norm(grads[k]))
            if math.isinf(kappas[k]):
                continue
            per_source[k] = max(0.0, pull - kappas[k])
            worst_margin = min(worst_margin, kappas[k] - pull)
    max_residual = max(stationarity, float(per_source.max()) if K else 0.0)
    return KktReport(stationarity, per_source, worst_margin, max_residual, tol)


def _active_newton(
    thetas: np.ndarray,
    pi: np.ndarray,
    vmats: np.ndarray,
    kappas: np.ndarray,
    lam_weights_objective,
    theta: np.ndarray,
    b: np.ndarray,
    tol: float,
    max_newton: int = 40,
) -> tuple[np.ndarray, np.ndarray]:
    """Second-order refinement of the smooth problem on the current support.

    Coordinate descent alone creeps when theta and the active bias blocks
    share a nearly flat direction (theta up, biases down), so once the zero
    pattern settles we take damped Newton steps on F restricted to the active
    blocks, using the arrow structure of the Hessian (Schur complement in
    theta). Descent is enforced by backtracking, and steps are capped so no
    active block collapses through zero; pattern changes remain the job of
    the proximal sweeps.
    """
    lam, pen_weights = lam_weights_objective
    K, d = thetas.shape
    eye = np.eye(d)
    theta = theta.copy()
    b = b.copy()
    obj = penalized_objective(thetas, pi, vmats, lam, pen_weights, theta, b)
    for _ in range(max_newton):
        active = [k for k in range(K) if np.linalg.norm(b[k]) > 0.0]
        resid = thetas - theta[None, :] - b
        pv_resid = np.einsum("k,kij,kj->ki", pi, vmats, resid)
        g_theta = -pv_resid.sum(axis=0)
        grad_sq = float(g_theta @ g_theta)
        g_act = {}
        h_inv_g = {}
        h_inv_c = {}
        schur = np.einsum("k,kij->ij", pi, vmats)
        rhs = -g_theta
        for k in active:
            t = float(np.linalg.norm(b[k]))
            z = b[k] / t
            gk = -pv_resid[k] + kappas[k] * z
            grad_sq += float(gk @ gk)
            ck = pi[k] * vmats[k]
            hk = ck + (kappas[k] / t) * (eye - np.outer(z, z))
            hk = hk + (1e-12 * np.trace(hk) / d) * eye
            g_act[k] = gk
            h_inv_g[k] = np.linalg.solve(hk, gk)
            h_inv_c[k] = np.linalg.solve(hk, ck)
            schur = schur - ck @ h_inv_c[k]
            rhs = rhs + ck @ h_inv_g[k]
        if math.sqrt(grad_sq) <= 0.25 * tol:
            break
        try:
            d_theta = np.linalg.solve(schur + 1e-12 * np.trace(schur) / d * eye, rhs)
        except np.linalg.LinAlgError:
            break
        d_b = {k: -h_inv_g[k] - h_inv_c[k] @ d_theta for k in active}
        # Directional derivative of F along the step (for Armijo).
        slope = float(g_theta @ d_theta) + sum(float(g_act[k] @ d_b[k]) for k in active)
        if slope >= 0.0:
            break
        step = 1.0
        for k in active:
            move = float(np.linalg.norm(d_b[k]))
            keep = float(np.linalg.norm(b[k]))
            if move > 0.9 * keep:
                step = min(step, 0.9 * keep / move)
        improved = False
        while step > 1e-10:
            theta_try = theta + step * d_theta
            b_try = b.copy()
            for k in active:
                b_try[k] = b[k] + step * d_b[k]
            obj_try = penalized_objective(thetas, pi, vmats, lam, pen_weights, theta_try, b_try)
            if obj_try <= obj + 1e-4 * step * slope:
                theta, b, obj = theta_try, b_try, obj_try
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return theta, b


def solve_penalized_ivw(
    problem: FusionProblem,
    initial: np.ndarray | FusionEstimate | None = None,
    penalty: PenaltyConfig = PenaltyConfig(),
    solver: SolverConfig = SolverConfig(),
    *,
    keep_trace: bool = False,
) -> FusionEstimate:
    """Fit (theta, b_1..b_K) by block coordinate descent.

    ``initial`` is the pooled centre used to build the adaptive penalty
    weights; when omitted it is computed with the geometric-median stage.
    Sweeps update theta in closed form, then each bias block through
    :func:`group_prox`, in a fixed order. Convergence requires both a small
    maximum block move and a passing KKT certificate. On exhaustion a
    :class:`NotConvergedError` carries the best iterate.
    """
    from .geomedian import solve_initial  # local import to avoid cycle

    if initial is None:
        initial = solve_initial(problem)
    pooled = initial.theta if isinstance(initial, FusionEstimate) else np.asarray(initial, dtype=float)

    thetas = problem.thetas()
    pi = problem.weights()
    vmats = resolve_weighting_matrices(problem)
    K, d = thetas.shape

    lam = penalty.resolve_lambda(problem.n_total)
    w = adaptive_weights(
        thetas,
        pooled,
        penalty.alpha,
        zero_weight_policy=penalty.zero_weight_policy,
        weight_cap=penalty.weight_cap,
    )
    kappas = _kappas(lam, w)

    # Per-source eigendecompositions of pi_k V_k, reused by every prox call.
    eig_vals = np.empty((K, d))
    eig_vecs = np.empty((K, d, d))
    for k in range(K):
        vals, vecs = np.linalg.eigh(pi[k] * vmats[k])
        if vals.min() <= 0:
            raise SingularSystemError(f"weighting matrix for source {k} is not positive definite")
        eig_vals[k], eig_vecs[k] = vals, vecs

    A = np.einsum("k,kij->ij", pi, vmats)
    try:
        chol = cho_factor(A)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise SingularSystemError(f"summed weighting matrix is singular: {exc}") from exc

    b = np.zeros((K, d))
    theta = cho_solve(chol, np.einsum("k,kij,kj->i", pi, vmats, thetas))
    trace: list[float] = []
    report = None

    for sweep in range(1, solver.max_sweeps + 1):
        move = 0.0
        theta_new = cho_solve(chol, np.einsum("k,kij,kj->i", pi, vmats, thetas - b))
        move = max(move, float(np.linalg.norm(theta_new - theta)))
        theta = theta_new
        for k in range(K):
            if math.isinf(kappas[k]):
                b_new = np.zeros(d)
            else:
                r = thetas[k] - theta
                if kappas[k] == 0.0:
                    b_new = r
                else:
                    b_new = eig_vecs[k] @ _prox_eig(eig_vecs[k].T @ r, eig_vals[k], kappas[k])
            move = max(move, float(np.linalg.norm(b_new - b[k])))
            b[k] = b_new
        if keep_trace:
            trace.append(penalized_objective(thetas, pi, vmats, lam, w, theta, b))
        scale = 1.0 + float(np.linalg.norm(theta))
        if sweep >= 2 and move <= 1e-3 * scale:
            theta, b = _active_newton(
                thetas, pi, vmats, kappas, (lam, w), theta, b, solver.tol
            )
            if keep_trace:
                trace.append(penalized_objective(thetas, pi, vmats, lam, w, theta, b))
        if move <= solver.tol * scale:
            report = kkt_residual(thetas, pi, vmats, lam, w, theta, b, tol=solver.tol)
            if report.passed:
                break
    else:
        report = kkt_residual(thetas, pi, vmats, lam, w, theta, b, tol=solver.tol)
        diag = Diagnostics(
            solver.max_sweeps,
            report.max_residual,
            penalized_objective(thetas, pi, vmats, lam, w, theta, b),
            converged=False,
            objective_trace=tuple(trace) if keep_trace else None,
        )
        partial = FusionEstimate(
            theta, diag, biases=b, selected=tuple(np.flatnonzero(np.linalg.norm(b, axis=1) == 0.0))
        )
        raise NotConvergedError(
            f"penalized IVW: residual {report.max_residual:.3e} > tol {solver.tol:.1e} "
            f"after {solver.max_sweeps} sweeps",
            result=partial,
        )

    selected = tuple(int(k) for k in np.flatnonzero(np.linalg.norm(b, axis=1) == 0.0))
    diag = Diagnostics(
        sweep,
        report.max_residual,
        penalized_objective(thetas, pi, vmats, lam, w, theta, b),
        converged=True,
        objective_trace=tuple(trace) if keep_trace else None,
    )
    return FusionEstimate(theta.copy(), diag, biases=b.copy(), selected=selected)
