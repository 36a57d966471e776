"""Core data model: per-source summaries, fusion problems, ground truth.

All estimators in this package consume a :class:`FusionProblem`: K per-source
parameter estimates with sample sizes, plus the weighting scheme used by the
quadratic stage. Heavy numerical work lives in :mod:`robustfuse.geomedian` and
:mod:`robustfuse.pivw`; this module only validates and normalises inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import (
    DimensionMismatchError,
    InvalidCovarianceError,
    InvalidGroundTruthError,
    InvalidProblemError,
    InvalidWeightingMatrixError,
    MissingCovarianceError,
)

__all__ = [
    "SourceSummary",
    "FusionProblem",
    "GroundTruth",
    "Diagnostics",
    "FusionEstimate",
    "IDENTITY",
    "INVERSE_COVARIANCE",
    "compute_weights",
    "resolve_weighting_matrices",
    "check_spd",
]

# Weighting scheme names accepted by FusionProblem / the CLI.
IDENTITY = "identity"
INVERSE_COVARIANCE = "invcov"


def check_spd(mat: np.ndarray, what: str = "matrix", *, sym_tol: float = 1e-8) -> np.ndarray:
    """Validate that ``mat`` is symmetric positive definite.

    Returns the symmetrised matrix. Raises :class:`InvalidCovarianceError` or
    :class:`InvalidWeightingMatrixError` depending on ``what``.
    """
    mat = np.asarray(mat, dtype=float)
    err = InvalidWeightingMatrixError if "weight" in what else InvalidCovarianceError
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise err(f"{what} must be square, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise err(f"{what} contains non-finite entries")
    scale = max(1.0, float(np.abs(mat).max()))
    if np.abs(mat - mat.T).max() > sym_tol * scale:
        raise err(f"{what} is not symmetric")
    sym = 0.5 * (mat + mat.T)
    try:
        np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        raise err(f"{what} is not positive definite") from None
    return sym


@dataclass(frozen=True)
class SourceSummary:
    """Summary statistics published by one data source.

    Parameters
    ----------
    source_id:
        Stable identifier used in reports.
    n:
        Sample size behind the estimate; positive integer.
    theta:
        Parameter estimate, shape (d,).
    cov:
        Optional estimated covariance of ``theta`` (finite-sample scale, i.e.
        it already includes the 1/n factor), shape (d, d), SPD.
    """

    source_id: str
    n: int
    theta: np.ndarray
    cov: np.ndarray | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise InvalidProblemError(
                f"source {self.source_id!r}: sample size must be a positive integer, got {self.n}"
            )
        object.__setattr__(self, "n", int(self.n))
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float))
        if theta.ndim != 1 or theta.size == 0:
            raise InvalidProblemError(
                f"source {self.source_id!r}: theta must be a non-empty vector"
            )
        if not np.all(np.isfinite(theta)):
            raise InvalidProblemError(f"source {self.source_id!r}: theta has non-finite entries")
        object.__setattr__(self, "theta", theta)
        if self.cov is not None:
            cov = check_spd(np.asarray(self.cov, dtype=float), f"source {self.source_id!r} covariance")
            if cov.shape[0] != theta.size:
                raise DimensionMismatchError(
                    f"source {self.source_id!r}: cov shape {cov.shape} does not match d={theta.size}"
                )
            object.__setattr__(self, "cov", cov)

    @property
    def d(self) -> int:
        return self.theta.size


def compute_weights(sizes: Sequence[int]) -> np.ndarray:
    """Proportional source weights n_k / sum(n).

    >>> compute_weights([100, 100, 200])
    array([0.25, 0.25, 0.5 ])
    """
    sizes = np.asarray(sizes)
    if sizes.ndim != 1 or sizes.size == 0:
        raise InvalidProblemError("need a non-empty 1-D list of sample sizes")
    if not np.all(sizes == sizes.astype(int)) or np.any(sizes < 1):
        raise InvalidProblemError("sample sizes must be positive integers")
    sizes = sizes.astype(float)
    return sizes / sizes.sum()


@dataclass(frozen=True)
class FusionProblem:
    """K source summaries plus the weighting scheme for the quadratic stage.

    ``weighting`` is either ``"identity"``, ``"invcov"``, or an explicit list
    of K SPD (d, d) matrices.
    """

    sources: tuple[SourceSummary, ...]
    weighting: object = IDENTITY

    def __post_init__(self):
        sources = tuple(self.sources)
        if not sources:
            raise InvalidProblemError("a fusion problem needs at least one source")
        object.__setattr__(self, "sources", sources)
        d = sources[0].d
        for s in sources:
            if s.d != d:
                raise DimensionMismatchError(
                    f"source {s.source_id!r} has d={s.d}, expected {d}"
                )
        ids = [s.source_id for s in sources]
        if len(set(ids)) != len(ids):
            raise InvalidProblemError("source ids must be unique")
        if isinstance(self.weighting, str):
            if self.weighting not in (IDENTITY, INVERSE_COVARIANCE):
                raise InvalidProblemError(
                    f"unknown weighting {self.weighting!r}; expected "
                    f"{IDENTITY!r}, {INVERSE_COVARIANCE!r}, or explicit matrices"
                )
        else:
            mats = tuple(
                check_spd(m, f"weighting matrix for source {s.source_id!r}")
                for m, s in zip(self.weighting, sources, strict=True)
            )
            for m in mats:
                if m.shape[0] != d:
                    raise DimensionMismatchError(
                        f"weighting matrix shape {m.shape} does not match d={d}"
                    )
            object.__setattr__(self, "weighting", mats)

    @property
    def K(self) -> int:
        return len(self.sources)

    @property
    def d(self) -> int:
        return self.sources[0].d

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.sources)

    def weights(self) -> np.ndarray:
        """Proportional weights pi_k = n_k / n, in source order."""
        return compute_weights([s.n for s in self.sources])

    def thetas(self) -> np.ndarray:
        """Stacked estimates, shape (K, d)."""
        return np.stack([s.theta for s in self.sources])


def resolve_weighting_matrices(problem: FusionProblem) -> np.ndarray:
    """Concrete (K, d, d) weighting matrices for the quadratic stage.

    - identity: I_d for every source.
    - invcov: (n_k * cov_k)^{-1}, i.e. the inverse of the covariance rescaled
      to per-observation size so its eigenvalues stay O(1) as n_k grows.
    - explicit: the validated matrices as given.
    """
    K, d = problem.K, problem.d
    if isinstance(problem.weighting, str):
        if problem.weighting == IDENTITY:
            return np.broadcast_to(np.eye(d), (K, d, d)).copy()
        out = np.empty((K, d, d))
        for i, s in enumerate(problem.sources):
            if s.cov is None:
                raise MissingCovarianceError(
                    f"source {s.source_id!r} has no covariance; "
                    "inverse-covariance weighting needs one per source"
                )
            out[i] = np.linalg.inv(s.n * s.cov)
            out[i] = 0.5 * (out[i] + out[i].T)
        return out
    return np.stack(problem.weighting)


@dataclass(frozen=True)
class GroundTruth:
    """Known truth for simulations: target parameter, per-source biases, and
    the unbiased index set (0-based)."""

    theta0: np.ndarray
    biases: np.ndarray  # (K, d)
    unbiased: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        theta0 = np.atleast_1d(np.asarray(self.theta0, dtype=float))
        biases = np.atleast_2d(np.asarray(self.biases, dtype=float))
        if biases.shape[1] != theta0.size:
            raise InvalidGroundTruthError(
                f"bias rows have d={biases.shape[1]}, theta0 has d={theta0.size}"
            )
        unbiased = frozenset(int(k) for k in self.unbiased)
        K = biases.shape[0]
        if any(k < 0 or k >= K for k in unbiased):
            raise InvalidGroundTruthError("unbiased indices out of range")
        for k in unbiased:
            if np.any(biases[k] != 0.0):
                raise InvalidGroundTruthError(f"source {k} is declared unbiased but has nonzero bias")
        for k in range(K):
            if k not in unbiased and np.linalg.norm(biases[k]) == 0.0:
                raise InvalidGroundTruthError(
                    f"source {k} is declared biased but its bias vector is exactly zero"
                )
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "biases", biases)
        object.__setattr__(self, "unbiased", unbiased)

    @property
    def K(self) -> int:
        return self.biases.shape[0]

    def per_source_targets(self) -> np.ndarray:
        """theta0 + bias_k for every source, shape (K, d)."""
        return self.theta0[None, :] + self.biases


@dataclass(frozen=True)
class Diagnostics:
    """Solver bookkeeping attached to every estimate."""

    iterations: int
    residual: float
    objective: float
    converged: bool
    anchored: bool = False
    boundary_optimality: bool = False
    objective_trace: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.converged and not np.isfinite(self.residual):
            raise InvalidProblemError("converged estimate must carry a finite residual")


@dataclass(frozen=True)
class FusionEstimate:
    """Result of an estimation stage.

    ``biases`` and ``selected`` are populated by the penalized stage only;
    ``selected`` holds 0-based indices of sources whose fitted bias is exactly
    zero (the estimated unbiased set).
    """

    theta: np.ndarray
    diagnostics: Diagnostics
    biases: np.ndarray | None = None
    selected: tuple[int, ...] | None = None
