"""Simulation harness: data-generating processes and the estimator battery.

Three families are covered:

- ``linear``: per-source least squares with Gaussian covariates, a fixed
  pattern of bias vectors hitting 8 of every 10 sources;
- ``logistic``: the same pattern at half scale on a logistic model, fitted by
  ridge-stabilised IRLS;
- ``mr``: a synthetic summary-data instrumental-variable setup with 160
  one-dimensional sources of which the first 100 carry direct effects.

Every replicate draws from its own counter-derived substream, so results are
reproducible and independent of scheduling or battery composition.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .exceptions import (
    FusionError,
    InvalidDesignError,
    NotConvergedError,
)
from .geomedian import GeoMedianConfig, solve_initial, weighted_geometric_median
from .model import FusionProblem, GroundTruth, SourceSummary, resolve_weighting_matrices
from .pivw import PenaltyConfig, SolverConfig, ivw_combine, oracle_ivw, solve_penalized_ivw

__all__ = [
    "ESTIMATORS",
    "SimDesign",
    "SimMetrics",
    "SimReport",
    "CounterexampleResult",
    "bias_matrix",
    "make_truth",
    "mr_profile",
    "dgp_linear",
    "dgp_logistic",
    "dgp_mr",
    "draw_problem",
    "run_replications",
    "counterexample_median",
    "design_preset",
    "metrics_rows",
    "write_metrics_csv",
    "format_report",
]

ESTIMATORS = ("naive", "ivw", "oracle", "initial", "penalized")

# Fixed 3 x 10 bias pattern; columns are per-source bias vectors for one block
# of ten sources. The first two columns are zero, so 20% of sources are clean.
_B = np.array(
    [
        [0, 0, 5, -1, 1, 1, -2, -2, 5, -1],
        [0, 0, 0, 0, 0, -1, 0, 2, 5, -1],
        [0, 0, 0, 0, -1, 1, 2, -2, 5, 1],
    ],
    dtype=float,
)

_THETA_BLOCK = np.array([2.0, 1.0, -1.0])

# Synthetic instrumental-variable constants (see mr_profile).
MR_INSTRUMENTS = 160
MR_INVALID = 100
MR_SIGMA1 = 0.003
MR_SIGMA2 = 0.005
MR_MEAN_EFFECT = 0.03
MR_SD_EFFECT = 0.01
MR_MIN_EFFECT = 0.005
MR_NEGATIVE_FRACTION = 0.7
MR_DROP_FLOOR = 1e-3


def bias_matrix() -> np.ndarray:
    """The fixed 3 x 10 bias pattern (copy)."""
    return _B.copy()


@dataclass(frozen=True)
class SimDesign:
    """One simulation configuration.

    ``bias_scale`` of ``None`` picks the family default (1.0 linear,
    0.5 logistic); pass 0.0 for the zero-bias variants. For the ``mr`` family
    d and K are fixed by construction and ``n_star`` is ignored.
    """

    family: str
    d: int = 3
    K: int = 10
    n_star: int = 100
    bias_scale: float | None = None
    replicates: int = 200
    seed: int = 7
    weighting: str = "identity"
    estimators: tuple[str, ...] = ESTIMATORS
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    geomedian: GeoMedianConfig = field(default_factory=GeoMedianConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ridge: float = 1e-4

    def __post_init__(self):
        if self.family not in ("linear", "logistic", "mr"):
            raise InvalidDesignError(f"unknown family {self.family!r}")
        if self.replicates < 1:
            raise InvalidDesignError("need at least one replicate")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise InvalidDesignError(f"unknown estimators {bad}; choose from {ESTIMATORS}")
        if self.family == "mr":
            if self.d != 1 or self.K != MR_INSTRUMENTS:
                raise InvalidDesignError(
                    f"the mr family is fixed at d=1, K={MR_INSTRUMENTS}"
                )
        else:
            if self.d < 3 or self.d % 3 != 0:
                raise InvalidDesignError("d must be a positive multiple of 3")
            if self.K < 10 or self.K % 10 != 0:
                raise InvalidDesignError("K must be a positive multiple of 10")
            if self.n_star < self.d + 2:
                raise InvalidDesignError("n_star too small to estimate a residual variance")

    @property
    def effective_bias_scale(self) -> float:
        if self.bias_scale is not None:
            return float(self.bias_scale)
        return 1.0 if self.family == "linear" else 0.5


@dataclass(frozen=True)
class SimMetrics:
    """Replication summary for one estimator.

    ``nb`` is the norm of the mean error vector, ``sse`` the sum of the
    per-coordinate standard errors. ``selection_rate`` (exact recovery of the
    unbiased set) and ``equiv_dist`` (mean distance to the oracle combination)
    are populated for the penalized estimator only.
    """

    estimator: str
    nb: float
    sse: float
    selection_rate: float | None = None
    equiv_dist: float | None = None


@dataclass(frozen=True)
class SimReport:
    design: SimDesign
    metrics: tuple[SimMetrics, ...]
    failures: int
    replicates_used: int
    estimates: dict[str, np.ndarray]

    def metric(self, estimator: str) -> SimMetrics:
        for m in self.metrics:
            if m.estimator == estimator:
                return m
        raise KeyError(estimator)


def make_truth(design: SimDesign) -> GroundTruth:
    """Ground truth for the linear / logistic families."""
    if design.family == "mr":
        raise InvalidDesignError("mr truth is tied to its surrogate profile; use mr_profile")
    scale = 1.0 if design.family == "linear" else 0.1
    theta0 = scale * np.tile(_THETA_BLOCK, design.d // 3)
    cols = np.tile(_B, (design.d // 3, design.K // 10)) * design.effective_bias_scale
    biases = cols.T  # (K, d)
    unbiased = frozenset(
        int(k) for k in range(design.K) if np.linalg.norm(biases[k]) == 0.0
    )
    return GroundTruth(theta0, biases, unbiased)


def _child_rng(seed: int, rep: int, source: int) -> np.random.Generator:
    # Counter-keyed substreams: draws for (rep, source) never depend on how
    # many replicates or sources surround them.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1 + rep, 1 + source)))


def dgp_linear(
    design: SimDesign,
    truth: GroundTruth,
    rep: int,
    *,
    noise_sd: float = 1.0,
) -> FusionProblem:
    """Per-source least squares on Gaussian covariates with variance 3.

    ``noise_sd=0`` is a diagnostic switch: every source then returns its
    target coefficient vector exactly (covariances are zero and omitted).
    """
    targets = truth.per_source_targets()
    sources = []
    for k in range(design.K):
        rng = _child_rng(design.seed, rep, k)
        X = rng.normal(0.0, math.sqrt(3.0), size=(design.n_star, design.d))
        eps = noise_sd * rng.standard_normal(design.n_star) if noise_sd > 0 else 0.0
        y = X @ targets[k] + eps
        xtx = X.T @ X
        beta = np.linalg.solve(xtx, X.T @ y)
        if noise_sd > 0:
            resid = y - X @ beta
            sigma2 = float(resid @ resid) / (design.n_star - design.d)
            cov = sigma2 * np.linalg.inv(xtx)
            cov = 0.5 * (cov + cov.T)
        else:
            cov = None
        sources.append(SourceSummary(f"src{k:02d}", design.n_star, beta, cov))
    return FusionProblem(tuple(sources), design.weighting)


def fit_logistic_ridge(
    X: np.ndarray,
    y: np.ndarray,
    ridge: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> tuple[np.ndarray, np.ndarray]:
    """Ridge-stabilised IRLS (Newton with step halving).

    Minimises mean negative log-likelihood + ridge/2 * ||theta||^2. Returns
    the fit and the inverse penalized information as covariance estimate.
    """
    n, d = X.shape
    theta = np.zeros(d)

    def objective(t: np.ndarray) -> float:
        z = X @ t
        return (float(np.logaddexp(0.0, z).sum() - y @ z)) / n + 0.5 * ridge * float(t @ t)

    obj = objective(theta)
    w = np.full(n, 0.25)
    for _ in range(max_iter):
        z = X @ theta
        p = expit(z)
        g = X.T @ (p - y) / n + ridge * theta
        if np.linalg.norm(g) <= tol * (1.0 + np.linalg.norm(theta)):
            break
        w = np.clip(p * (1.0 - p), 1e-12, None)
        H = (X.T * w) @ X / n + ridge * np.eye(d)
        step = np.linalg.solve(H, g)
        slope = float(g @ step)
        t_step = 1.0
        while t_step > 1e-6:
            cand = theta - t_step * step
            cand_obj = objective(cand)
            if cand_obj <= obj - 1e-4 * t_step * slope:
                break
            t_step *= 0.5
        else:
            raise NotConvergedError("logistic fit: line search failed")
        theta, obj = cand, cand_obj
    else:
        raise NotConvergedError("logistic fit: IRLS exhausted its iteration budget")
    info = (X.T * w) @ X + n * ridge * np.eye(d)
    cov = np.linalg.inv(info)
    return theta, 0.5 * (cov + cov.T)


def dgp_logistic(design: SimDesign, truth: GroundTruth, rep: int) -> FusionProblem:
    """Per-source logistic fits; one fresh resample per source on IRLS failure."""
    targets = truth.per_source_targets()
    sources = []
    for k in range(design.K):
        rng = _child_rng(design.seed, rep, k)
        for attempt in range(2):
            X = rng.normal(0.0, math.sqrt(3.0), size=(design.n_star, design.d))
            y = (rng.random(design.n_star) < expit(X @ targets[k])).astype(float)
            try:
                beta, cov = fit_logistic_ridge(X, y, ridge=design.ridge)
                break
            except NotConvergedError:
                if attempt == 1:
                    raise
        sources.append(SourceSummary(f"src{k:02d}", design.n_star, beta, cov))
    return FusionProblem(tuple(sources), design.weighting)


@dataclass(frozen=True)
class MrProfile:
    """Fixed per-instrument surrogate: signed instrument strengths, with the
    first ``MR_INVALID`` instruments carrying a direct effect 0.15 + 3*beta
    on the outcome (a ratio-scale bias of 3 + 0.15/beta)."""

    beta_bar: np.ndarray
    theta0: float = 1.0

    def truth(self, kept: np.ndarray | None = None) -> GroundTruth:
        biases = np.zeros(MR_INSTRUMENTS)
        biases[:MR_INVALID] = 3.0 + 0.15 / self.beta_bar[:MR_INVALID]
        if kept is None:
            kept = np.arange(MR_INSTRUMENTS)
        sub = biases[kept]
        unbiased = frozenset(int(i) for i, b in enumerate(sub) if b == 0.0)
        return GroundTruth(np.array([self.theta0]), sub[:, None], unbiased)


def mr_profile(seed: int) -> MrProfile:
    """Draw the fixed instrument profile for a given design seed.

    Strength magnitudes follow N(0.03, 0.01^2) truncated at |x| >= 0.005.
    Signs are assigned so that 70% of the invalid instruments have negative
    strength: with a direct effect of 0.15 + 3*beta the ratio-scale biases
    then point in both directions (mostly negative for negative beta), which
    keeps the pooling stage identified despite the invalid majority — the
    situation the signed real summary data puts the estimator in.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    mags = np.empty(MR_INSTRUMENTS)
    filled = 0
    while filled < MR_INSTRUMENTS:
        draw = rng.normal(MR_MEAN_EFFECT, MR_SD_EFFECT, size=MR_INSTRUMENTS)
        good = np.abs(draw) >= MR_MIN_EFFECT
        take = min(int(good.sum()), MR_INSTRUMENTS - filled)
        mags[filled : filled + take] = np.abs(draw[good][:take])
        filled += take
    signs = np.ones(MR_INSTRUMENTS)
    n_neg_invalid = int(round(MR_NEGATIVE_FRACTION * MR_INVALID))
    signs[:n_neg_invalid] = -1.0
    # Alternate signs among the valid block; irrelevant for bias, keeps the
    # profile looking like signed summary data.
    valid_idx = np.arange(MR_INVALID, MR_INSTRUMENTS)
    signs[valid_idx[::2]] = -1.0
    return MrProfile(signs * mags)


def dgp_mr(design: SimDesign, profile: MrProfile, rep: int) -> tuple[FusionProblem, GroundTruth]:
    """Summary-data instrumental-variable replicate.

    Draws noisy instrument-exposure and instrument-outcome effects around the
    profile, forms ratio estimates with delta-method variances, and drops
    instruments whose noisy strength falls under ``MR_DROP_FLOOR``.
    """
    rng = _child_rng(design.seed, rep, 0)
    beta_bar = profile.beta_bar
    gamma_bar = beta_bar * profile.theta0
    gamma_bar = gamma_bar + np.where(
        np.arange(MR_INSTRUMENTS) < MR_INVALID, 0.15 + 3.0 * beta_bar, 0.0
    )
    beta_hat = beta_bar + MR_SIGMA1 * rng.standard_normal(MR_INSTRUMENTS)
    gamma_hat = gamma_bar + MR_SIGMA2 * rng.standard_normal(MR_INSTRUMENTS)
    kept = np.flatnonzero(np.abs(beta_hat) >= MR_DROP_FLOOR)
    ratios = gamma_hat[kept] / beta_hat[kept]
    variances = (MR_SIGMA2**2 + ratios**2 * MR_SIGMA1**2) / beta_hat[kept] ** 2
    sources = tuple(
        SourceSummary(f"inst{int(k):03d}", 1, np.array([r]), np.array([[v]]))
        for k, r, v in zip(kept, ratios, variances)
    )
    return FusionProblem(sources, design.weighting), profile.truth(kept)


def draw_problem(design: SimDesign, rep: int, truth_or_profile) -> tuple[FusionProblem, GroundTruth]:
    """One replicate of the design; returns the problem and its ground truth."""
    if design.family == "linear":
        return dgp_linear(design, truth_or_profile, rep), truth_or_profile
    if design.family == "logistic":
        return dgp_logistic(design, truth_or_profile, rep), truth_or_profile
    return dgp_mr(design, truth_or_profile, rep)


def truth_context(design: SimDesign):
    """The fixed across-replicate truth object (profile for mr)."""
    return mr_profile(design.seed) if design.family == "mr" else make_truth(design)


def run_replications(design: SimDesign) -> SimReport:
    """Run the estimator battery over the design's replicates.

    Replicates where any stage raises are counted as failures and excluded
    from the metrics rather than aborting the run.
    """
    ctx = truth_context(design)
    theta0 = ctx.theta0 if isinstance(ctx, GroundTruth) else np.array([ctx.theta0])
    wanted = design.estimators
    draws: dict[str, list[np.ndarray]] = {name: [] for name in wanted}
    hits = 0
    equiv: list[float] = []
    failures = 0
    used = 0

    for rep in range(design.replicates):
        try:
            problem, truth = draw_problem(design, rep, ctx)
            thetas = problem.thetas()
            pooled = None
            rep_draws = {}
            if "naive" in wanted:
                rep_draws["naive"] = thetas.mean(axis=0)
            if "ivw" in wanted:
                rep_draws["ivw"] = ivw_combine(
                    thetas, problem.weights(), resolve_weighting_matrices(problem),
                    range(problem.K),
                )
            if "oracle" in wanted or "penalized" in wanted:
                oracle = oracle_ivw(problem, sorted(truth.unbiased))
                if "oracle" in wanted:
                    rep_draws["oracle"] = oracle.theta
            if "initial" in wanted or "penalized" in wanted:
                pooled = solve_initial(problem, design.geomedian)
                if "initial" in wanted:
                    rep_draws["initial"] = pooled.theta
            if "penalized" in wanted:
                fit = solve_penalized_ivw(problem, pooled, design.penalty, design.solver)
                rep_draws["penalized"] = fit.theta
                hits += int(frozenset(fit.selected) == truth.unbiased)
                equiv.append(float(np.linalg.norm(fit.theta - oracle.theta)))
        except FusionError:
            failures += 1
            continue
        for name, value in rep_draws.items():
            draws[name].append(value)
        used += 1

    if used == 0:
        raise InvalidDesignError("every replicate failed; check the design")

    estimates = {name: np.stack(vals) for name, vals in draws.items() if vals}
    metrics = []
    for name in wanted:
        est = estimates[name]
        errs = est - theta0[None, :]
        nb = float(np.linalg.norm(errs.mean(axis=0)))
        sse = float(np.std(est, axis=0, ddof=1).sum()) if est.shape[0] > 1 else 0.0
        sel = hits / used if name == "penalized" else None
        eq = float(np.mean(equiv)) if name == "penalized" and equiv else None
        metrics.append(SimMetrics(name, nb, sse, sel, eq))
    return SimReport(design, tuple(metrics), failures, used, estimates)


@dataclass(frozen=True)
class CounterexampleResult:
    K: int
    n: int
    tau: float
    replicates: int
    seed: int
    h_star: float
    threshold: float
    exceedance_rate: float
    errors: np.ndarray


def counterexample_median(
    K: int,
    n: int,
    tau: float,
    replicates: int = 500,
    seed: int = 7,
) -> CounterexampleResult:
    """Plain pooling with a biased near-majority: the error floor in action.

    ``floor((1/2 + tau) K)`` sources sit at 0 and the rest at 1; each source
    estimate has variance K/n. The pooled median then exceeds
    sqrt(K) * h(tau) / sqrt(n), h(tau) = Phi^{-1}((3/8 + tau/4)/(1/2 + tau)),
    with probability approaching one — root-n-of-the-pooled-sample accuracy
    is impossible without the extraction stage.
    """
    if K < 2 or n < K or n % K != 0:
        raise InvalidDesignError("need K >= 2 and n a positive multiple of K")
    if not 0.0 <= tau <= 0.5:
        raise InvalidDesignError("tau must lie in [0, 1/2]")
    if replicates < 1:
        raise InvalidDesignError("need at least one replicate")
    m = int(math.floor((0.5 + tau) * K))
    targets = np.where(np.arange(K) < m, 0.0, 1.0)
    sd = math.sqrt(K / n)
    h_star = float(norm.ppf((3.0 / 8.0 + tau / 4.0) / (0.5 + tau)))
    threshold = math.sqrt(K) * h_star / math.sqrt(n)
    weights = np.full(K, 1.0 / K)
    errors = np.empty(replicates)
    for rep in range(replicates):
        rng = _child_rng(seed, rep, 0)
        points = targets + sd * rng.standard_normal(K)
        med = weighted_geometric_median(points[:, None], weights)
        errors[rep] = med.theta[0]
    rate = float(np.mean(errors >= threshold))
    return CounterexampleResult(K, n, tau, replicates, seed, h_star, threshold, rate, errors)


def design_preset(name: str, **overrides) -> SimDesign:
    """Named presets matching the headline experiment grids."""
    presets: dict[str, dict] = {
        "table1": dict(family="linear"),
        "table2": dict(family="linear", bias_scale=0.0),
        "table3": dict(family="logistic", n_star=500),
        "table4": dict(family="logistic", n_star=500, bias_scale=0.0),
        "table5": dict(family="mr", d=1, K=MR_INSTRUMENTS, weighting="invcov"),
    }
    if name not in presets:
        raise InvalidDesignError(
            f"unknown design {name!r}; choose from {sorted(presets)} or 'counterexample'"
        )
    cfg = presets[name] | overrides
    return SimDesign(**cfg)


def metrics_rows(report: SimReport) -> list[dict]:
    d = report.design
    rows = []
    for m in report.metrics:
        rows.append(
            {
                "family": d.family,
                "d": d.d,
                "K": d.K,
                "n_star": d.n_star,
                "bias_scale": d.effective_bias_scale,
                "replicates": d.replicates,
                "seed": d.seed,
                "weighting": d.weighting,
                "lambda_scale": d.penalty.lambda_scale,
                "alpha": d.penalty.alpha,
                "estimator": m.estimator,
                "nb": m.nb,
                "sse": m.sse,
                "selection_rate": "" if m.selection_rate is None else m.selection_rate,
                "equiv_dist": "" if m.equiv_dist is None else m.equiv_dist,
                "failures": report.failures,
            }
        )
    return rows


def write_metrics_csv(path, reports) -> None:
    rows = [row for rep in reports for row in metrics_rows(rep)]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def format_report(report: SimReport) -> str:
    d = report.design
    head = (
        f"{d.family} design: d={d.d} K={d.K} n*={d.n_star} "
        f"bias_scale={d.effective_bias_scale} reps={report.replicates_used}"
        f" (failures={report.failures})"
    )
    lines = [head, f"{'estimator':<12}{'NB':>12}{'SSE':>12}{'sel.rate':>12}{'equiv':>12}"]
    for m in report.metrics:
        sel = f"{m.selection_rate:.3f}" if m.selection_rate is not None else "-"
        eq = f"{m.equiv_dist:.4f}" if m.equiv_dist is not None else "-"
        lines.append(f"{m.estimator:<12}{m.nb:>12.4f}{m.sse:>12.4f}{sel:>12}{eq:>12}")
    return "\n".join(lines)
