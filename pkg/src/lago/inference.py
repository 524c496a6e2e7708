"""Robust covariance, Wald tests, confidence intervals, sets and bands."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg
from scipy import stats

from lago.errors import (
    IndexOutOfRange,
    RankDeficient,
    SingleArm,
    SingularBlock,
    SingularJ,
    ValidationError,
)
from lago.model import (
    ModelFit,
    TrialDataset,
    build_design,
    centre_weights,
    contrast_vector,
)

__all__ = [
    "ConfidenceObject",
    "SandwichCovariance",
    "TestResult",
    "ci_mean",
    "confidence_band",
    "confidence_set",
    "delta_test",
    "intervention_grid",
    "sandwich",
    "sandwich_matrices",
    "wald_individual",
    "wald_joint",
]


@dataclass(frozen=True)
class SandwichCovariance:
    J_star_hat: np.ndarray
    V_hat: np.ndarray
    cov_beta: np.ndarray
    n: int


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float
    kind: Literal["wald_individual", "wald_joint", "delta_randomized"]
    estimate: float | None = None
    se: float | None = None

    def rejects(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


@dataclass(frozen=True)
class ConfidenceObject:
    """Interval, grid confidence set, or grid confidence band.

    For ``interval``: ``lower``/``upper`` are scalars.  For ``set``: ``grid`` is
    the (m, P) array of packages and ``mask`` flags members.  For ``band``:
    ``grid`` plus per-point ``estimate``, ``lower``, ``upper`` and
    ``half_width``.
    """

    kind: Literal["interval", "set", "band"]
    level: float
    estimate: np.ndarray | float | None = None
    lower: np.ndarray | float | None = None
    upper: np.ndarray | float | None = None
    half_width: np.ndarray | float | None = None
    grid: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def set_fraction(self) -> float:
        if self.mask is None:
            raise ValidationError("set_fraction is defined for confidence sets only")
        return float(self.mask.mean())

    @property
    def set_percent(self) -> float:
        return 100.0 * self.set_fraction

    def contains(self, value) -> bool:
        if self.kind == "interval":
            return bool(self.lower <= value <= self.upper)
        value = np.asarray(value, dtype=float)
        return bool(np.all((self.lower <= value) & (value <= self.upper)))


def sandwich_matrices(
    X: np.ndarray,
    residuals: np.ndarray,
    *,
    centre: np.ndarray | None = None,
    variance: str = "hc0",
) -> SandwichCovariance:
    """``n^-1 Jhat^-1 Vhat Jhat^-T`` with ``Jhat = X'X/n``.

    ``variance="hc0"`` uses each observation's squared residual in ``Vhat``;
    ``"centre_pooled"`` replaces it with the mean squared residual of the
    observation's centre.
    """
    n = X.shape[0]
    jhat = X.T @ X / n
    e2 = np.asarray(residuals, dtype=float) ** 2
    if variance == "centre_pooled":
        if centre is None:
            raise ValidationError("centre_pooled variance needs centre labels")
        idx = np.asarray(centre) - 1
        sums = np.bincount(idx, weights=e2)
        counts = np.bincount(idx)
        e2 = (sums / np.maximum(counts, 1))[idx]
    elif variance != "hc0":
        raise ValidationError(f"unknown variance option {variance!r}")
    vhat = (X * e2[:, None]).T @ X / n
    try:
        factor = scipy.linalg.cho_factor(jhat, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularJ(f"Jhat is singular: {exc}") from exc
    jinv_v = scipy.linalg.cho_solve(factor, vhat)
    cov = scipy.linalg.cho_solve(factor, jinv_v.T).T / n
    cov = 0.5 * (cov + cov.T)
    return SandwichCovariance(J_star_hat=jhat, V_hat=vhat, cov_beta=cov, n=n)


def sandwich(fit: ModelFit, dataset: TrialDataset, *, variance: str = "hc0") -> SandwichCovariance:
    X, y = build_design(dataset)
    if X.shape[1] != fit.coef.size:
        raise ValidationError("fit and dataset have different designs")
    resid = y - X @ fit.coef
    return sandwich_matrices(X, resid, centre=dataset.centre, variance=variance)


def _cov_matrix(fit: ModelFit, cov) -> np.ndarray:
    if cov is None:
        return fit.covariance
    return getattr(cov, "cov_beta", cov)


def _two_sided_normal(z: float) -> float:
    return float(2.0 * stats.norm.sf(abs(z)))


def wald_individual(fit: ModelFit, cov=None, component_index: int = 1) -> TestResult:
    """Test ``beta_p = 0`` with ``beta_p / SE``; ``component_index`` is 1-based."""
    if not 1 <= component_index <= fit.P:
        raise IndexOutOfRange(f"component index must be in 1..{fit.P}")
    p = component_index - 1
    sigma = _cov_matrix(fit, cov)
    est = float(fit.beta_A[p])
    se = float(np.sqrt(max(sigma[p, p], 0.0)))
    if se == 0.0:
        z = 0.0 if est == 0.0 else np.copysign(np.inf, est)
    else:
        z = est / se
    return TestResult(z, 1, _two_sided_normal(z), "wald_individual", est, se)


def wald_joint(fit: ModelFit, cov=None) -> TestResult:
    """Test ``beta_A = 0`` against chi-squared with P degrees of freedom."""
    sigma = _cov_matrix(fit, cov)[: fit.P, : fit.P]
    b = fit.beta_A
    if not np.any(b):
        return TestResult(0.0, fit.P, 1.0, "wald_joint")
    try:
        factor = scipy.linalg.cho_factor(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularBlock("covariance block of the components is not invertible") from exc
    stat = float(b @ scipy.linalg.cho_solve(factor, b))
    return TestResult(stat, fit.P, float(stats.chi2.sf(stat, fit.P)), "wald_joint")


def delta_test(dataset: TrialDataset, *, variance: str = "hc0") -> TestResult:
    """Randomised-comparison test of ``delta = 0`` in ``y = delta R + gamma_j + eta_k``.

    The arm indicator replaces the component columns; inference uses the
    same robust covariance.
    """
    from lago.model import fit as fit_model

    if np.unique(dataset.arm).size < 2:
        raise SingleArm("both intervention and control records are required")
    arm_only = TrialDataset(
        dataset.stage, dataset.centre, dataset.arm,
        dataset.arm.reshape(-1, 1).astype(float), dataset.outcome,
        K=dataset.K, J=dataset.J, P=1, centres_declared=dataset.centres_declared,
    )
    res = fit_model(arm_only, variance=variance)
    z_test = wald_individual(res, None, 1)
    return TestResult(
        z_test.statistic, 1, z_test.p_value, "delta_randomized", z_test.estimate, z_test.se
    )


def _contrast_matrix(fit: ModelFit, xs: np.ndarray, weights, include_eta: bool) -> np.ndarray:
    base = contrast_vector(fit, xs[0], weights, include_eta=include_eta)
    C = np.repeat(base[None, :], xs.shape[0], axis=0)
    C[:, : fit.P] = xs
    return C


def _mean_and_var(fit, cov, xs, weights, include_eta=True):
    sigma = _cov_matrix(fit, cov)
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    C = _contrast_matrix(fit, xs, weights, include_eta)
    est = C @ fit.coef
    var = np.einsum("ij,jk,ik->i", C, sigma, C)
    return est, np.clip(var, 0.0, None)


def ci_mean(fit: ModelFit, cov=None, x=None, weights=None, level: float = 0.95,
            *, include_eta: bool = True) -> ConfidenceObject:
    """Pointwise interval for the weighted mean outcome under package ``x``."""
    est, var = _mean_and_var(fit, cov, [np.asarray(getattr(x, "components", x))], weights, include_eta)
    z = stats.norm.ppf(0.5 + level / 2.0)
    hw = float(z * np.sqrt(var[0]))
    e = float(est[0])
    return ConfidenceObject("interval", level, e, e - hw, e + hw, hw)


def intervention_grid(bounds, resolution: float = 0.05) -> np.ndarray:
    """Regular grid over the box, including both end points of every side."""
    if resolution <= 0:
        raise ValidationError("grid resolution must be positive")
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    axes = []
    for lo, hi in bounds:
        steps = int(np.floor((hi - lo) / resolution + 1e-9))
        axis = lo + resolution * np.arange(steps + 1)
        if hi - axis[-1] > 1e-9:
            axis = np.append(axis, hi)
        axes.append(axis)
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def confidence_set(fit: ModelFit, cov=None, problem=None, grid_resolution: float = 0.05,
                   *, level: float = 0.95, grid: np.ndarray | None = None,
                   include_eta: bool = True) -> ConfidenceObject:
    """Grid packages whose mean-outcome interval contains the goal."""
    if grid is None:
        grid = intervention_grid(problem.bounds, grid_resolution)
    weights = problem.weights if problem.weights is not None else centre_weights(fit)
    est, var = _mean_and_var(fit, cov, grid, weights, include_eta)
    z = stats.norm.ppf(0.5 + level / 2.0)
    hw = z * np.sqrt(var)
    lower, upper = est - hw, est + hw
    mask = (lower <= problem.goal) & (problem.goal <= upper)
    return ConfidenceObject("set", level, est, lower, upper, hw, grid, mask)


def confidence_band(fit: ModelFit, cov=None, weights=None, grid: np.ndarray | None = None,
                    level: float = 0.95, *, include_eta: bool = True) -> ConfidenceObject:
    """Simultaneous band using the chi-squared quantile with dim(beta) df."""
    if fit.P < 1:
        raise ValidationError("a band needs at least one intervention component")
    if weights is None:
        weights = centre_weights(fit)
    est, var = _mean_and_var(fit, cov, grid, weights, include_eta)
    df = fit.coef.size
    hw = np.sqrt(stats.chi2.ppf(level, df) * var)
    return ConfidenceObject("band", level, est, est - hw, est + hw, hw, np.atleast_2d(grid))


def pointwise_half_width(fit: ModelFit, cov, grid, weights=None, level: float = 0.95,
                         *, include_eta: bool = True) -> np.ndarray:
    _, var = _mean_and_var(fit, cov, grid, weights if weights is not None else centre_weights(fit), include_eta)
    return stats.norm.ppf(0.5 + level / 2.0) * np.sqrt(var)
