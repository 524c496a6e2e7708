"""Fixed centre-effects outcome model: domain types, design matrix and estimator.

The mean outcome of a participant in centre ``j`` and stage ``k`` who actually
received package ``a`` is

    beta_A' a + gamma_j + eta_k        (eta_1 = 0, stage 1 is the reference)

so the regressor row is ``[a_1..a_P, 1[j=1]..1[j=J], 1[k=2]..1[k=K]]``.  There is
no global intercept; the centre indicators span it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.linalg

from lago.errors import (
    EmptyDataset,
    NonContiguousCentres,
    RankDeficient,
    ValidationError,
    WeightDimensionMismatch,
)

__all__ = [
    "CONDITION_LIMIT",
    "InterventionPackage",
    "ModelFit",
    "TrialDataset",
    "TrialRecord",
    "build_design",
    "centre_weights",
    "contrast_vector",
    "fit",
    "predict_mean",
]

CONDITION_LIMIT = 1e10


@dataclass(frozen=True)
class InterventionPackage:
    """A vector of component intensities together with its box bounds."""

    components: np.ndarray
    bounds: np.ndarray  # shape (P, 2): rows are (lower, upper)

    def __post_init__(self):
        comps = np.atleast_1d(np.asarray(self.components, dtype=float))
        bnds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        if comps.ndim != 1 or comps.size < 1:
            raise ValidationError("an intervention package needs at least one component")
        if bnds.shape[0] != comps.size:
            raise ValidationError(
                f"{comps.size} components but {bnds.shape[0]} bound pairs"
            )
        if np.any(bnds[:, 0] > bnds[:, 1]):
            raise ValidationError("every lower bound must be <= its upper bound")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "bounds", bnds)

    @property
    def P(self) -> int:
        return self.components.size

    @property
    def lower(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.bounds[:, 1]

    def within_bounds(self, tol: float = 0.0) -> bool:
        return bool(
            np.all(self.components >= self.lower - tol)
            and np.all(self.components <= self.upper + tol)
        )

    def clamped(self) -> "InterventionPackage":
        return InterventionPackage(np.clip(self.components, self.lower, self.upper), self.bounds)


@dataclass(frozen=True)
class TrialRecord:
    stage: int
    centre: int
    arm: int  # 1 = intervention, 0 = control
    actual: tuple[float, ...]
    outcome: float


@dataclass(frozen=True)
class TrialDataset:
    """Participant-level trial data stored column-wise.

    ``stage`` and ``centre`` are 1-based.  ``K``, ``J`` and ``P`` default to the
    values implied by the data; pass them explicitly to declare stages or
    centres that are planned but empty.  Undeclared gaps in the centre labels
    are rejected when the design is built.
    """

    stage: np.ndarray
    centre: np.ndarray
    arm: np.ndarray
    actual: np.ndarray
    outcome: np.ndarray
    K: int = 0
    J: int = 0
    P: int = 0
    centres_declared: bool | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.centres_declared is None:
            object.__setattr__(self, "centres_declared", bool(self.J))
        stage = np.asarray(self.stage, dtype=np.int64).reshape(-1)
        centre = np.asarray(self.centre, dtype=np.int64).reshape(-1)
        arm = np.asarray(self.arm, dtype=np.int64).reshape(-1)
        outcome = np.asarray(self.outcome, dtype=float).reshape(-1)
        n = outcome.size
        actual = np.asarray(self.actual, dtype=float)
        if actual.ndim == 1:
            actual = actual.reshape(n, -1) if n else actual.reshape(0, max(self.P, 1))
        if not (stage.size == centre.size == arm.size == actual.shape[0] == n):
            raise ValidationError("dataset columns have different lengths")
        if n and (stage.min() < 1 or centre.min() < 1):
            raise ValidationError("stage and centre indices are 1-based")
        if n and not np.isin(arm, (0, 1)).all():
            raise ValidationError("arm must be 0 (control) or 1 (intervention)")
        K = self.K or (int(stage.max()) if n else 0)
        J = self.J or (int(centre.max()) if n else 0)
        P = self.P or actual.shape[1]
        if actual.shape[1] != P:
            raise ValidationError(f"actual has {actual.shape[1]} columns, expected P={P}")
        if n and (stage.max() > K or centre.max() > J):
            raise ValidationError("stage/centre index exceeds declared K/J")
        for name, value in (
            ("stage", stage),
            ("centre", centre),
            ("arm", arm),
            ("actual", actual),
            ("outcome", outcome),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "P", P)

    @classmethod
    def from_records(
        cls, records: Iterable[TrialRecord], K: int = 0, J: int = 0, P: int = 0
    ) -> "TrialDataset":
        records = list(records)
        if not records and not P:
            raise EmptyDataset("no records")
        width = P or len(records[0].actual)
        return cls(
            stage=[r.stage for r in records],
            centre=[r.centre for r in records],
            arm=[r.arm for r in records],
            actual=np.array([r.actual for r in records], dtype=float).reshape(-1, width),
            outcome=[r.outcome for r in records],
            K=K,
            J=J,
            P=width,
        )

    @classmethod
    def concat(cls, parts: Sequence["TrialDataset"]) -> "TrialDataset":
        return cls(
            stage=np.concatenate([p.stage for p in parts]),
            centre=np.concatenate([p.centre for p in parts]),
            arm=np.concatenate([p.arm for p in parts]),
            actual=np.vstack([p.actual for p in parts]),
            outcome=np.concatenate([p.outcome for p in parts]),
            K=max(p.K for p in parts),
            J=max(p.J for p in parts),
            P=parts[0].P,
            centres_declared=any(p.centres_declared for p in parts),
        )

    def __len__(self) -> int:
        return self.outcome.size

    @property
    def n(self) -> int:
        return self.outcome.size

    def records(self) -> Iterator[TrialRecord]:
        for i in range(self.n):
            yield TrialRecord(
                int(self.stage[i]),
                int(self.centre[i]),
                int(self.arm[i]),
                tuple(float(v) for v in self.actual[i]),
                float(self.outcome[i]),
            )

    def subset(self, mask: np.ndarray) -> "TrialDataset":
        mask = np.asarray(mask)
        return TrialDataset(
            self.stage[mask], self.centre[mask], self.arm[mask],
            self.actual[mask], self.outcome[mask], K=self.K, J=self.J, P=self.P,
            centres_declared=self.centres_declared,
        )

    def counts(self) -> np.ndarray:
        """J x K matrix of participant counts n_j^(k)."""
        out = np.zeros((self.J, self.K), dtype=np.int64)
        np.add.at(out, (self.centre - 1, self.stage - 1), 1)
        return out

    def single_stage_centres(self) -> list[int]:
        """Centres that contribute to fewer than two stages."""
        return [j + 1 for j, row in enumerate(self.counts()) if np.count_nonzero(row) < 2]

    def control_violations(self) -> np.ndarray:
        """Row indices of control records with a non-zero actual package."""
        bad = (self.arm == 0) & np.any(self.actual != 0.0, axis=1)
        return np.flatnonzero(bad)


@dataclass(frozen=True)
class ModelFit:
    beta_A: np.ndarray
    gamma: np.ndarray
    eta: np.ndarray
    covariance: np.ndarray
    residuals: np.ndarray
    condition_number: float
    n_by_centre_stage: np.ndarray
    column_names: tuple[str, ...] = ()
    design: np.ndarray = field(default=None, repr=False)
    response: np.ndarray = field(default=None, repr=False)

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.beta_A, self.gamma, self.eta])

    @property
    def P(self) -> int:
        return self.beta_A.size

    @property
    def J(self) -> int:
        return self.gamma.size

    @property
    def K(self) -> int:
        return self.eta.size + 1

    @property
    def n(self) -> int:
        return self.residuals.size

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def column_names(P: int, J: int, K: int) -> tuple[str, ...]:
    return (
        tuple(f"a{p + 1}" for p in range(P))
        + tuple(f"centre{j + 1}" for j in range(J))
        + tuple(f"stage{k}" for k in range(2, K + 1))
    )


def build_design(dataset: TrialDataset) -> tuple[np.ndarray, np.ndarray]:
    """Return the regressor matrix and the response vector.

    Column order is ``[components, centre indicators, stage 2..K indicators]``.
    """
    if dataset.n == 0:
        raise EmptyDataset("cannot build a design from an empty dataset")
    present = np.unique(dataset.centre)
    if not dataset.centres_declared and present.size != dataset.J:
        missing = sorted(set(range(1, dataset.J + 1)) - set(present.tolist()))
        raise NonContiguousCentres(f"centres must be 1..{dataset.J}; missing {missing}")

    n, P, J, K = dataset.n, dataset.P, dataset.J, dataset.K
    X = np.zeros((n, P + J + K - 1))
    X[:, :P] = dataset.actual
    rows = np.arange(n)
    X[rows, P + dataset.centre - 1] = 1.0
    later = dataset.stage >= 2
    X[rows[later], P + J + dataset.stage[later] - 2] = 1.0
    return X, dataset.outcome.astype(float, copy=True)


def _collinear_columns(xtx: np.ndarray, names: Sequence[str]) -> list[str]:
    zero = [names[i] for i in np.flatnonzero(np.diag(xtx) == 0.0)]
    if zero:
        return zero
    scale = np.sqrt(np.diag(xtx))
    _, s, vt = np.linalg.svd(xtx / np.outer(scale, scale))
    null = vt[-1]
    return [names[i] for i in np.flatnonzero(np.abs(null) > 1e-3 * np.abs(null).max())]


def fit(dataset: TrialDataset, *, variance: str = "hc0") -> ModelFit:
    """Solve the estimating equations ``X'(y - X beta) = 0``.

    The normal equations are solved by a Cholesky factorisation.  A condition
    number of ``X'X`` above ``CONDITION_LIMIT`` raises ``RankDeficient``; this
    typically means a centre contributes a single intervention pattern or a
    component never varies.  The robust covariance is attached (see
    ``lago.inference.sandwich``).
    """
    from lago import inference

    X, y = build_design(dataset)
    names = column_names(dataset.P, dataset.J, dataset.K)
    xtx = X.T @ X
    diag = np.diag(xtx)
    if np.any(diag == 0.0):
        raise RankDeficient("design has all-zero columns", _collinear_columns(xtx, names))
    cond = float(np.linalg.cond(xtx))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise RankDeficient(
            f"X'X condition number {cond:.3g} exceeds {CONDITION_LIMIT:.0e}",
            _collinear_columns(xtx, names),
        )
    try:
        factor = scipy.linalg.cho_factor(xtx, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(str(exc), _collinear_columns(xtx, names)) from exc
    beta = scipy.linalg.cho_solve(factor, X.T @ y)
    # One step of iterative refinement keeps the normal-equation residual tiny.
    beta = beta + scipy.linalg.cho_solve(factor, X.T @ (y - X @ beta))
    resid = y - X @ beta

    P, J = dataset.P, dataset.J
    cov = inference.sandwich_matrices(
        X, resid, centre=dataset.centre, variance=variance
    ).cov_beta
    for arr in (beta, resid, cov, X, y):
        arr.setflags(write=False)
    counts = dataset.counts()
    counts.setflags(write=False)
    return ModelFit(
        beta_A=beta[:P],
        gamma=beta[P : P + J],
        eta=beta[P + J :],
        covariance=cov,
        residuals=resid,
        condition_number=cond,
        n_by_centre_stage=counts,
        column_names=names,
        design=X,
        response=y,
    )


def centre_weights(fit_or_counts, mode: str = "from_data") -> np.ndarray:
    """Centre weights ``w_j``: share of all participants (``from_data``) or ``equal``."""
    counts = (
        fit_or_counts.n_by_centre_stage
        if isinstance(fit_or_counts, ModelFit)
        else np.asarray(fit_or_counts)
    )
    counts = np.atleast_2d(counts)
    if mode == "equal":
        return np.full(counts.shape[0], 1.0 / counts.shape[0])
    if mode != "from_data":
        raise ValidationError(f"unknown weight mode {mode!r}")
    per_centre = counts.sum(axis=1).astype(float)
    return per_centre / per_centre.sum()


def _check_weights(weights, J: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size != J:
        raise WeightDimensionMismatch(f"expected {J} centre weights, got {w.size}")
    if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-9):
        raise ValidationError("centre weights must be nonnegative and sum to 1")
    return w


def contrast_vector(
    fit: ModelFit, x, weights=None, *, include_eta: bool = True
) -> np.ndarray:
    """Row vector ``c`` with ``c @ coef`` the weighted mean outcome under ``x``.

    With ``include_eta`` the final stage's indicator gets weight one, matching
    a trailing ``1`` for the stage-2 indicator when ``K == 2``.
    """
    x = np.asarray(getattr(x, "components", x), dtype=float).reshape(-1)
    if x.size != fit.P:
        raise ValidationError(f"package has {x.size} components, model has {fit.P}")
    w = centre_weights(fit) if weights is None else _check_weights(weights, fit.J)
    stage = np.zeros(fit.eta.size)
    if include_eta and stage.size:
        stage[-1] = 1.0
    return np.concatenate([x, w, stage])


def predict_mean(
    fit: ModelFit, x, weights=None, *, include_eta: bool = False
) -> float:
    """Weighted mean outcome ``beta_A'x + sum_j w_j gamma_j (+ eta_K)``."""
    return float(contrast_vector(fit, x, weights, include_eta=include_eta) @ fit.coef)
