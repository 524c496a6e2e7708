"""Cost functions and the cost-minimising search for the optimal package.

The goal constraint is linear in the package:

    beta_A' x + sum_j w_j gamma_j (+ eta_K)   >= theta   (direction "at_least")
                                              <= theta   (direction "at_most")

Linear costs are solved exactly by allocating to components in increasing
cost per unit of effect.  Polynomial costs use a grid-seeded multi-start
local search.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np
from scipy import optimize as sopt

from lago.errors import Infeasible, InvalidDirection, ValidationError
from lago.model import InterventionPackage, ModelFit, centre_weights

__all__ = [
    "CUBIC_COST",
    "CUBIC_COST_EXTRA_CVD",
    "LINEAR_COST",
    "CostFunction",
    "OptimizationProblem",
    "Recommendation",
    "evaluate_cost",
    "grid_oracle",
    "optimize",
    "recommend_next_stage",
]

FEASIBILITY_TOL = 1e-9
COST_TIE_TOL = 1e-9


@dataclass(frozen=True)
class CostFunction:
    """Separable polynomial cost with no constant term.

    ``kind="linear"`` uses ``coefficients``; ``kind="polynomial"`` uses
    ``terms[p] = ((power, coef), ...)`` for component ``p``.
    """

    kind: Literal["linear", "polynomial"]
    coefficients: tuple[float, ...] = ()
    terms: tuple[tuple[tuple[int, float], ...], ...] = ()

    def __post_init__(self):
        if self.kind == "linear":
            coefs = tuple(float(c) for c in self.coefficients)
            if not coefs or any(c < 0 for c in coefs):
                raise ValidationError("linear cost needs nonnegative coefficients")
            object.__setattr__(self, "coefficients", coefs)
        elif self.kind == "polynomial":
            terms = tuple(
                tuple((int(pw), float(c)) for pw, c in comp) for comp in self.terms
            )
            if not terms:
                raise ValidationError("polynomial cost needs terms for every component")
            if any(pw < 1 for comp in terms for pw, _ in comp):
                raise ValidationError("polynomial cost powers must be >= 1")
            object.__setattr__(self, "terms", terms)
        else:
            raise ValidationError(f"unknown cost kind {self.kind!r}")

    @classmethod
    def linear(cls, coefficients: Sequence[float]) -> "CostFunction":
        return cls("linear", tuple(coefficients))

    @classmethod
    def polynomial(cls, terms) -> "CostFunction":
        return cls("polynomial", terms=tuple(tuple(map(tuple, comp)) for comp in terms))

    @property
    def P(self) -> int:
        return len(self.coefficients) if self.kind == "linear" else len(self.terms)

    def __call__(self, x) -> np.ndarray | float:
        return evaluate_cost(self, x)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return np.broadcast_to(np.asarray(self.coefficients), x.shape).copy()
        out = np.zeros_like(x)
        for p, comp in enumerate(self.terms):
            for power, coef in comp:
                out[..., p] += coef * power * x[..., p] ** (power - 1)
        return out

    def to_dict(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear", "coefficients": list(self.coefficients)}
        return {"kind": "polynomial", "terms": [[list(t) for t in comp] for comp in self.terms]}


LINEAR_COST = CostFunction.linear((1.0, 0.5))
CUBIC_COST = CostFunction.polynomial(
    [[(1, 1.25), (3, -0.04), (4, 0.0055)], [(1, 0.63), (3, -0.09), (4, 0.026)]]
)
CUBIC_COST_EXTRA_CVD = CostFunction.polynomial(
    [[(1, 1.25), (3, -0.043), (4, 0.0055)], [(1, 0.63), (3, -0.09), (4, 0.026)]]
)


def evaluate_cost(cost: CostFunction, x):
    """Cost of one package (1-d input) or of each row of a 2-d array."""
    x = np.asarray(getattr(x, "components", x), dtype=float)
    if x.shape[-1] != cost.P:
        raise ValidationError(f"cost has {cost.P} components, package has {x.shape[-1]}")
    if cost.kind == "linear":
        out = x @ np.asarray(cost.coefficients)
    else:
        out = np.zeros(x.shape[:-1])
        for p, comp in enumerate(cost.terms):
            xp = x[..., p]
            for power, coef in comp:
                out = out + coef * xp**power
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class OptimizationProblem:
    cost: CostFunction
    goal: float
    direction: Literal["at_least", "at_most"]
    bounds: np.ndarray
    beta_A: np.ndarray
    gamma: np.ndarray = None
    eta: np.ndarray = None
    weights: np.ndarray | None = None
    include_eta: bool = False
    lower_bound_policy: Literal["none", "previous_recommendation"] = "none"

    def __post_init__(self):
        if self.direction not in ("at_least", "at_most"):
            raise InvalidDirection(f"direction must be at_least or at_most, got {self.direction!r}")
        if self.lower_bound_policy not in ("none", "previous_recommendation"):
            raise ValidationError(f"unknown lower_bound_policy {self.lower_bound_policy!r}")
        bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        beta = np.asarray(self.beta_A, dtype=float).reshape(-1)
        if bounds.shape[0] != beta.size or self.cost.P != beta.size:
            raise ValidationError("cost, bounds and beta_A must all have P components")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ValidationError("empty box: a lower bound exceeds its upper bound")
        gamma = np.zeros(0) if self.gamma is None else np.asarray(self.gamma, dtype=float).reshape(-1)
        eta = np.zeros(0) if self.eta is None else np.asarray(self.eta, dtype=float).reshape(-1)
        weights = self.weights
        if weights is not None:
            weights = np.asarray(weights, dtype=float).reshape(-1)
            if weights.size != gamma.size:
                raise ValidationError(f"{weights.size} weights for {gamma.size} centre effects")
        elif gamma.size:
            weights = np.full(gamma.size, 1.0 / gamma.size)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "beta_A", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_fit(cls, fit: ModelFit, cost, goal, direction, bounds, *, weights=None,
                 include_eta=False, lower_bound_policy="none") -> "OptimizationProblem":
        if weights is None or isinstance(weights, str):
            weights = centre_weights(fit, weights or "from_data")
        return cls(cost, goal, direction, bounds, fit.beta_A, fit.gamma, fit.eta,
                   weights, include_eta, lower_bound_policy)

    @property
    def P(self) -> int:
        return self.beta_A.size

    @property
    def offset(self) -> float:
        """Weighted centre effect plus the final-stage effect when included."""
        off = float(self.weights @ self.gamma) if self.gamma.size else 0.0
        if self.include_eta and self.eta.size:
            off += float(self.eta[-1])
        return off

    def mean(self, x) -> np.ndarray | float:
        x = np.asarray(getattr(x, "components", x), dtype=float)
        out = x @ self.beta_A + self.offset
        return float(out) if np.ndim(out) == 0 else out

    def _signed(self) -> tuple[np.ndarray, float]:
        # Normalise to g'x >= b.
        s = 1.0 if self.direction == "at_least" else -1.0
        return s * self.beta_A, s * (self.goal - self.offset)

    def satisfied(self, x, tol: float = FEASIBILITY_TOL):
        g, b = self._signed()
        x = np.asarray(getattr(x, "components", x), dtype=float)
        return x @ g >= b - tol

    def with_bounds(self, bounds) -> "OptimizationProblem":
        return replace(self, bounds=np.asarray(bounds, dtype=float))


@dataclass(frozen=True)
class Recommendation:
    x: InterventionPackage
    feasible: bool
    cost: float
    achieved_mean: float
    shrunk_to_previous: bool = False

    @property
    def components(self) -> np.ndarray:
        return self.x.components


def _recommendation(problem: OptimizationProblem, x: np.ndarray, shrunk=False) -> Recommendation:
    x = np.clip(x, problem.bounds[:, 0], problem.bounds[:, 1])
    return Recommendation(
        InterventionPackage(x, problem.bounds),
        bool(problem.satisfied(x)),
        float(evaluate_cost(problem.cost, x)),
        float(problem.mean(x)),
        shrunk,
    )


def _check_reachable(problem: OptimizationProblem) -> None:
    g, b = problem._signed()
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    best = np.where(g > 0, hi, lo)
    if best @ g < b - FEASIBILITY_TOL:
        raise Infeasible(
            f"goal {problem.goal} ({problem.direction}) unreachable in the box; "
            f"best attainable mean {problem.mean(best):.6g}",
            best_mean=float(problem.mean(best)),
        )


def _lexicographic_best(cands: list[np.ndarray], costs: list[float]) -> np.ndarray:
    best_cost = min(costs)
    tied = [c for c, v in zip(cands, costs) if v <= best_cost + COST_TIE_TOL]
    return min(tied, key=lambda v: tuple(np.round(v, 12)))


def _optimize_linear(problem: OptimizationProblem) -> np.ndarray:
    g, b = problem._signed()
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    x = lo.copy()
    need = b - g @ x
    if need <= 0:
        return x
    coefs = np.asarray(problem.cost.coefficients)
    useful = [p for p in range(problem.P) if g[p] > 0 and hi[p] > lo[p]]
    # Equal cost-effectiveness: fill later components first so x is lexicographically smallest.
    useful.sort(key=lambda p: (coefs[p] / g[p], -p))
    for p in useful:
        step = min(hi[p] - lo[p], need / g[p])
        x[p] += step
        need -= g[p] * step
        if need <= 0:
            break
    if need > 0:
        # Round-off: top up the last component used, if it has room.
        for p in useful:
            room = hi[p] - x[p]
            if room > 0:
                x[p] += min(room, need / g[p])
                break
    return x


def _grid_axes(bounds: np.ndarray, resolution: float, max_points: int) -> list[np.ndarray]:
    res = resolution
    while True:
        axes = [np.linspace(lo, hi, int(round((hi - lo) / res)) + 1) if hi > lo else np.array([lo])
                for lo, hi in bounds]
        if np.prod([a.size for a in axes]) <= max_points:
            return axes
        res *= 1.5


def _polish_feasible(problem: OptimizationProblem, x: np.ndarray) -> np.ndarray:
    g, b = problem._signed()
    lo, hi = problem.bounds[:, 0], problem.bounds[:, 1]
    x = np.clip(x, lo, hi)
    deficit = b - g @ x
    if deficit > 0:
        for p in np.argsort(-g):
            if g[p] <= 0:
                break
            step = min(hi[p] - x[p], deficit / g[p] * (1 + 1e-12) + 1e-15)
            x[p] += step
            deficit = b - g @ x
            if deficit <= 0:
                break
    return x


def _optimize_polynomial(problem: OptimizationProblem, resolution: float,
                         n_starts: int, max_grid_points: int) -> np.ndarray:
    g, b = problem._signed()
    bounds = problem.bounds
    axes = _grid_axes(bounds, resolution, max_grid_points)
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.column_stack([m.ravel() for m in mesh])
    feasible = grid @ g >= b - FEASIBILITY_TOL
    costs = evaluate_cost(problem.cost, grid)

    starts: list[np.ndarray] = []
    if feasible.any():
        order = np.flatnonzero(feasible)[np.argsort(costs[feasible], kind="stable")]
        spacing = 5.0 * max(max((a[1] - a[0]) if a.size > 1 else 0.0 for a in axes), 1e-12)
        for idx in order:
            pt = grid[idx]
            if all(np.max(np.abs(pt - s)) > spacing for s in starts):
                starts.append(pt)
            if len(starts) >= n_starts:
                break
    else:
        starts.append(np.where(g > 0, bounds[:, 1], bounds[:, 0]))

    cands, cand_costs = [], []
    for s in starts:
        cands.append(_polish_feasible(problem, s.copy()))
        res = sopt.minimize(
            lambda v: evaluate_cost(problem.cost, v),
            s,
            jac=problem.cost.gradient,
            method="SLSQP",
            bounds=[tuple(bd) for bd in bounds],
            constraints=[{"type": "ineq", "fun": lambda v: v @ g - b, "jac": lambda v: g}],
            options={"ftol": 1e-14, "maxiter": 500},
        )
        cands.append(_polish_feasible(problem, np.asarray(res.x, dtype=float)))
    cands = [c for c in cands if problem.satisfied(c)]
    cand_costs = [float(evaluate_cost(problem.cost, c)) for c in cands]
    return _lexicographic_best(cands, cand_costs)


def optimize(problem: OptimizationProblem, *, grid_resolution: float = 0.01,
             n_starts: int = 5, max_grid_points: int = 2_000_000) -> Recommendation:
    """Cheapest package in the box that meets the outcome goal.

    Raises ``Infeasible`` when no package in the box meets the goal.
    """
    _check_reachable(problem)
    if problem.cost.kind == "linear":
        x = _optimize_linear(problem)
    else:
        x = _optimize_polynomial(problem, grid_resolution, n_starts, max_grid_points)
    return _recommendation(problem, x)


def grid_oracle(problem: OptimizationProblem, resolution: float = 0.005) -> tuple[np.ndarray, float]:
    """Exhaustive search over a regular grid; returns ``(x, cost)`` of the best point."""
    axes = [np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1) for lo, hi in problem.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.column_stack([m.ravel() for m in mesh])
    ok = problem.satisfied(grid)
    if not ok.any():
        raise Infeasible("no grid point meets the goal")
    costs = evaluate_cost(problem.cost, grid[ok])
    i = int(np.argmin(costs))
    return grid[ok][i], float(costs[i])


def recommend_next_stage(fit: ModelFit, cov, problem: OptimizationProblem,
                         previous: Recommendation | InterventionPackage | Sequence[float],
                         policy: str | None = None, **optimize_kwargs) -> Recommendation:
    """Recommendation for the next stage from the current fit.

    The stage effect is left out because the next stage has not been observed.
    With ``policy="previous_recommendation"`` each lower bound is raised to the
    previous package.  If the goal is unreachable, the previous package is kept
    and ``shrunk_to_previous`` is set.
    """
    policy = policy or problem.lower_bound_policy
    prev = np.asarray(getattr(previous, "components", previous), dtype=float).reshape(-1)
    weights = problem.weights if problem.weights is not None and problem.weights.size == fit.J else None
    current = OptimizationProblem.from_fit(
        fit, problem.cost, problem.goal, problem.direction, problem.bounds,
        weights=weights, include_eta=False, lower_bound_policy=policy,
    )
    if policy == "previous_recommendation":
        bounds = current.bounds.copy()
        bounds[:, 0] = np.minimum(np.maximum(bounds[:, 0], prev), bounds[:, 1])
        current = current.with_bounds(bounds)
    try:
        return optimize(current, **optimize_kwargs)
    except Infeasible:
        return _recommendation(current, prev.copy(), shrunk=True)
