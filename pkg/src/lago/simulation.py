"""Monte-Carlo harness for multi-stage LAGO trials with centre-level confounding.

Data for centre ``j`` in stage ``k`` (intervention arm):

    A = x + eta * Z_j + eta_centre[j] + xi_sd * xi,     xi ~ N(0, 1)
    Y = beta' A + beta_z * Z_j + gamma_offset[j] + stage_effect[k] + noise_sd * eps

Control participants have ``A = 0``.  Every replicate draws from Philox
streams keyed by ``(seed, replicate, stage, purpose)``, so replicates can be
run in any order or in parallel with identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

from lago import inference
from lago.errors import ConfigError, Infeasible, NumericalError, RhoOutOfRange
from lago.model import InterventionPackage, ModelFit, TrialDataset, fit
from lago.optimizer import (
    CostFunction,
    OptimizationProblem,
    Recommendation,
    evaluate_cost,
    optimize,
    recommend_next_stage,
)

__all__ = [
    "REFERENCE_Z_VALUES",
    "ReplicateMetrics",
    "ScenarioConfig",
    "aggregate",
    "eta_from_rho",
    "run_replicate",
    "run_scenario",
    "simulate_stage",
    "simulate_trial",
    "stream",
]

# Centre characteristics used for the fixed-Z simulation family.
REFERENCE_Z_VALUES = (
    -1.238, -0.456, -0.830, 0.340, 1.066, 1.216, 0.736, -0.481, 0.563, -1.246,
    0.381, -1.430, -1.048, -0.219, -1.490, 1.173, -1.480, -0.430, -1.052, 1.523,
)

_PURPOSES = {"centres": 0, "stage_data": 1}


def eta_from_rho(rho: float) -> float:
    """Confounding slope giving ``corr(A, Z) = rho`` when ``Z`` and ``xi`` are N(0, 1)."""
    rho = float(rho)
    if not -1.0 < rho < 1.0:
        raise RhoOutOfRange(f"rho must lie in (-1, 1), got {rho}")
    return rho / math.sqrt(1.0 - rho * rho)


def stream(seed: int, replicate: int, stage: int, purpose: str) -> np.random.Generator:
    """Counter-based generator for one (replicate, stage, purpose) cell."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replicate), int(stage), _PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(ss))


def _parse_ratio(value) -> float:
    if isinstance(value, str) and ":" in value:
        a, b = (float(v) for v in value.split(":"))
        return a / (a + b)
    return float(value)


@dataclass(frozen=True)
class ScenarioConfig:
    J: int
    n_by_centre_stage: np.ndarray
    beta_true: np.ndarray
    x_stage1: np.ndarray
    bounds: np.ndarray
    cost: CostFunction
    goal: float
    direction: str = "at_most"
    K: int = 2
    P: int = 0
    beta_z: float = 0.0
    rho_targets: np.ndarray | None = None
    centre_Z_mode: str = "redraw_each_replicate"
    Z_values: np.ndarray | None = None
    lower_bound_policy: str = "none"
    noise_sd: float = 1.0
    arm_ratio: float = 0.5
    replicates: int = 100
    seed: int = 0
    use_lago: bool = True
    # Extensions beyond the basic protocol.
    name: str = "scenario"
    gamma_offset: np.ndarray | None = None
    eta_centre: np.ndarray | None = None
    stage_effects: np.ndarray | None = None
    xi_sd: np.ndarray | None = None
    weights: str = "planned"
    grid_resolution: float = 0.05
    optimizer_resolution: float = 0.01
    level: float = 0.95
    final_include_eta: bool = True
    reference_xopt: np.ndarray | None = None
    compute_sets: bool = True

    def __post_init__(self):
        def arr(key, value, shape=None, dtype=float):
            try:
                out = np.asarray(value, dtype=dtype)
                if shape is not None:
                    out = out.reshape(shape)
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, f"cannot interpret {value!r}: {exc}") from exc
            return out

        J, K = int(self.J), int(self.K)
        if J < 1:
            raise ConfigError("J", "need at least one centre")
        if K < 1:
            raise ConfigError("K", "need at least one stage")
        beta = arr("beta_true", self.beta_true).reshape(-1)
        P = int(self.P) or beta.size
        if beta.size != P:
            raise ConfigError("beta_true", f"expected {P} entries")
        n = arr("n_by_centre_stage", self.n_by_centre_stage, dtype=np.int64)
        if n.ndim == 1 and n.size == K:
            n = np.tile(n, (J, 1))
        if n.shape != (J, K):
            raise ConfigError("n_by_centre_stage", f"expected a {J}x{K} matrix or {K} per-stage sizes")
        if np.any(n < 0):
            raise ConfigError("n_by_centre_stage", "sizes must be nonnegative")
        rho = np.zeros(P) if self.rho_targets is None else arr("rho_targets", self.rho_targets).reshape(-1)
        if rho.size != P:
            raise ConfigError("rho_targets", f"expected {P} entries")
        if np.any(np.abs(rho) >= 1):
            raise ConfigError("rho_targets", "every target correlation must lie in (-1, 1)")
        if self.centre_Z_mode not in ("fixed_list", "redraw_each_replicate"):
            raise ConfigError("centre_Z_mode", "must be fixed_list or redraw_each_replicate")
        z = None
        if self.Z_values is not None:
            z = arr("Z_values", self.Z_values).reshape(-1)
        elif self.centre_Z_mode == "fixed_list":
            if J > len(REFERENCE_Z_VALUES):
                raise ConfigError("Z_values", f"fixed_list needs Z_values when J > {len(REFERENCE_Z_VALUES)}")
            z = np.asarray(REFERENCE_Z_VALUES[:J])
        if z is not None and z.size < J:
            raise ConfigError("Z_values", f"need at least {J} values")
        bounds = arr("bounds", self.bounds, (-1, 2))
        if bounds.shape[0] != P or np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigError("bounds", f"need {P} (lower, upper) pairs with lower <= upper")
        x1 = arr("x_stage1", self.x_stage1).reshape(-1)
        if x1.size != P:
            raise ConfigError("x_stage1", f"expected {P} entries")
        if self.cost.P != P:
            raise ConfigError("cost", f"cost has {self.cost.P} components, expected {P}")
        if self.direction not in ("at_least", "at_most"):
            raise ConfigError("direction", "must be at_least or at_most")
        if self.lower_bound_policy not in ("none", "previous_recommendation"):
            raise ConfigError("lower_bound_policy", "must be none or previous_recommendation")
        if int(self.replicates) < 1:
            raise ConfigError("replicates", "must be >= 1")
        if float(self.noise_sd) < 0:
            raise ConfigError("noise_sd", "must be nonnegative")
        ratio = _parse_ratio(self.arm_ratio)
        if not 0.0 < ratio <= 1.0:
            raise ConfigError("arm_ratio", "intervention fraction must lie in (0, 1]")
        if self.weights not in ("planned", "equal"):
            raise ConfigError("weights", "must be planned or equal")
        gamma_off = np.zeros(J) if self.gamma_offset is None else arr("gamma_offset", self.gamma_offset).reshape(-1)
        if gamma_off.size != J:
            raise ConfigError("gamma_offset", f"expected {J} entries")
        eta_c = np.zeros((J, P)) if self.eta_centre is None else arr("eta_centre", self.eta_centre, (J, P))
        stage_eff = np.zeros(K) if self.stage_effects is None else arr("stage_effects", self.stage_effects).reshape(-1)
        if stage_eff.size == K - 1:
            stage_eff = np.concatenate([[0.0], stage_eff])
        if stage_eff.size != K:
            raise ConfigError("stage_effects", f"expected {K - 1} entries (stages 2..K)")
        xi = np.ones(P) if self.xi_sd is None else np.broadcast_to(arr("xi_sd", self.xi_sd), (P,)).copy()
        ref = None if self.reference_xopt is None else arr("reference_xopt", self.reference_xopt).reshape(-1)
        if self.grid_resolution <= 0:
            raise ConfigError("grid_resolution", "must be positive")

        values = dict(
            J=J, K=K, P=P, n_by_centre_stage=n, beta_true=beta, rho_targets=rho,
            Z_values=z, bounds=bounds, x_stage1=x1, arm_ratio=ratio, gamma_offset=gamma_off,
            eta_centre=eta_c, stage_effects=stage_eff, xi_sd=xi, reference_xopt=ref,
            replicates=int(self.replicates), seed=int(self.seed), goal=float(self.goal),
            beta_z=float(self.beta_z), noise_sd=float(self.noise_sd), use_lago=bool(self.use_lago),
        )
        for key, value in values.items():
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, key, value)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ScenarioConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        cost = data.pop("cost", None)
        if cost is None:
            raise ConfigError("cost", "missing cost specification")
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        for required in ("J", "n_by_centre_stage", "beta_true", "x_stage1", "bounds", "goal"):
            if required not in data:
                raise ConfigError(required, "missing required key")
        return cls(cost=cost_from_mapping(cost), **data)

    def to_mapping(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, CostFunction):
                value = value.to_dict()
            out[f.name] = value
        return out

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    @property
    def eta(self) -> np.ndarray:
        return np.array([eta_from_rho(r) for r in self.rho_targets])

    def planned_weights(self) -> np.ndarray:
        if self.weights == "equal":
            return np.full(self.J, 1.0 / self.J)
        per_centre = self.n_by_centre_stage.sum(axis=1).astype(float)
        return per_centre / per_centre.sum()

    def centre_Z(self, replicate: int) -> np.ndarray:
        if self.centre_Z_mode == "fixed_list":
            return np.asarray(self.Z_values[: self.J], dtype=float)
        return stream(self.seed, replicate, 0, "centres").standard_normal(self.J)

    def true_gamma(self, Z: np.ndarray) -> np.ndarray:
        return self.beta_z * np.asarray(Z) + self.gamma_offset

    def problem_template(self) -> OptimizationProblem:
        return OptimizationProblem(
            self.cost, self.goal, self.direction, self.bounds, self.beta_true,
            np.zeros(self.J), np.zeros(self.K - 1), self.planned_weights(),
            lower_bound_policy=self.lower_bound_policy,
        )

    def true_problem(self, Z: np.ndarray, *, include_eta: bool | None = None) -> OptimizationProblem:
        include = self.final_include_eta if include_eta is None else include_eta
        return OptimizationProblem(
            self.cost, self.goal, self.direction, self.bounds, self.beta_true,
            self.true_gamma(Z), self.stage_effects[1:], self.planned_weights(),
            include_eta=include,
        )


def cost_from_mapping(spec) -> CostFunction:
    if isinstance(spec, CostFunction):
        return spec
    if not isinstance(spec, Mapping) or "kind" not in spec:
        raise ConfigError("cost.kind", "cost needs a kind (linear or polynomial)")
    try:
        if spec["kind"] == "linear":
            return CostFunction.linear(spec["coefficients"])
        if spec["kind"] in ("polynomial", "cubic"):
            return CostFunction.polynomial(spec["terms"])
    except KeyError as exc:
        raise ConfigError(f"cost.{exc.args[0]}", "missing for this cost kind") from exc
    except ValueError as exc:
        raise ConfigError("cost", str(exc)) from exc
    raise ConfigError("cost.kind", f"unknown cost kind {spec['kind']!r}")


def simulate_stage(config: ScenarioConfig, stage: int, x, Z, rng: np.random.Generator) -> TrialDataset:
    """Participants of one stage in every centre, all receiving recommendation ``x``.

    Draw order is fixed (arm permutations, then ``xi``, then outcome noise) so
    the same stream always yields the same fragment.
    """
    x = np.asarray(getattr(x, "components", x), dtype=float)
    Z = np.asarray(Z, dtype=float)
    counts = config.n_by_centre_stage[:, stage - 1]
    n = int(counts.sum())
    centre = np.repeat(np.arange(1, config.J + 1), counts)
    arm = np.empty(n, dtype=np.int64)
    start = 0
    for c in counts:
        n_int = int(round(c * config.arm_ratio))
        block = np.r_[np.ones(n_int, dtype=np.int64), np.zeros(c - n_int, dtype=np.int64)]
        arm[start : start + c] = rng.permutation(block)
        start += c
    xi = rng.standard_normal((n, config.P))
    eps = rng.standard_normal(n)

    j = centre - 1
    planned = x + np.outer(Z[j], config.eta) + config.eta_centre[j]
    actual = (planned + xi * config.xi_sd) * arm[:, None]
    gamma = config.true_gamma(Z)
    outcome = (
        actual @ config.beta_true
        + gamma[j]
        + config.stage_effects[stage - 1]
        + config.noise_sd * eps
    )
    return TrialDataset(
        np.full(n, stage), centre, arm, actual, outcome, K=config.K, J=config.J, P=config.P
    )


@dataclass
class ReplicateMetrics:
    replicate: int
    failed: bool = False
    failure: str = ""
    beta_hat: np.ndarray = None
    se: np.ndarray = None
    covered: np.ndarray = None
    reject_individual: np.ndarray = None
    reject_joint: bool = False
    xopt_stage1: np.ndarray = None
    x_stage2: np.ndarray = None
    xopt_final: np.ndarray = None
    true_xopt: np.ndarray = None
    shrunk_stage1: bool = False
    final_feasible: bool = True
    set_covers_true: float = math.nan
    set_fraction: float = math.nan
    band_covers_all: float = math.nan
    true_mean_at_recommended: float = math.nan
    true_mean_at_final: float = math.nan
    cost_recommended_stage1: float = math.nan
    cost_recommended_stage2: float = math.nan
    cost_actual_stage1: float = math.nan
    cost_actual_stage2: float = math.nan
    expected_out_actual_stage1: float = math.nan
    expected_out_actual_stage2: float = math.nan
    expected_out_recommended_stage1: float = math.nan
    expected_out_recommended_stage2: float = math.nan
    expected_out_final: float = math.nan
    avg_obs_out_stage1: float = math.nan
    avg_obs_out_stage2: float = math.nan
    recommendations: list = field(default_factory=list)

    def flat(self) -> dict[str, Any]:
        """One CSV row; vectors are expanded to ``name_1 .. name_P``."""
        row: dict[str, Any] = {}
        for key, value in asdict(self).items():
            if key == "recommendations":
                continue
            if isinstance(value, np.ndarray) or (isinstance(value, list) and key != "recommendations"):
                for i, v in enumerate(np.asarray(value, dtype=float).reshape(-1)):
                    row[f"{key}_{i + 1}"] = v
            elif value is None:
                continue
            else:
                row[key] = value
        return row


def _equal_weight_outcome(config, gamma, A_means) -> float:
    """Mean over centres of ``beta' A_j + gamma_j`` (true coefficients)."""
    return float(np.mean(A_means @ config.beta_true + gamma))


def _stage_summaries(config, data: TrialDataset, gamma):
    treated = data.arm == 1
    if not treated.any():
        return math.nan, math.nan, math.nan
    A_means = np.zeros((config.J, config.P))
    for j in range(config.J):
        rows = treated & (data.centre == j + 1)
        A_means[j] = data.actual[rows].mean(axis=0) if rows.any() else np.nan
    expected = float(np.nanmean(A_means @ config.beta_true + gamma))
    cost_act = float(np.mean(evaluate_cost(config.cost, data.actual[treated])))
    avg_obs = float(data.outcome[treated].mean())
    return expected, cost_act, avg_obs


def _run_stages(config: ScenarioConfig, replicate_index: int, Z: np.ndarray):
    """Stage loop: generate, fit the interim data, recommend, repeat."""
    template = config.problem_template()
    x_used = [np.asarray(config.x_stage1, dtype=float)]
    parts: list[TrialDataset] = []
    recs: list[Recommendation] = []
    for k in range(1, config.K + 1):
        rng = stream(config.seed, replicate_index, k, "stage_data")
        parts.append(simulate_stage(config, k, x_used[-1], Z, rng))
        if k == config.K:
            break
        interim = replace_K(TrialDataset.concat(parts), k)
        rec = recommend_next_stage(
            fit(interim), None, template, x_used[-1], config.lower_bound_policy,
            grid_resolution=config.optimizer_resolution,
        )
        recs.append(rec)
        x_used.append(rec.components.copy() if config.use_lago else x_used[-1].copy())
    return TrialDataset.concat(parts), x_used, recs


def simulate_trial(config: ScenarioConfig, replicate_index: int = 0) -> TrialDataset:
    """All participant records of one simulated trial, exactly as ``run_replicate`` sees them."""
    return _run_stages(config, replicate_index, config.centre_Z(replicate_index))[0]


def run_replicate(config: ScenarioConfig, replicate_index: int) -> ReplicateMetrics:
    """One full trial: stage loop, recommendations, final fit and metrics.

    A rank-deficient design marks the replicate as failed instead of raising.
    """
    out = ReplicateMetrics(replicate=int(replicate_index))
    Z = config.centre_Z(replicate_index)
    gamma = config.true_gamma(Z)
    weights = config.planned_weights()
    try:
        data, x_used, recs = _run_stages(config, replicate_index, Z)
        final = fit(data)
    except NumericalError as exc:
        out.failed, out.failure = True, f"{type(exc).__name__}: {exc}"
        return out

    P = config.P
    z = _z(config.level)
    out.beta_hat = final.beta_A.copy()
    out.se = final.se[:P].copy()
    out.covered = np.abs(out.beta_hat - config.beta_true) <= z * out.se
    out.reject_individual = np.array(
        [inference.wald_individual(final, None, p + 1).rejects(1 - config.level) for p in range(P)]
    )
    try:
        out.reject_joint = inference.wald_joint(final).rejects(1 - config.level)
    except NumericalError:
        out.reject_joint = False
    out.recommendations = [r.components.tolist() for r in recs]

    # Final estimated optimum on all data.
    final_problem = OptimizationProblem.from_fit(
        final, config.cost, config.goal, config.direction, config.bounds,
        weights=weights, include_eta=config.final_include_eta,
        lower_bound_policy=config.lower_bound_policy,
    )
    if config.lower_bound_policy == "previous_recommendation":
        b = final_problem.bounds.copy()
        b[:, 0] = np.minimum(np.maximum(b[:, 0], x_used[-1]), b[:, 1])
        final_problem = final_problem.with_bounds(b)
    try:
        final_rec = optimize(final_problem, grid_resolution=config.optimizer_resolution)
        out.xopt_final = final_rec.components.copy()
    except Infeasible:
        out.final_feasible = False
        out.xopt_final = x_used[-1].copy()

    if recs:
        out.xopt_stage1 = recs[0].components.copy()
        out.shrunk_stage1 = recs[0].shrunk_to_previous
    if len(x_used) > 1:
        out.x_stage2 = x_used[1].copy()

    truth = config.true_problem(Z)
    try:
        out.true_xopt = optimize(truth, grid_resolution=config.optimizer_resolution).components.copy()
    except Infeasible:
        out.true_xopt = np.full(P, np.nan)
    if out.xopt_stage1 is not None:
        out.true_mean_at_recommended = truth.mean(out.xopt_stage1)
    out.true_mean_at_final = truth.mean(out.xopt_final)

    if config.compute_sets:
        _set_and_band(config, final, final_problem, truth, out)

    # Equal-centre-weight summaries of the delivered and recommended packages.
    g_eq = float(np.mean(gamma))
    for k, label in ((1, "stage1"), (2, "stage2")):
        if k > config.K:
            break
        stage_data = data.subset(data.stage == k)
        expected, cost_act, avg_obs = _stage_summaries(config, stage_data, gamma)
        setattr(out, f"expected_out_actual_{label}", expected)
        setattr(out, f"cost_actual_{label}", cost_act)
        setattr(out, f"avg_obs_out_{label}", avg_obs)
        setattr(out, f"expected_out_recommended_{label}", float(x_used[k - 1] @ config.beta_true + g_eq))
    if out.xopt_stage1 is not None:
        out.cost_recommended_stage1 = float(evaluate_cost(config.cost, out.xopt_stage1))
    if out.x_stage2 is not None:
        out.cost_recommended_stage2 = float(evaluate_cost(config.cost, out.x_stage2))
    out.expected_out_final = float(out.xopt_final @ config.beta_true + g_eq)
    return out


def replace_K(data: TrialDataset, K: int) -> TrialDataset:
    return TrialDataset(data.stage, data.centre, data.arm, data.actual, data.outcome,
                        K=K, J=data.J, P=data.P, centres_declared=data.centres_declared)


def _z(level: float) -> float:
    from scipy import stats

    return float(stats.norm.ppf(0.5 + level / 2.0))


def _set_and_band(config, final: ModelFit, problem, truth, out: ReplicateMetrics) -> None:
    grid = inference.intervention_grid(config.bounds, config.grid_resolution)
    include = config.final_include_eta
    cs = inference.confidence_set(final, None, problem, grid=grid, level=config.level,
                                  include_eta=include)
    out.set_fraction = cs.set_fraction
    if np.all(np.isfinite(out.true_xopt)):
        ci = inference.ci_mean(final, None, out.true_xopt, problem.weights, config.level,
                               include_eta=include)
        out.set_covers_true = float(ci.lower <= config.goal <= ci.upper)
    band = inference.confidence_band(final, None, problem.weights, grid, config.level,
                                     include_eta=include)
    true_mean = truth.mean(grid)
    out.band_covers_all = float(band.contains(true_mean))


def _quantiles(values) -> list[float]:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return [math.nan, math.nan]
    return np.quantile(values, [0.025, 0.975], method="linear").tolist()


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den > 0 else math.nan


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    return float(values.mean()) if values.size else math.nan


def aggregate(config: ScenarioConfig, metrics: Sequence[ReplicateMetrics]) -> dict[str, Any]:
    """Table-style summaries over successful replicates (input order does not matter)."""
    metrics = sorted(metrics, key=lambda m: m.replicate)
    ok = [m for m in metrics if not m.failed]
    report: dict[str, Any] = {
        "scenario": config.name,
        "replicates": len(metrics),
        "failed": len(metrics) - len(ok),
    }
    if not ok:
        return report
    beta = np.array([m.beta_hat for m in ok])
    se = np.array([m.se for m in ok])
    truth = config.beta_true
    emp_sd = beta.std(axis=0, ddof=1) if len(ok) > 1 else np.full(config.P, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_bias = np.where(truth != 0, 100.0 * (beta.mean(axis=0) - truth) / truth, np.nan)
    report["components"] = [
        {
            "component": p + 1,
            "true": float(truth[p]),
            "mean_estimate": float(beta[:, p].mean()),
            "bias": float(beta[:, p].mean() - truth[p]),
            "bias_x1000": float(1000 * (beta[:, p].mean() - truth[p])),
            "rel_bias_pct": float(rel_bias[p]),
            "mean_se": float(se[:, p].mean()),
            "emp_sd": float(emp_sd[p]),
            "se_over_empsd_x100": _ratio(100 * se[:, p].mean(), emp_sd[p]),
            "cp95": float(100 * np.mean([m.covered[p] for m in ok])),
            "alpha": float(np.mean([m.reject_individual[p] for m in ok])),
        }
        for p in range(config.P)
    ]
    report["alpha_combined"] = float(np.mean([m.reject_joint for m in ok]))

    true_x = np.array([m.true_xopt for m in ok])
    xopt = {}
    for label, attr in (("stage1", "xopt_stage1"), ("final", "xopt_final")):
        vals = [getattr(m, attr) for m in ok]
        if any(v is None for v in vals):
            continue
        est = np.array(vals)
        diff = est - true_x
        entry = {
            "bias": np.nanmean(diff, axis=0).tolist() if np.isfinite(diff).any() else [math.nan] * config.P,
            "rmse": float(np.sqrt(np.nanmean(np.sum(diff**2, axis=1)))) if np.isfinite(diff).any() else math.nan,
            "mean": est.mean(axis=0).tolist(),
        }
        if config.reference_xopt is not None:
            d_ref = est - config.reference_xopt
            entry["bias_vs_reference"] = d_ref.mean(axis=0).tolist()
            entry["rmse_vs_reference"] = float(np.sqrt(np.mean(np.sum(d_ref**2, axis=1))))
        xopt[label] = entry
    report["xopt"] = xopt
    report["shrink_rate_stage1"] = float(np.mean([m.shrunk_stage1 for m in ok]))
    report["final_infeasible_rate"] = float(np.mean([not m.final_feasible for m in ok]))
    report["true_opt1_q"] = _quantiles([m.true_mean_at_recommended for m in ok])
    report["true_opt2_q"] = _quantiles([m.true_mean_at_final for m in ok])
    report["set_cp95"] = 100 * _nanmean([m.set_covers_true for m in ok])
    report["set_perc"] = 100 * _nanmean([m.set_fraction for m in ok])
    report["bands_cp95"] = 100 * _nanmean([m.band_covers_all for m in ok])
    for key in (
        "expected_out_actual_stage1", "expected_out_actual_stage2",
        "expected_out_recommended_stage1", "expected_out_recommended_stage2",
        "expected_out_final", "avg_obs_out_stage1", "avg_obs_out_stage2",
        "cost_actual_stage1", "cost_actual_stage2",
        "cost_recommended_stage1", "cost_recommended_stage2",
    ):
        report[key] = _nanmean([getattr(m, key) for m in ok])
    report["mean_opt_stage1_q"] = report["true_opt1_q"]
    report["mean_opt_stage2_q"] = report["true_opt2_q"]
    return report


def _run_chunk(args):
    config, indices = args
    return [run_replicate(config, i) for i in indices]


def run_replicates(config: ScenarioConfig, indices: Sequence[int] | None = None,
                   workers: int = 1) -> list[ReplicateMetrics]:
    indices = list(range(config.replicates)) if indices is None else list(indices)
    if workers <= 1:
        return [run_replicate(config, i) for i in indices]
    chunks = [indices[w::workers] for w in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = [m for chunk in pool.map(_run_chunk, [(config, c) for c in chunks]) for m in chunk]
    return sorted(results, key=lambda m: m.replicate)


def run_scenario(config: ScenarioConfig, *, workers: int = 1,
                 return_replicates: bool = False):
    """Run every replicate and aggregate; optionally also return the per-replicate metrics."""
    metrics = run_replicates(config, workers=workers)
    report = aggregate(config, metrics)
    return (report, metrics) if return_replicates else report
