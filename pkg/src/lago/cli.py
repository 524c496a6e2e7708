"""``lago`` command-line interface.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from lago import inference
from lago import io as lio
from lago.errors import ConfigError, LagoError, NumericalError, ValidationError
from lago.model import ModelFit, TrialDataset, centre_weights, fit
from lago.optimizer import OptimizationProblem, Recommendation, optimize, recommend_next_stage

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


# ------------------------------------------------------------------ helpers

def _weights_for(fit_result: ModelFit, spec) -> np.ndarray:
    if isinstance(spec, str):
        return centre_weights(fit_result, spec)
    w = np.asarray(spec, dtype=float).reshape(-1)
    if w.size != fit_result.J:
        raise ConfigError("weights", f"expected {fit_result.J} weights, got {w.size}")
    return w


def _recommendation_dict(rec: Recommendation) -> dict[str, Any]:
    return {
        "x": rec.components.tolist(),
        "feasible": rec.feasible,
        "cost": rec.cost,
        "achieved_mean": rec.achieved_mean,
        "shrunk_to_previous": rec.shrunk_to_previous,
    }


def _test_dict(t: inference.TestResult) -> dict[str, Any]:
    out = {"kind": t.kind, "statistic": t.statistic, "df": t.df, "p_value": t.p_value}
    if t.estimate is not None:
        out["estimate"], out["se"] = t.estimate, t.se
    return out


def coefficient_table(fit_result: ModelFit, level: float = 0.95) -> str:
    z = stats.norm.ppf(0.5 + level / 2)
    pct = f"{100 * level:g}% CI"
    lines = [f"{'term':<10}{'estimate':>11}{'robust SE':>11}{pct:>22}{'p':>9}"]
    for name, b, s in zip(fit_result.column_names, fit_result.coef, fit_result.se):
        p = 2 * stats.norm.sf(abs(b / s)) if s > 0 else float("nan")
        ci = f"({b - z * s:.2f}, {b + z * s:.2f})"
        lines.append(f"{name:<10}{b:>11.3f}{s:>11.3f}{ci:>22}{p:>9.3f}")
    return "\n".join(lines)


def analysis_report(data: TrialDataset, config: dict[str, Any], out_dir: Path | None = None) -> tuple[dict, ModelFit]:
    """Fit, tests and, when the config has a problem block, optimum, interval, set and band."""
    opts = lio.analysis_options(config)
    result = fit(data, variance=opts["variance"])
    cov = result.covariance
    report: dict[str, Any] = {
        "P": result.P, "J": result.J, "K": result.K, "n": result.n,
        "columns": list(result.column_names),
        "beta": result.coef, "se": result.se, "cov": cov,
        "beta_A": result.beta_A, "gamma": result.gamma, "eta": result.eta,
        "condition_number": result.condition_number,
        "n_by_centre_stage": result.n_by_centre_stage,
        "variance": opts["variance"], "level": opts["level"],
    }
    single = data.single_stage_centres()
    if single:
        report["single_stage_centres"] = single
    tests: dict[str, Any] = {
        "individual": [_test_dict(inference.wald_individual(result, None, p + 1)) for p in range(result.P)],
    }
    try:
        tests["joint"] = _test_dict(inference.wald_joint(result))
    except NumericalError as exc:
        tests["joint"] = {"error": str(exc)}
    if np.unique(data.arm).size == 2:
        try:
            tests["delta"] = _test_dict(inference.delta_test(data, variance=opts["variance"]))
        except NumericalError as exc:
            tests["delta"] = {"error": str(exc)}
    report["tests"] = tests

    if lio.has_problem(config):
        fields = lio.problem_fields(config)
        weights = _weights_for(result, opts["weights"])
        problem = OptimizationProblem.from_fit(
            result, fields["cost"], fields["goal"], fields["direction"], fields["bounds"],
            weights=weights, include_eta=opts["include_eta"],
            lower_bound_policy=fields["lower_bound_policy"],
        )
        report["weights"] = weights
        try:
            rec = optimize(problem)
            report["optimum"] = _recommendation_dict(rec)
            ci = inference.ci_mean(result, None, rec.components, weights, opts["level"],
                                   include_eta=opts["include_eta"])
            report["ci_mean"] = {"x": rec.components, "estimate": ci.estimate,
                                 "lower": ci.lower, "upper": ci.upper}
        except NumericalError as exc:
            report["optimum"] = {"error": str(exc)}
        grid = inference.intervention_grid(fields["bounds"], opts["grid_resolution"])
        cset = inference.confidence_set(result, None, problem, grid=grid, level=opts["level"],
                                        include_eta=opts["include_eta"])
        band = inference.confidence_band(result, None, weights, grid, opts["level"],
                                         include_eta=opts["include_eta"])
        report["set_fraction"] = cset.set_fraction
        if out_dir is not None:
            lio.write_set_csv(cset, out_dir / "confidence_set.csv")
            lio.write_band_csv(band, out_dir / "confidence_band.csv")
            report["set_mask_file"] = "confidence_set.csv"
            report["band_file"] = "confidence_band.csv"
    return report, result


def fit_from_report(report: dict[str, Any]) -> ModelFit:
    """Rebuild the parts of a fit needed for recommendations from a report."""
    try:
        P, J = int(report["P"]), int(report["J"])
        counts = np.asarray(report["n_by_centre_stage"], dtype=np.int64)
        beta = np.asarray(report["beta"], dtype=float)
        cov = np.asarray(report["cov"], dtype=float)
    except KeyError as exc:
        raise ValidationError(f"fit report lacks {exc.args[0]!r}") from None
    names = tuple(report.get("columns", ()))
    return ModelFit(beta[:P], beta[P:P + J], beta[P + J:], cov, np.empty(int(report.get("n", 0))),
                    float(report.get("condition_number", np.nan)), counts, names)


def _load_config(path: str | None) -> dict[str, Any]:
    return lio.load_config(path) if path else {}


# ----------------------------------------------------------------- commands

def cmd_fit(args) -> int:
    data = lio.read_dataset(args.data)
    config = _load_config(args.config)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report, result = analysis_report(data, config, out)
    print(coefficient_table(result, report["level"]))
    if "single_stage_centres" in report:
        print(f"note: centres {report['single_stage_centres']} contribute to a single stage")
    if "optimum" in report and "x" in report["optimum"]:
        x = ", ".join(f"{v:.3f}" for v in report["optimum"]["x"])
        print(f"estimated optimal package: ({x}), cost {report['optimum']['cost']:.3f}")
    if out is not None:
        lio.write_json(report, out / "report.json")
    return EXIT_OK


def cmd_test(args) -> int:
    data = lio.read_dataset(args.data)
    config = _load_config(args.config)
    opts = lio.analysis_options(config)
    result = fit(data, variance=opts["variance"])
    rows = [inference.wald_individual(result, None, p + 1) for p in range(result.P)]
    for p, t in enumerate(rows, start=1):
        print(f"beta_{p} = 0: z = {t.statistic:.3f}, p = {t.p_value:.4g}")
    joint = inference.wald_joint(result)
    print(f"all components = 0: chi2({joint.df}) = {joint.statistic:.3f}, p = {joint.p_value:.4g}")
    delta = inference.delta_test(data, variance=opts["variance"])
    print(f"arm effect = 0: estimate {delta.estimate:.3f}, z = {delta.statistic:.3f}, p = {delta.p_value:.4g}")
    if args.out:
        lio.write_json({"individual": [_test_dict(t) for t in rows], "joint": _test_dict(joint),
                        "delta": _test_dict(delta)}, args.out)
    return EXIT_OK


def _problem_from_config(config: dict[str, Any]) -> OptimizationProblem:
    lio.analysis_options(config)
    fields = lio.problem_fields(config)
    model = config.get("model", {})
    lio.check_keys(model, {"beta_A", "gamma", "eta"})
    if "beta_A" not in model:
        raise ConfigError("model.beta_A", "missing required key")
    gamma = model.get("gamma", [0.0])
    weights = config.get("weights", "from_data")
    if isinstance(weights, str):
        weights = None  # equal weights when only coefficients are given
    return OptimizationProblem(
        fields["cost"], fields["goal"], fields["direction"], fields["bounds"], model["beta_A"],
        gamma, model.get("eta", []), weights, bool(config.get("include_eta", False)),
        fields["lower_bound_policy"],
    )


def cmd_optimize(args) -> int:
    problem = _problem_from_config(lio.load_config(args.config))
    rec = optimize(problem)
    payload = _recommendation_dict(rec)
    sys.stdout.write(lio.dumps_json(payload))
    if args.out:
        lio.write_json(payload, args.out)
    return EXIT_OK


def cmd_recommend(args) -> int:
    report = lio.read_json(args.fit)
    result = fit_from_report(report)
    previous = lio.read_json(args.previous)
    if isinstance(previous, dict):
        previous = previous.get("x", previous.get("components"))
    if previous is None:
        raise ValidationError("previous package file needs a list or an 'x' entry")
    config = lio.load_config(args.config)
    opts = lio.analysis_options(config)
    fields = lio.problem_fields(config)
    weights = _weights_for(result, opts["weights"])
    problem = OptimizationProblem.from_fit(
        result, fields["cost"], fields["goal"], fields["direction"], fields["bounds"],
        weights=weights, lower_bound_policy=fields["lower_bound_policy"],
    )
    rec = recommend_next_stage(result, None, problem, previous)
    payload = _recommendation_dict(rec)
    sys.stdout.write(lio.dumps_json(payload))
    if args.out:
        lio.write_json(payload, args.out)
    return EXIT_OK


def _scenario(spec: str):
    from lago.scenarios import get_scenario, scenario_names
    from lago.simulation import ScenarioConfig

    path = Path(spec)
    if path.exists():
        return ScenarioConfig.from_mapping(lio.load_config(path))
    if spec in scenario_names():
        return get_scenario(spec)
    raise ValidationError(f"scenario {spec!r} is neither a file nor a bundled scenario")


def cmd_simulate(args) -> int:
    from lago.simulation import aggregate, run_replicates, simulate_trial

    config = _scenario(args.scenario)
    over = {}
    if args.replicates is not None:
        over["replicates"] = args.replicates
    if args.seed is not None:
        over["seed"] = args.seed
    if over:
        config = config.with_overrides(**over)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = run_replicates(config, workers=args.workers)
    report = aggregate(config, metrics)
    report["config"] = config.to_mapping()
    lio.write_json(report, out / "report.json")
    lio.write_replicates_csv(metrics, out / "replicates.csv")
    if args.dump_data:
        data_dir = out / "data"
        data_dir.mkdir(exist_ok=True)
        for i in range(config.replicates):
            lio.write_dataset(simulate_trial(config, i), data_dir / f"replicate_{i:05d}.csv")
    if args.metadata:
        lio.write_metadata(out / "metadata.json", command="simulate", scenario=args.scenario)
    failed = report["failed"]
    print(f"{config.name}: {report['replicates']} replicates, {failed} failed")
    for comp in report.get("components", []):
        print(f"  beta_{comp['component']}: %RelBias {comp['rel_bias_pct']:.3f}  "
              f"SE/EMP.SD {comp['se_over_empsd_x100']:.1f}  CP95 {comp['cp95']:.1f}")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return f"{v:.4g}"


def cmd_reproduce(args) -> int:
    from lago.scenarios import checks_to_rows, reproduce

    checks = reproduce(args.table, args.replicates, workers=args.workers)
    rows = checks_to_rows(checks)
    width = max(len(r["label"]) for r in rows) + 2
    print(f"{'metric':<{width}}{'reference':>16}{'achieved':>12}  {'tolerance':<18}status")
    for r in rows:
        print(f"{r['label']:<{width}}{_fmt(r['reference']):>16}{_fmt(r['achieved']):>12}  "
              f"{r['tolerance']:<18}{r['status']}")
    n_fail = sum(not c.passed for c in checks)
    print(f"{len(checks) - n_fail}/{len(checks)} checks pass")
    if args.out:
        lio.write_json(rows, args.out)
    return 1 if (args.strict and n_fail) else EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    from lago.scenarios import TABLES

    parser = argparse.ArgumentParser(prog="lago", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the model to a trial CSV and write a report")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("test", help="Wald and randomised-comparison tests")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("optimize", help="cheapest package meeting the goal for given coefficients")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("recommend", help="next-stage package from a fit report")
    p.add_argument("--fit", required=True)
    p.add_argument("--previous", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("simulate", help="run a simulation scenario")
    p.add_argument("--scenario", required=True, help="TOML file or bundled scenario name")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--dump-data", action="store_true", help="also write each replicate's records")
    p.add_argument("--metadata", action="store_true", help="write a metadata.json sidecar")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", help="compare a bundled scenario with published values")
    p.add_argument("--table", required=True, choices=sorted(TABLES))
    p.add_argument("--replicates", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--strict", action="store_true", help="exit 1 when any check fails")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except LagoError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
