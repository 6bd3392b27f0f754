"""Command-line front end.

Commands:

* ``gen``           - generate a synthetic workload trace (JSONL).
* ``run``           - simulate serving a trace under a policy and schedule;
                      writes a results CSV and a summary JSON.
* ``compare``       - relative metric deltas between two summary JSONs.
* ``calibrate-tau`` - percentile threshold from a predictions file.
* ``probe-mlp``     - evaluate a weight file over stored activation vectors.

Exit codes: 0 success, 1 usage error, 2 data/validation error. Every command
is reproducible: arguments plus seeds fully determine the outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .orchestrator import POLICIES, OrchestratorConfig, TERMINATION_DISABLED
from .predictor import (SyntheticPredictorConfig, WeightFormatError,
                        calibrate_tau, load_activations, load_weights,
                        mlp_forward, validate_confusion)
from .presets import PRESETS
from .scheduler import ArrivalConfig, SCHEDULES, gen_arrivals
from .simengine import (ComparisonError, MetricsReport, SimulationError,
                        TimingModel, compare_reports, format_comparison,
                        run_simulation, write_results_csv, write_summary_json)
from .workload import (SyntheticParams, TraceError, generate_synthetic,
                       load_trace, save_trace)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="branchsim",
                     description="Serving simulator for multi-branch reasoning policies")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic workload",
                         parents=[], add_help=True)
    gen.add_argument("--preset", default="math-like", choices=sorted(PRESETS))
    gen.add_argument("-n", "--requests", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--output", required=True)
    gen.add_argument("--templates", type=int, default=None,
                     help="branch templates per request (preset default)")
    gen.add_argument("--token-cap", type=int, default=None)

    run = sub.add_parser("run", help="simulate serving a workload")
    run.add_argument("-t", "--trace", default=None, help="workload JSONL path")
    run.add_argument("--synthetic", type=int, default=None, metavar="N",
                     help="generate N requests in memory instead of loading a trace")
    run.add_argument("--workload-seed", type=int, default=0,
                     help="seed for --synthetic generation")
    run.add_argument("--config", default=None,
                     help="config file (key=value lines or JSON); flags override")
    run.add_argument("--preset", default=None, choices=sorted(PRESETS))
    run.add_argument("--policy", default=None, choices=POLICIES)
    run.add_argument("--schedule", default=None, choices=SCHEDULES)
    run.add_argument("--qpm", type=float, default=None, help="mean arrival rate")
    run.add_argument("--arrival-seed", type=int, default=None)
    run.add_argument("--seed", type=int, default=None, help="simulation seed")
    run.add_argument("--trials", type=int, default=None,
                     help="run N seeds (seed, seed+1, ...) and merge reports")
    run.add_argument("-o", "--out", default=None, required=False,
                     help="output prefix: writes <prefix>.csv and <prefix>.json")
    # Orchestrator knobs (preset defaults unless overridden).
    run.add_argument("--branches", type=int, default=None)
    run.add_argument("--interval", type=int, default=None)
    run.add_argument("--threshold", default=None,
                     help="early-termination threshold; 'off' disables")
    run.add_argument("--consecutive", type=int, default=None,
                     help="rounds above threshold before termination")
    run.add_argument("--temperature", type=float, default=None)
    run.add_argument("--consensus", type=float, default=None)
    run.add_argument("--coverage", type=float, default=None)
    run.add_argument("--token-cap", type=int, default=None)
    run.add_argument("--probe-cost", type=int, default=None)
    run.add_argument("--dynasor-window", type=int, default=None)
    run.add_argument("--short-m", type=int, default=None)
    # Predictors.
    run.add_argument("--rho", type=float, default=None,
                     help="synthetic correctness predictor quality in [0, 1]")
    run.add_argument("--difficulty-predictor", default=None,
                     choices=("actual", "noisy-label"),
                     help="required for --schedule easiest-predicted")
    run.add_argument("--confusion-file", default=None,
                     help="JSON file with a 5x5 row-stochastic confusion matrix")
    # Timing model.
    run.add_argument("--ms-per-token", type=float, default=None)
    run.add_argument("--ms-per-extra-branch", type=float, default=None)
    run.add_argument("--ms-per-prompt-token", type=float, default=None)

    cmp_ = sub.add_parser("compare", help="diff two summary JSONs")
    cmp_.add_argument("-a", "--baseline", required=True)
    cmp_.add_argument("-b", "--candidate", required=True)
    cmp_.add_argument("-o", "--output", default=None, help="also write a CSV")

    cal = sub.add_parser("calibrate-tau", help="threshold from validation predictions")
    cal.add_argument("-f", "--predictions", required=True,
                     help="file with one probability per line")
    cal.add_argument("--pct", type=float, default=70.0)

    probe = sub.add_parser("probe-mlp", help="evaluate a weight file over activations")
    probe.add_argument("--weights", required=True, help="weight manifest path")
    probe.add_argument("--activations", required=True,
                       help="raw float32 or one-vector-per-line text")
    probe.add_argument("-o", "--output", default=None)

    return parser


# ---------------------------------------------------------------------------
# Config resolution: explicit flag > config file > preset > built-in default.


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        obj = json.loads(text)
        if not isinstance(obj, dict):
            raise TraceError(f"{path}: config JSON must be an object")
        return {str(k).replace("-", "_"): v for k, v in obj.items()}
    entries: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise TraceError(f"{path} line {line_no}: expected key=value")
        key, value = line.split("=", 1)
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def _pick(explicit, config: dict, key: str, preset_value, default, cast):
    if explicit is not None:
        return explicit
    if key in config:
        value = config[key]
        return cast(value) if isinstance(value, str) else value
    if preset_value is not None:
        return preset_value
    return default


def _parse_threshold(value) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    if str(value).lower() in ("off", "none", "inf", "disabled"):
        return TERMINATION_DISABLED
    return float(value)


def _resolve_run_config(args) -> dict:
    config = _load_config_file(args.config) if args.config else {}
    preset_name = args.preset or config.get("preset")
    preset = PRESETS[preset_name] if preset_name else None
    orch_p = preset.orchestrator if preset else None
    base = OrchestratorConfig()

    def orch(attr):
        return getattr(orch_p, attr) if orch_p else None

    threshold_raw = _pick(args.threshold, config, "threshold",
                          orch("early_term_threshold"),
                          base.early_term_threshold, str)
    orchestrator = OrchestratorConfig(
        max_branches=_pick(args.branches, config, "branches",
                           orch("max_branches"), base.max_branches, int),
        interval_tokens=_pick(args.interval, config, "interval",
                              orch("interval_tokens"), base.interval_tokens, int),
        early_term_threshold=_parse_threshold(threshold_raw),
        early_term_rounds=_pick(args.consecutive, config, "consecutive",
                                orch("early_term_rounds"),
                                base.early_term_rounds, int),
        branch_out_temperature=_pick(args.temperature, config, "temperature",
                                     orch("branch_out_temperature"),
                                     base.branch_out_temperature, float),
        consensus_frac=_pick(args.consensus, config, "consensus",
                             orch("consensus_frac"), base.consensus_frac, float),
        coverage_frac=_pick(args.coverage, config, "coverage",
                            orch("coverage_frac"), base.coverage_frac, float),
        token_cap=_pick(args.token_cap, config, "token_cap",
                        orch("token_cap"), base.token_cap, int),
        probe_cost_tokens=_pick(args.probe_cost, config, "probe_cost",
                                orch("probe_cost_tokens"),
                                base.probe_cost_tokens, int),
        dynasor_window=_pick(args.dynasor_window, config, "dynasor_window",
                             orch("dynasor_window"), base.dynasor_window, int),
        short_m=_pick(args.short_m, config, "short_m",
                      orch("short_m"), base.short_m, int),
    )
    timing_base = TimingModel()
    timing = TimingModel(
        ms_per_token=_pick(args.ms_per_token, config, "ms_per_token",
                           None, timing_base.ms_per_token, float),
        ms_per_extra_branch=_pick(args.ms_per_extra_branch, config,
                                  "ms_per_extra_branch", None,
                                  timing_base.ms_per_extra_branch, float),
        ms_per_prompt_token=_pick(args.ms_per_prompt_token, config,
                                  "ms_per_prompt_token", None,
                                  timing_base.ms_per_prompt_token, float),
    )
    return {
        "orchestrator": orchestrator,
        "timing": timing,
        "policy": _pick(args.policy, config, "policy", None, "duchess", str),
        "schedule": _pick(args.schedule, config, "schedule", None, "fcfs", str),
        "qpm": _pick(args.qpm, config, "qpm",
                     preset.qpm if preset else None, 2.0, float),
        "arrival_seed": _pick(args.arrival_seed, config, "arrival_seed", None, 0, int),
        "seed": _pick(args.seed, config, "seed", None, 0, int),
        "trials": _pick(args.trials, config, "trials", None, 1, int),
        "rho": _pick(args.rho, config, "rho", None, 1.0, float),
        "difficulty_predictor": _pick(args.difficulty_predictor, config,
                                      "difficulty_predictor", None, None, str),
        "preset": preset_name,
    }


# ---------------------------------------------------------------------------
# Commands


def _cmd_gen(args) -> int:
    if args.requests < 1:
        raise UsageError("gen: --requests must be >= 1")
    preset = PRESETS[args.preset]
    params = preset.synthetic
    overrides = {}
    if args.templates is not None:
        if args.templates < 1:
            raise UsageError("gen: --templates must be >= 1")
        overrides["templates_per_request"] = args.templates
    if args.token_cap is not None:
        overrides["token_cap"] = args.token_cap
    if overrides:
        params = SyntheticParams(**{**params.__dict__, **overrides})
    workload = generate_synthetic(params, args.requests, args.seed)
    save_trace(workload, args.output)
    levels = [r.difficulty for r in workload.requests]
    mix = {level: levels.count(level) for level in sorted(set(levels))}
    templates = sum(len(r.templates) for r in workload.requests)
    print(f"wrote {len(workload)} requests to {args.output} "
          f"(level mix {mix}, {templates} templates, "
          f"hash {workload.content_hash()[:12]})")
    return 0


def _load_workload(args):
    if (args.trace is None) == (args.synthetic is None):
        raise UsageError("run: exactly one of --trace or --synthetic is required")
    if args.trace is not None:
        return load_trace(args.trace)
    if args.synthetic < 1:
        raise UsageError("run: --synthetic must be >= 1")
    preset_name = args.preset or "math-like"
    return generate_synthetic(PRESETS[preset_name].synthetic, args.synthetic,
                              args.workload_seed)


def _merge_trial_reports(reports: list[MetricsReport]) -> dict:
    merged = reports[0].to_dict()
    if len(reports) == 1:
        merged["trials"] = [r.to_dict() for r in reports]
        return merged
    n = len(reports)
    merged["accuracy"] = sum(r.accuracy for r in reports) / n
    merged["latency_ms"] = {
        "mean": sum(r.latency_mean_ms for r in reports) / n,
        "p50": sum(r.latency_p50_ms for r in reports) / n,
        "p95": sum(r.latency_p95_ms for r in reports) / n,
    }
    merged["ttft_ms"] = {
        "mean": sum(r.ttft_mean_ms for r in reports) / n,
        "p50": sum(r.ttft_p50_ms for r in reports) / n,
        "p95": sum(r.ttft_p95_ms for r in reports) / n,
    }
    merged["tokens_per_request"] = {
        "decode_mean": sum(r.tokens_decode_mean for r in reports) / n,
        "total_mean": sum(r.tokens_total_mean for r in reports) / n,
    }
    merged["trials"] = [r.to_dict() for r in reports]
    return merged


def _cmd_run(args) -> int:
    resolved = _resolve_run_config(args)
    if resolved["trials"] < 1:
        raise UsageError("run: --trials must be >= 1")
    if not 0.0 <= resolved["rho"] <= 1.0:
        raise UsageError("run: --rho must be in [0, 1]")
    if resolved["qpm"] <= 0:
        raise UsageError("run: --qpm must be > 0")
    if resolved["schedule"] == "easiest-predicted" and not resolved["difficulty_predictor"]:
        raise UsageError(
            "run: --schedule easiest-predicted needs a difficulty predictor; "
            "pass --difficulty-predictor actual|noisy-label")
    if args.out is None:
        raise UsageError("run: --out is required")
    confusion = None
    if args.confusion_file:
        confusion = json.loads(Path(args.confusion_file).read_text(encoding="utf-8"))
        validate_confusion(confusion)
    workload = _load_workload(args)
    arrivals = gen_arrivals(ArrivalConfig(rate_qpm=resolved["qpm"],
                                          n_requests=len(workload),
                                          seed=resolved["arrival_seed"]))
    synthetic = SyntheticPredictorConfig(rho=resolved["rho"])
    out_prefix = Path(args.out)
    if out_prefix.parent != Path("."):
        out_prefix.parent.mkdir(parents=True, exist_ok=True)

    reports = []
    for trial in range(resolved["trials"]):
        trial_seed = resolved["seed"] + trial
        report, logs = run_simulation(
            workload, resolved["orchestrator"], resolved["policy"],
            resolved["schedule"], arrivals, resolved["timing"], trial_seed,
            synthetic=synthetic,
            difficulty_mode=resolved["difficulty_predictor"],
            confusion=confusion)
        reports.append(report)
        csv_path = (f"{out_prefix}.csv" if resolved["trials"] == 1
                    else f"{out_prefix}.trial{trial_seed}.csv")
        write_results_csv(logs, resolved["policy"], resolved["schedule"], csv_path)
    merged = _merge_trial_reports(reports)
    merged["arrival"] = {"qpm": resolved["qpm"],
                         "seed": resolved["arrival_seed"],
                         "n_requests": len(workload)}
    if resolved["preset"]:
        merged["preset"] = resolved["preset"]
    write_summary_json(merged, f"{out_prefix}.json")
    print(f"policy={resolved['policy']} schedule={resolved['schedule']} "
          f"n={merged['n_requests']} accuracy={merged['accuracy']:.4f} "
          f"mean_latency_s={merged['latency_ms']['mean'] / 1000.0:.2f} "
          f"tokens_per_request={merged['tokens_per_request']['total_mean']:.0f}")
    return 0


def _cmd_compare(args) -> int:
    report_a = MetricsReport.from_dict(
        json.loads(Path(args.baseline).read_text(encoding="utf-8")))
    report_b = MetricsReport.from_dict(
        json.loads(Path(args.candidate).read_text(encoding="utf-8")))
    comparison = compare_reports(report_a, report_b)
    print(format_comparison(comparison))
    if args.output:
        with Path(args.output).open("w", encoding="utf-8", newline="") as handle:
            handle.write("metric,a,b,delta_pct\n")
            for row in comparison["rows"]:
                delta = "" if row["delta_pct"] is None else f"{row['delta_pct']:.6f}"
                handle.write(f"{row['metric']},{row['a']},{row['b']},{delta}\n")
    return 0


def _cmd_calibrate_tau(args) -> int:
    path = Path(args.predictions)
    values = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                   start=1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError as exc:
            raise TraceError(f"{path.name} line {line_no}: not a number: "
                             f"{line!r}") from exc
    if not values:
        raise TraceError(f"{path.name}: no predictions found")
    if not 0.0 < args.pct <= 100.0:
        raise UsageError("calibrate-tau: --pct must be in (0, 100]")
    tau = calibrate_tau(values, args.pct)
    print(f"tau(p{args.pct:g}) = {tau:g}")
    return 0


def _cmd_probe_mlp(args) -> int:
    weights = load_weights(args.weights)
    vectors = load_activations(args.activations, weights.input_dim)
    lines = []
    for vector in vectors:
        _, probs = mlp_forward(weights, vector)
        if weights.head_dim == 1:
            lines.append(f"{probs[0]:.9f}")
        else:
            lines.append(",".join(f"{p:.9f}" for p in probs))
    text = "\n".join(lines) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "gen":
            return _cmd_gen(args)
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "calibrate-tau":
            return _cmd_calibrate_tau(args)
        if args.command == "probe-mlp":
            return _cmd_probe_mlp(args)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (TraceError, WeightFormatError, ComparisonError, SimulationError,
            ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
