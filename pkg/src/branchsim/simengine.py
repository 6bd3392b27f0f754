"""Deterministic single-server simulation: clock, costs, logs, metrics.

One simulation is one logical timeline. The engine pops requests off the
queue per the schedule policy, charges prefill, then advances the clock round
by round as the per-request policy reports decode/probe work. Identical
(workload, configs, seeds) always reproduce identical output bytes.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .core import Duration, TimePoint, percentile
from .orchestrator import OrchestratorConfig, POLICIES, make_request_run
from .predictor import (DEFAULT_CONFUSION, SyntheticPredictorConfig,
                        predict_difficulty, validate_confusion)
from .scheduler import (EASIEST_ACTUAL, EASIEST_PREDICTED, QueueEntry,
                        SCHEDULES, next_request)
from .workload import Workload


@dataclass(frozen=True)
class TimingModel:
    """Linear-in-batch decode cost model.

    A round of ``tokens`` new tokens across ``n`` concurrent branches costs
    tokens * (ms_per_token + ms_per_extra_branch * (n - 1)) milliseconds.
    Probes are charged at the single-branch rate. The defaults are calibrated
    so plain self-consistency on the math-like synthetic preset lands near
    realistic per-request service times; calibration is configuration, not
    code.
    """

    ms_per_token: float = 25.0
    ms_per_extra_branch: float = 0.0
    ms_per_prompt_token: float = 0.1

    def __post_init__(self) -> None:
        if self.ms_per_token <= 0:
            raise ValueError("ms_per_token must be > 0")
        if self.ms_per_extra_branch < 0:
            raise ValueError("ms_per_extra_branch must be >= 0")
        if self.ms_per_prompt_token < 0:
            raise ValueError("ms_per_prompt_token must be >= 0")


def round_time(active_branches: int, tokens: int, model: TimingModel) -> Duration:
    """Wall time of one decode round, in integer milliseconds."""
    if active_branches < 1:
        raise ValueError("active_branches must be >= 1")
    rate = model.ms_per_token + model.ms_per_extra_branch * (active_branches - 1)
    return int(round(tokens * rate))


def prefill_time(prompt_tokens: int, model: TimingModel) -> Duration:
    return int(round(prompt_tokens * model.ms_per_prompt_token))


@dataclass
class RequestLogEntry:
    request_id: str
    arrival: TimePoint
    service_start: TimePoint
    first_token_time: TimePoint
    completion: TimePoint
    tokens_decode: int
    tokens_probe: int
    answers_collected: int
    final: str
    correct: bool
    termination_reason: str
    difficulty_actual: int | None
    difficulty_predicted: int | None

    @property
    def latency(self) -> Duration:
        return self.completion - self.arrival

    @property
    def ttft(self) -> Duration:
        return self.first_token_time - self.arrival


@dataclass
class MetricsReport:
    policy: str
    schedule: str
    n_requests: int
    accuracy: float
    latency_mean_ms: float
    latency_p50_ms: int
    latency_p95_ms: int
    ttft_mean_ms: float
    ttft_p50_ms: int
    ttft_p95_ms: int
    tokens_decode_mean: float
    tokens_total_mean: float
    seed: int
    workload_hash: str
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "schedule": self.schedule,
            "n_requests": self.n_requests,
            "accuracy": self.accuracy,
            "latency_ms": {"mean": self.latency_mean_ms,
                           "p50": self.latency_p50_ms,
                           "p95": self.latency_p95_ms},
            "ttft_ms": {"mean": self.ttft_mean_ms,
                        "p50": self.ttft_p50_ms,
                        "p95": self.ttft_p95_ms},
            "tokens_per_request": {"decode_mean": self.tokens_decode_mean,
                                   "total_mean": self.tokens_total_mean},
            "seed": self.seed,
            "workload_hash": self.workload_hash,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            policy=obj["policy"],
            schedule=obj["schedule"],
            n_requests=obj["n_requests"],
            accuracy=obj["accuracy"],
            latency_mean_ms=obj["latency_ms"]["mean"],
            latency_p50_ms=obj["latency_ms"]["p50"],
            latency_p95_ms=obj["latency_ms"]["p95"],
            ttft_mean_ms=obj["ttft_ms"]["mean"],
            ttft_p50_ms=obj["ttft_ms"]["p50"],
            ttft_p95_ms=obj["ttft_ms"]["p95"],
            tokens_decode_mean=obj["tokens_per_request"]["decode_mean"],
            tokens_total_mean=obj["tokens_per_request"]["total_mean"],
            seed=obj["seed"],
            workload_hash=obj["workload_hash"],
            config=obj.get("config", {}),
        )


class SimulationError(Exception):
    pass


def run_simulation(workload: Workload, orch_config: OrchestratorConfig,
                   policy: str, schedule: str, arrivals: list[int],
                   timing: TimingModel, seed: int,
                   synthetic: SyntheticPredictorConfig | None = None,
                   difficulty_mode: str | None = None,
                   confusion=None) -> tuple[MetricsReport, list[RequestLogEntry]]:
    """Simulate one serving timeline over the whole workload.

    ``difficulty_mode`` ("actual" or "noisy-label") controls what the
    easiest-predicted scheduler sees after prefill; other schedules ignore it.
    Per-request randomness is seeded by workload order, so policy and schedule
    choices never perturb a request's internal stream.
    """
    if policy not in POLICIES:
        raise SimulationError(f"unknown policy {policy!r}")
    if schedule not in SCHEDULES:
        raise SimulationError(f"unknown schedule {schedule!r}")
    if len(arrivals) != len(workload.requests):
        raise SimulationError(
            f"workload has {len(workload.requests)} requests but "
            f"{len(arrivals)} arrivals supplied")
    if any(arrivals[i] > arrivals[i + 1] for i in range(len(arrivals) - 1)):
        raise SimulationError("arrivals must be sorted ascending")
    if schedule == EASIEST_ACTUAL:
        for request in workload.requests:
            if request.difficulty is None:
                raise SimulationError(
                    f"request {request.id!r} has no difficulty label; "
                    f"easiest-actual needs labeled traces")
    if schedule == EASIEST_PREDICTED:
        if difficulty_mode is None:
            raise SimulationError(
                "easiest-predicted needs a difficulty predictor: pass "
                "difficulty_mode 'actual' or 'noisy-label'")
        if difficulty_mode not in ("actual", "noisy-label"):
            raise SimulationError(
                f"unsupported difficulty mode {difficulty_mode!r} for simulation")
        if confusion is not None:
            validate_confusion(confusion)
    synthetic = synthetic or SyntheticPredictorConfig()

    master = random.Random(seed)
    policy_seeds = [master.getrandbits(64) for _ in workload.requests]
    predict_seeds = [master.getrandbits(64) for _ in workload.requests]

    pending = sorted(
        (QueueEntry(trace=trace, arrival=arrival, order=idx)
         for idx, (trace, arrival) in enumerate(zip(workload.requests, arrivals))),
        key=lambda e: (e.arrival, e.order))
    queue: list[QueueEntry] = []
    logs: list[RequestLogEntry] = []
    clock: int = 0
    next_pending = 0

    def admit_arrivals(now: int) -> None:
        nonlocal next_pending
        while next_pending < len(pending) and pending[next_pending].arrival <= now:
            queue.append(pending[next_pending])
            next_pending += 1

    def run_prefills() -> None:
        # Under easiest-predicted, prefill is a server-occupying task handled
        # between request completions: it must precede prediction, so every
        # queued arrival is prefilled (serially) before the next pick.
        nonlocal clock
        while True:
            admit_arrivals(clock)
            waiting = [e for e in queue if e.prefill_done is None]
            if not waiting:
                return
            entry = min(waiting, key=lambda e: (e.arrival, e.order))
            clock += prefill_time(entry.trace.prompt_tokens, timing)
            entry.prefill_done = clock
            rng = random.Random(predict_seeds[entry.order])
            entry.predicted_difficulty = predict_difficulty(
                difficulty_mode, actual_label=entry.trace.difficulty,
                confusion=confusion if confusion is not None else DEFAULT_CONFUSION,
                rng=rng)

    served = 0
    total = len(workload.requests)
    while served < total:
        admit_arrivals(clock)
        if not queue:
            clock = pending[next_pending].arrival
            admit_arrivals(clock)
        if schedule == EASIEST_PREDICTED:
            run_prefills()
        entry = next_request(queue, schedule, clock)
        service_start = clock
        if schedule != EASIEST_PREDICTED:
            clock += prefill_time(entry.trace.prompt_tokens, timing)
        run = make_request_run(policy, entry.trace, orch_config,
                               rng=random.Random(policy_seeds[entry.order]),
                               synthetic=synthetic)
        first_token: int | None = None
        probe_cost = round_time(1, orch_config.probe_cost_tokens, timing)
        while not run.done:
            report = run.step()
            dt = 0
            if report.decoding_branches > 0:
                dt += round_time(report.decoding_branches, report.max_chunk, timing)
            dt += report.probes * probe_cost
            clock += dt
            if first_token is None and report.decode_tokens > 0:
                first_token = clock
        outcome = run.outcome
        assert outcome is not None
        completion = clock
        logs.append(RequestLogEntry(
            request_id=entry.trace.id,
            arrival=entry.arrival,
            service_start=service_start,
            first_token_time=first_token if first_token is not None else completion,
            completion=completion,
            tokens_decode=outcome.tokens_decode,
            tokens_probe=outcome.tokens_probe,
            answers_collected=outcome.tally.total,
            final=outcome.final,
            correct=outcome.final == entry.trace.ground_truth,
            termination_reason=outcome.termination_reason,
            difficulty_actual=entry.trace.difficulty,
            difficulty_predicted=entry.predicted_difficulty,
        ))
        served += 1

    logs.sort(key=lambda e: e.request_id)
    report = aggregate_metrics(logs, policy=policy, schedule=schedule, seed=seed,
                               workload_hash=workload.content_hash(),
                               config=_config_echo(orch_config, timing, synthetic,
                                                   difficulty_mode))
    return report, logs


def _config_echo(orch: OrchestratorConfig, timing: TimingModel,
                 synthetic: SyntheticPredictorConfig,
                 difficulty_mode: str | None) -> dict:
    echo = {
        "orchestrator": {
            "max_branches": orch.max_branches,
            "interval_tokens": orch.interval_tokens,
            "early_term_threshold": orch.early_term_threshold,
            "early_term_rounds": orch.early_term_rounds,
            "branch_out_temperature": orch.branch_out_temperature,
            "consensus_frac": orch.consensus_frac,
            "coverage_frac": orch.coverage_frac,
            "token_cap": orch.token_cap,
            "probe_cost_tokens": orch.probe_cost_tokens,
            "dynasor_window": orch.dynasor_window,
            "short_m": orch.short_m,
        },
        "timing": {
            "ms_per_token": timing.ms_per_token,
            "ms_per_extra_branch": timing.ms_per_extra_branch,
            "ms_per_prompt_token": timing.ms_per_prompt_token,
        },
        "synthetic_rho": synthetic.rho,
    }
    if difficulty_mode is not None:
        echo["difficulty_mode"] = difficulty_mode
    # JSON cannot carry infinity; encode a disabled threshold as null.
    if echo["orchestrator"]["early_term_threshold"] == float("inf"):
        echo["orchestrator"]["early_term_threshold"] = None
    return echo


def aggregate_metrics(logs: list[RequestLogEntry], *, policy: str, schedule: str,
                      seed: int, workload_hash: str,
                      config: dict | None = None) -> MetricsReport:
    if not logs:
        raise SimulationError("no log entries to aggregate")
    latencies = [e.latency for e in logs]
    ttfts = [e.ttft for e in logs]
    return MetricsReport(
        policy=policy,
        schedule=schedule,
        n_requests=len(logs),
        accuracy=sum(e.correct for e in logs) / len(logs),
        latency_mean_ms=sum(latencies) / len(latencies),
        latency_p50_ms=int(percentile(latencies, 50)),
        latency_p95_ms=int(percentile(latencies, 95)),
        ttft_mean_ms=sum(ttfts) / len(ttfts),
        ttft_p50_ms=int(percentile(ttfts, 50)),
        ttft_p95_ms=int(percentile(ttfts, 95)),
        tokens_decode_mean=sum(e.tokens_decode for e in logs) / len(logs),
        tokens_total_mean=sum(e.tokens_decode + e.tokens_probe for e in logs) / len(logs),
        seed=seed,
        workload_hash=workload_hash,
        config=config or {},
    )


# ---------------------------------------------------------------------------
# Stable output formats

CSV_COLUMNS = [
    "request_id", "policy", "schedule", "arrival_ms", "service_start_ms",
    "first_token_ms", "completion_ms", "latency_ms", "ttft_ms",
    "tokens_decode", "tokens_probe", "answers", "correct",
    "termination_reason", "difficulty_actual", "difficulty_predicted",
]


def write_results_csv(logs: list[RequestLogEntry], policy: str, schedule: str,
                      path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for e in logs:
            writer.writerow([
                e.request_id, policy, schedule, e.arrival, e.service_start,
                e.first_token_time, e.completion, e.latency, e.ttft,
                e.tokens_decode, e.tokens_probe, e.answers_collected,
                "true" if e.correct else "false", e.termination_reason,
                "" if e.difficulty_actual is None else e.difficulty_actual,
                "" if e.difficulty_predicted is None else e.difficulty_predicted,
            ])


def write_summary_json(report_obj: dict, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        json.dump(report_obj, handle, indent=2, sort_keys=True)
        handle.write("\n")


# ---------------------------------------------------------------------------
# Report comparison

# "Matched accuracy" means within 0.1 percentage points.
MATCHED_ACCURACY_TOLERANCE = 0.001

COMPARED_METRICS = [
    ("latency_mean_ms", "latency mean"),
    ("latency_p50_ms", "latency p50"),
    ("latency_p95_ms", "latency p95"),
    ("ttft_mean_ms", "ttft mean"),
    ("ttft_p50_ms", "ttft p50"),
    ("ttft_p95_ms", "ttft p95"),
    ("tokens_decode_mean", "tokens decode"),
    ("tokens_total_mean", "tokens total"),
    ("accuracy", "accuracy"),
]


class ComparisonError(Exception):
    pass


def compare_reports(a: MetricsReport, b: MetricsReport) -> dict:
    """Relative deltas (b - a) / a per metric, as signed percentages."""
    if a.workload_hash != b.workload_hash:
        raise ComparisonError(
            f"reports cover different workloads: {a.workload_hash[:12]} vs "
            f"{b.workload_hash[:12]}")
    rows = []
    for attr, label in COMPARED_METRICS:
        va = getattr(a, attr)
        vb = getattr(b, attr)
        delta = None if va == 0 else (vb - va) / va * 100.0
        rows.append({"metric": label, "a": va, "b": vb, "delta_pct": delta})
    return {
        "a": {"policy": a.policy, "schedule": a.schedule, "seed": a.seed},
        "b": {"policy": b.policy, "schedule": b.schedule, "seed": b.seed},
        "workload_hash": a.workload_hash,
        "rows": rows,
        "matched_accuracy": abs(b.accuracy - a.accuracy) <= MATCHED_ACCURACY_TOLERANCE,
    }


def format_comparison(comparison: dict) -> str:
    lines = [
        f"a: {comparison['a']['policy']}/{comparison['a']['schedule']} "
        f"(seed {comparison['a']['seed']})",
        f"b: {comparison['b']['policy']}/{comparison['b']['schedule']} "
        f"(seed {comparison['b']['seed']})",
        f"{'metric':<16} {'a':>14} {'b':>14} {'delta':>10}",
    ]
    for row in comparison["rows"]:
        delta = "n/a" if row["delta_pct"] is None else f"{row['delta_pct']:+.1f}%"
        lines.append(f"{row['metric']:<16} {row['a']:>14.4g} {row['b']:>14.4g} "
                     f"{delta:>10}")
    if comparison["matched_accuracy"]:
        lines.append("accuracy matched (|delta| <= 0.1 percentage points)")
    return "\n".join(lines)
