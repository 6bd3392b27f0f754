"""Workload ingestion, validation, and synthetic trace generation.

A workload is a list of request traces. Each trace carries one or more branch
templates: pre-recorded (or synthesized) branch trajectories that stand in for
live decoding during simulation. The on-disk format is JSONL, one request per
line, schema version 1:

    {"v": 1, "id": ..., "ground_truth": ..., "difficulty": ...,
     "prompt_tokens": ..., "branches": [{"natural_length": ...,
     "final_answer": ..., "oracle_convergence": ..., "probes": [{"at", "answer"}],
     "pred_probs": [{"at", "p"}]}]}

All offsets are token counts from the start of the template.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

from .core import DIFFICULTY_LEVELS, NO_ANSWER, normalize_answer

SCHEMA_VERSION = 1


class TraceError(Exception):
    """A trace file could not be parsed or violates schema invariants."""


@dataclass
class BranchTemplate:
    """One pre-recorded branch trajectory.

    ``probes`` holds (token offset, answer) pairs sorted by offset: the answer
    an extraction probe would return at that point. At or beyond
    ``oracle_convergence`` a probe returns ``final_answer`` regardless of the
    explicit probe list. ``pred_probs`` optionally embeds correctness
    predictions recorded with the trace; when present they take precedence
    over the synthetic predictor.
    """

    natural_length: int
    final_answer: str
    probes: list[tuple[int, str]] = field(default_factory=list)
    oracle_convergence: int | None = None
    pred_probs: list[tuple[int, float]] | None = None


@dataclass
class RequestTrace:
    id: str
    ground_truth: str
    prompt_tokens: int
    templates: list[BranchTemplate]
    difficulty: int | None = None


@dataclass
class Workload:
    requests: list[RequestTrace]

    def __len__(self) -> int:
        return len(self.requests)

    def content_hash(self) -> str:
        """SHA-256 over the canonical serialized form; identifies the workload
        across save/load round-trips."""
        digest = hashlib.sha256()
        for request in self.requests:
            line = json.dumps(_request_to_obj(request), sort_keys=True,
                              separators=(",", ":"))
            digest.update(line.encode("utf-8"))
            digest.update(b"\n")
        return digest.hexdigest()


def probe_answer(template: BranchTemplate, position: int) -> str:
    """Answer an extraction probe returns at ``position`` tokens into the
    template: the final answer once converged, otherwise the most recent
    explicit probe, otherwise no answer."""
    conv = template.oracle_convergence
    if conv is not None and position >= conv:
        return template.final_answer
    if template.probes:
        offsets = [at for at, _ in template.probes]
        idx = bisect.bisect_right(offsets, position) - 1
        if idx >= 0:
            return template.probes[idx][1]
    return NO_ANSWER


def trace_prediction(template: BranchTemplate, position: int) -> float:
    """Trace-embedded correctness prediction at ``position``: the most recent
    recorded value, or 0.0 before the first one."""
    if not template.pred_probs:
        return 0.0
    offsets = [at for at, _ in template.pred_probs]
    idx = bisect.bisect_right(offsets, position) - 1
    if idx < 0:
        return 0.0
    return template.pred_probs[idx][1]


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Violation:
    level: str  # "error" | "warning"
    where: str  # request id or "line N"
    message: str

    def __str__(self) -> str:
        return f"[{self.level}] {self.where}: {self.message}"


def _check_template(template: BranchTemplate, where: str,
                    out: list[Violation]) -> None:
    if template.natural_length < 1:
        out.append(Violation("error", where, "natural_length must be >= 1"))
    prev = -1
    for at, _answer in template.probes:
        if at <= prev:
            out.append(Violation("error", where,
                                 f"probe offsets must be strictly increasing (at={at})"))
        if at > template.natural_length:
            out.append(Violation("error", where,
                                 f"probe offset {at} exceeds natural_length "
                                 f"{template.natural_length}"))
        prev = at
    conv = template.oracle_convergence
    if conv is not None:
        if conv < 0 or conv > template.natural_length:
            out.append(Violation("error", where,
                                 f"oracle_convergence {conv} outside [0, natural_length]"))
        else:
            for at, answer in template.probes:
                if at >= conv and answer != template.final_answer:
                    out.append(Violation(
                        "error", where,
                        f"probe at {at} is beyond oracle_convergence {conv} "
                        f"but does not return the final answer"))
    if template.pred_probs is not None:
        prev = -1
        for at, p in template.pred_probs:
            if at <= prev:
                out.append(Violation("error", where,
                                     "pred_probs offsets must be strictly increasing"))
            if not 0.0 <= p <= 1.0:
                out.append(Violation("error", where,
                                     f"pred_probs value {p} outside [0, 1]"))
            prev = at


def validate_trace(workload: Workload, max_branches: int | None = None) -> list[Violation]:
    """Re-check every invariant. Violations are data, not exceptions; an empty
    list means the workload is valid."""
    out: list[Violation] = []
    seen_ids: set[str] = set()
    for request in workload.requests:
        where = f"request {request.id!r}"
        if request.id in seen_ids:
            out.append(Violation("error", where, "duplicate request id"))
        seen_ids.add(request.id)
        if request.ground_truth == NO_ANSWER:
            out.append(Violation("error", where, "ground_truth is empty"))
        if request.prompt_tokens < 0:
            out.append(Violation("error", where, "prompt_tokens must be >= 0"))
        if request.difficulty is not None and request.difficulty not in DIFFICULTY_LEVELS:
            out.append(Violation("error", where,
                                 f"difficulty {request.difficulty} outside 1..5"))
        if not request.templates:
            out.append(Violation("error", where, "at least one branch template required"))
        if max_branches is not None and len(request.templates) < max_branches:
            out.append(Violation("warning", where,
                                 f"only {len(request.templates)} templates for "
                                 f"{max_branches} branches: parallelism degraded"))
        for k, template in enumerate(request.templates):
            _check_template(template, f"{where} branch {k}", out)
    return out


# ---------------------------------------------------------------------------
# JSONL serialization


def _request_to_obj(request: RequestTrace) -> dict:
    branches = []
    for t in request.templates:
        obj: dict = {
            "natural_length": t.natural_length,
            "final_answer": t.final_answer,
            "probes": [{"at": at, "answer": answer} for at, answer in t.probes],
        }
        if t.oracle_convergence is not None:
            obj["oracle_convergence"] = t.oracle_convergence
        if t.pred_probs is not None:
            obj["pred_probs"] = [{"at": at, "p": p} for at, p in t.pred_probs]
        branches.append(obj)
    out: dict = {
        "v": SCHEMA_VERSION,
        "id": request.id,
        "ground_truth": request.ground_truth,
        "prompt_tokens": request.prompt_tokens,
        "branches": branches,
    }
    if request.difficulty is not None:
        out["difficulty"] = request.difficulty
    return out


def _require(obj: dict, key: str, kind: type, line: int):
    if key not in obj:
        raise TraceError(f"line {line}: missing field {key!r}")
    value = obj[key]
    if kind is int and isinstance(value, bool):
        raise TraceError(f"line {line}: field {key!r} must be {kind.__name__}")
    if not isinstance(value, kind):
        raise TraceError(f"line {line}: field {key!r} must be {kind.__name__}, "
                         f"got {type(value).__name__}")
    return value


def _obj_to_request(obj: dict, line: int) -> RequestTrace:
    version = obj.get("v")
    if version != SCHEMA_VERSION:
        raise TraceError(f"line {line}: unsupported schema version {version!r}")
    rid = _require(obj, "id", str, line)
    ground_truth = normalize_answer(_require(obj, "ground_truth", str, line))
    prompt_tokens = _require(obj, "prompt_tokens", int, line)
    difficulty = obj.get("difficulty")
    if difficulty is not None and (not isinstance(difficulty, int)
                                   or isinstance(difficulty, bool)):
        raise TraceError(f"line {line}: difficulty must be an integer")
    raw_branches = _require(obj, "branches", list, line)
    templates = []
    for raw in raw_branches:
        if not isinstance(raw, dict):
            raise TraceError(f"line {line}: branch entries must be objects")
        natural_length = _require(raw, "natural_length", int, line)
        final_answer = normalize_answer(_require(raw, "final_answer", str, line))
        probes = []
        for probe in raw.get("probes", []):
            probes.append((_require(probe, "at", int, line),
                           normalize_answer(_require(probe, "answer", str, line))))
        pred_probs = None
        if "pred_probs" in raw:
            pred_probs = []
            for entry in raw["pred_probs"]:
                at = _require(entry, "at", int, line)
                p = entry.get("p")
                if not isinstance(p, (int, float)) or isinstance(p, bool):
                    raise TraceError(f"line {line}: pred_probs p must be numeric")
                pred_probs.append((at, float(p)))
        templates.append(BranchTemplate(
            natural_length=natural_length,
            final_answer=final_answer,
            probes=probes,
            oracle_convergence=raw.get("oracle_convergence"),
            pred_probs=pred_probs,
        ))
    return RequestTrace(id=rid, ground_truth=ground_truth,
                        prompt_tokens=prompt_tokens, templates=templates,
                        difficulty=difficulty)


def load_trace(path: str | Path) -> Workload:
    """Parse and validate a JSONL workload. Every failure names the offending
    line; error-level invariant violations are raised, warnings are not."""
    path = Path(path)
    requests: list[RequestTrace] = []
    line_of_id: dict[str, int] = {}
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"line {line_no}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise TraceError(f"line {line_no}: expected a JSON object")
            request = _obj_to_request(obj, line_no)
            if request.id in line_of_id:
                raise TraceError(f"line {line_no}: duplicate request id "
                                 f"{request.id!r} (first seen on line "
                                 f"{line_of_id[request.id]})")
            line_of_id[request.id] = line_no
            per_request = validate_trace(Workload([request]))
            errors = [v for v in per_request if v.level == "error"]
            if errors:
                raise TraceError(f"line {line_no}: {errors[0].message}")
            requests.append(request)
    return Workload(requests)


def save_trace(workload: Workload, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for request in workload.requests:
            handle.write(json.dumps(_request_to_obj(request), sort_keys=True,
                                    separators=(",", ":")))
            handle.write("\n")


# ---------------------------------------------------------------------------
# Synthetic generation


@dataclass(frozen=True)
class SyntheticParams:
    """Knobs for synthetic workload generation.

    Branch lengths are lognormal around a per-level median (the distribution
    shape is a modeling choice, swappable here without code changes). A
    template is "correct" with the per-level probability: its final answer is
    the ground truth and probes stabilize to it from a convergence point drawn
    uniformly inside ``convergence_range`` of the natural length. Other
    templates converge to a distractor instead. Probes before convergence
    churn across distractors, so consecutive probes may disagree.
    """

    level_median_tokens: tuple[int, int, int, int, int] = (340, 460, 640, 840, 1180)
    length_sigma: float = 0.30
    level_correct_prob: tuple[float, float, float, float, float] = (
        0.85, 0.78, 0.70, 0.62, 0.52)
    convergence_range: tuple[float, float] = (0.3, 0.7)
    templates_per_request: int = 10
    distractor_count: int = 6
    probe_stride: int = 16
    prompt_token_range: tuple[int, int] = (60, 200)
    level_mix: tuple[float, float, float, float, float] | None = None
    token_cap: int = 4096
    min_length: int = 16

    def validate(self) -> None:
        if len(self.level_median_tokens) != 5 or len(self.level_correct_prob) != 5:
            raise ValueError("per-level parameters need exactly 5 entries")
        if any(m < 1 for m in self.level_median_tokens):
            raise ValueError("level medians must be positive")
        if any(not 0.0 <= q <= 1.0 for q in self.level_correct_prob):
            raise ValueError("per-level correct probabilities must be in [0, 1]")
        lo, hi = self.convergence_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("convergence_range must satisfy 0 < lo <= hi <= 1")
        if self.templates_per_request < 1:
            raise ValueError("templates_per_request must be >= 1")
        if self.distractor_count < 1:
            raise ValueError("distractor_count must be >= 1")
        if self.probe_stride < 1:
            raise ValueError("probe_stride must be >= 1")
        if self.level_mix is not None and (len(self.level_mix) != 5
                                           or any(w < 0 for w in self.level_mix)
                                           or sum(self.level_mix) <= 0):
            raise ValueError("level_mix must be 5 non-negative weights")


def _sample_level(params: SyntheticParams, rng: random.Random) -> int:
    if params.level_mix is None:
        return rng.randint(1, 5)
    return rng.choices(DIFFICULTY_LEVELS, weights=params.level_mix, k=1)[0]


def _make_template(params: SyntheticParams, ground_truth: str,
                   distractors: list[str], level: int,
                   rng: random.Random) -> BranchTemplate:
    median = params.level_median_tokens[level - 1]
    length = int(round(median * math.exp(params.length_sigma * rng.gauss(0.0, 1.0))))
    length = max(params.min_length, min(length, params.token_cap))
    correct = rng.random() < params.level_correct_prob[level - 1]
    final = ground_truth if correct else rng.choice(distractors)
    frac = rng.uniform(*params.convergence_range)
    convergence = max(1, int(round(frac * length)))
    probes = [(at, rng.choice(distractors))
              for at in range(params.probe_stride, convergence, params.probe_stride)]
    return BranchTemplate(natural_length=length, final_answer=final,
                          probes=probes, oracle_convergence=convergence)


def generate_synthetic(params: SyntheticParams, n_requests: int,
                       seed: int) -> Workload:
    """Deterministic per seed; the result always passes validation with zero
    error-level violations."""
    params.validate()
    if n_requests < 1:
        raise ValueError("n_requests must be >= 1")
    rng = random.Random(seed)
    requests = []
    for idx in range(n_requests):
        level = _sample_level(params, rng)
        ground_truth = str(rng.randrange(100, 100000))
        distractors: list[str] = []
        while len(distractors) < params.distractor_count:
            candidate = str(rng.randrange(100, 100000))
            if candidate != ground_truth and candidate not in distractors:
                distractors.append(candidate)
        templates = [_make_template(params, ground_truth, distractors, level, rng)
                     for _ in range(params.templates_per_request)]
        requests.append(RequestTrace(
            id=f"r{idx:05d}",
            ground_truth=ground_truth,
            prompt_tokens=rng.randint(*params.prompt_token_range),
            templates=templates,
            difficulty=level,
        ))
    return Workload(requests)
