"""Inter-request scheduling: Poisson arrival generation and queue policies.

The server is single and non-preemptive: a started request runs to
completion. FCFS serves in arrival order; the easiest-first policies pick the
lowest difficulty label (actual or predicted) and fall back to arrival order
on ties, so equal labels reproduce FCFS exactly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .workload import RequestTrace

FCFS = "fcfs"
EASIEST_ACTUAL = "easiest-actual"
EASIEST_PREDICTED = "easiest-predicted"
SCHEDULES = (FCFS, EASIEST_ACTUAL, EASIEST_PREDICTED)


@dataclass(frozen=True)
class ArrivalConfig:
    rate_qpm: float
    n_requests: int
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rate_qpm <= 0:
            raise ValueError("rate_qpm must be > 0")
        if self.n_requests < 1:
            raise ValueError("n_requests must be >= 1")


def gen_arrivals(config: ArrivalConfig) -> list[int]:
    """Strictly increasing arrival times (ms): i.i.d. exponential gaps with
    mean 60000/rate_qpm, deterministic per seed."""
    rng = random.Random(config.seed)
    mean_gap_ms = 60000.0 / config.rate_qpm
    arrivals: list[int] = []
    t = 0.0
    prev = -1
    for _ in range(config.n_requests):
        t += rng.expovariate(1.0 / mean_gap_ms)
        point = max(int(round(t)), prev + 1)
        arrivals.append(point)
        prev = point
    return arrivals


@dataclass
class QueueEntry:
    trace: RequestTrace
    arrival: int
    order: int  # insertion order, the final tie-break
    prefill_done: int | None = None
    predicted_difficulty: int | None = None


def next_request(queue: list[QueueEntry], policy: str, now: int) -> QueueEntry:
    """Pop the next request to serve.

    FCFS picks the earliest arrival. The easiest policies pick the lowest
    difficulty, breaking ties by arrival then insertion order. Under
    easiest-predicted only entries whose prefill (and hence prediction) is
    complete are eligible.
    """
    if policy not in SCHEDULES:
        raise ValueError(f"unknown schedule policy {policy!r}")
    best_idx = -1
    best_key: tuple | None = None
    for idx, entry in enumerate(queue):
        if entry.arrival > now:
            continue
        if policy == FCFS:
            key: tuple = (entry.arrival, entry.order)
        elif policy == EASIEST_ACTUAL:
            if entry.trace.difficulty is None:
                raise ValueError(
                    f"request {entry.trace.id!r} has no difficulty label; "
                    f"easiest-actual needs labeled traces")
            key = (entry.trace.difficulty, entry.arrival, entry.order)
        else:
            if entry.prefill_done is None or entry.prefill_done > now:
                continue
            if entry.predicted_difficulty is None:
                raise ValueError(
                    f"request {entry.trace.id!r} has no predicted difficulty; "
                    f"prefill must run before easiest-predicted selection")
            key = (entry.predicted_difficulty, entry.arrival, entry.order)
        if best_key is None or key < best_key:
            best_key = key
            best_idx = idx
    if best_idx < 0:
        raise ValueError("no eligible request")
    return queue.pop(best_idx)
